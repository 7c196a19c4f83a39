"""JEMC checkpoint files.

Layout: ``b"JEMC"``, u32 format version, u64 header length, a UTF-8 JSON
header, then every array as little-endian f64 in header order. The header
carries the network layer descriptors, the run config text, training-state
scalars and the generator state, so a load restores a run bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore import Network
from .energy import JemModel
from .experiment import RunConfig, parse_config
from .rng import restore_rng, rng_state
from .sampler import ReplayBuffer
from .trainer import Adam, TrainState

__all__ = ["CheckpointError", "Checkpoint", "save_checkpoint", "load_checkpoint", "MAGIC", "VERSION"]

MAGIC = b"JEMC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    """Unreadable, corrupt or incompatible checkpoint."""


@dataclass
class Checkpoint:
    state: TrainState
    run: RunConfig
    normalization: tuple  # (mins, maxs) of the raw training features
    dataset_digest: str

    @property
    def model(self) -> JemModel:
        return self.state.model


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _rng_header(rng) -> dict:
    st = rng_state(rng)
    return {
        "bit_generator": st["bit_generator"],
        "state": {k: [int(v) for v in a] for k, a in st["state"].items()},
        "buffer": [int(v) for v in st["buffer"]],
        "buffer_pos": int(st["buffer_pos"]),
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def _rng_from_header(h: dict):
    st = {
        "bit_generator": h["bit_generator"],
        "state": {k: np.array(v, dtype=np.uint64) for k, v in h["state"].items()},
        "buffer": np.array(h["buffer"], dtype=np.uint64),
        "buffer_pos": h["buffer_pos"],
        "has_uint32": h["has_uint32"],
        "uinteger": h["uinteger"],
    }
    return restore_rng(st)


def encode(state: TrainState, run: RunConfig, normalization, dataset_digest: str) -> bytes:
    net = state.model.net
    opt = state.optimizer
    arrays = [("param", p.data) for p in net.parameters]
    arrays += [("adam_m", m) for m in opt.m] + [("adam_v", v) for v in opt.v]
    arrays.append(("buffer", state.buffer.slots))
    lo, hi = normalization
    header = {
        "layers": net.descriptors(),
        "config": run.to_text(),
        "dataset_digest": dataset_digest,
        "normalization": [_jsonable(np.asarray(lo)), _jsonable(np.asarray(hi))],
        "adam": {"beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "t": opt.t},
        "buffer": {"capacity": state.buffer.capacity, "dim": state.buffer.dim,
                   "size": state.buffer.size, "write_cursor": state.buffer.write_cursor},
        "state": {
            "epoch": state.epoch, "step": state.step, "lr_scale": state.lr_scale, "eta": state.eta,
            "seed": state.seed, "restarts": state.restarts, "actions": list(state.actions),
            "gap_window": _jsonable(state.gap_window), "history": _jsonable(state.history),
            "best_val": state.best_val,
        },
        "rng": _rng_header(state.rng),
        "arrays": [{"name": n, "shape": list(np.shape(a))} for n, a in arrays],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + body


def decode(blob: bytes) -> Checkpoint:
    try:
        return _decode(blob)
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise CheckpointError(f"corrupt JEMC contents: {exc}") from None


def _decode(blob: bytes) -> Checkpoint:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise CheckpointError("not a JEMC checkpoint (bad magic)")
    if len(blob) < _PREFIX.size:
        raise CheckpointError("truncated JEMC header")
    _, version, head_len = _PREFIX.unpack_from(blob)
    if version != VERSION:
        raise CheckpointError(f"JEMC version {version} not supported (expected {VERSION})")
    start = _PREFIX.size
    if len(blob) < start + head_len:
        raise CheckpointError("truncated JEMC header")
    try:
        h = json.loads(blob[start : start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt JEMC header: {exc}") from None
    offset = start + head_len
    arrays: dict = {}
    for spec in h["arrays"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        end = offset + 8 * count
        if end > len(blob):
            raise CheckpointError("truncated JEMC array data")
        a = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(spec["shape"])
        arrays.setdefault(spec["name"], []).append(a)
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after JEMC data")

    net = Network.from_descriptors(h["layers"], arrays.get("param", []))
    ah = h["adam"]
    opt = Adam([p.shape for p in net.parameters], ah["beta1"], ah["beta2"], ah["eps"])
    opt.m, opt.v, opt.t = arrays.get("adam_m", []), arrays.get("adam_v", []), ah["t"]
    bh = h["buffer"]
    buf = ReplayBuffer(bh["capacity"], bh["dim"])
    buf.slots = arrays["buffer"][0].reshape(bh["capacity"], bh["dim"])
    buf.size, buf.write_cursor = bh["size"], bh["write_cursor"]
    s = h["state"]
    state = TrainState(
        model=JemModel(net), buffer=buf, optimizer=opt, rng=_rng_from_header(h["rng"]),
        epoch=s["epoch"], step=s["step"], lr_scale=s["lr_scale"], eta=s["eta"], seed=s["seed"],
        restarts=s["restarts"], actions=list(s["actions"]), gap_window=list(s["gap_window"]),
        history=list(s["history"]), best_val=s["best_val"],
    )
    norm = tuple(np.asarray(v, dtype=np.float64) for v in h["normalization"])
    return Checkpoint(state, parse_config(h["config"]), norm, h["dataset_digest"])


def save_checkpoint(path, state: TrainState, run: RunConfig, normalization, dataset_digest: str) -> None:
    """Write atomically (temp file, then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(state, run, normalization, dataset_digest))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    return decode(blob)
