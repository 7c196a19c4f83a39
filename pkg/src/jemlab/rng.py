"""Deterministic random streams derived from one seed plus string labels."""

from __future__ import annotations

import zlib

import numpy as np


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def make_rng(seed: int, *labels) -> np.random.Generator:
    """Philox-backed generator for ``(seed, *labels)``; same inputs, same stream."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_label_key(l) for l in labels))
    return np.random.Generator(np.random.Philox(ss))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.Philox()
    bg.state = state
    return np.random.Generator(bg)
