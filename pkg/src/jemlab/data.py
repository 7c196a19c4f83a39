"""Synthetic labeled densities, preprocessing and the CSV / JTB file formats.

JTB layout (little-endian)::

    b"JTB1" | u32 N | u32 D | u32 K | N*D float32 features | N uint32 labels
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "ConfigError",
    "DataFormatError",
    "BadMagicError",
    "HeaderError",
    "LabelRangeError",
    "TruncatedFileError",
    "DatasetSpec",
    "LabeledDataset",
    "generate",
    "preprocess",
    "save_file",
    "load_file",
]

JTB_MAGIC = b"JTB1"
GENERATORS = ("gauss_mixture", "rings", "spirals", "checkerboard", "file")


class ConfigError(ValueError):
    pass


class DataFormatError(ValueError):
    pass


class BadMagicError(DataFormatError):
    pass


class HeaderError(DataFormatError):
    pass


class LabelRangeError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


@dataclass
class DatasetSpec:
    generator: str = "gauss_mixture"
    k: int = 4
    n: int = 500
    scale: float = 1.0
    sigma: float = 0.1
    cells: int = 4
    extra_dims: int = 0
    label_noise: float = 0.0
    seed: int = 0
    path: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    normalization: tuple | None = None  # (mins, maxs) of the raw features
    geometry: dict = field(default_factory=dict)
    noise_std: float = 0.0  # >0 marks a re-noising view

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels) or len(self.labels) < 1:
            raise ConfigError("inputs must be [N, D] with N >= 1 matching labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        return replace(self, inputs=self.inputs[idx], labels=self.labels[idx])

    def split(self, val_fraction: float, rng: np.random.Generator):
        """Seeded-permutation train/val split."""
        perm = rng.permutation(len(self))
        n_val = int(round(val_fraction * len(self)))
        return self.subset(np.sort(perm[n_val:])), self.subset(np.sort(perm[:n_val]))

    def batch(self, idx, rng: np.random.Generator | None = None):
        """``(x, y)`` for rows ``idx``, with fresh noise when this is a re-noising view."""
        x = self.inputs[idx]
        if self.noise_std > 0.0:
            x = x + _clipped_noise(rng, x.shape, self.noise_std)
        return x, self.labels[idx]

    def normalize(self, raw) -> np.ndarray:
        if self.normalization is None:
            return np.asarray(raw, dtype=np.float64)
        return _scale(np.asarray(raw, dtype=np.float64), *self.normalization)

    def denormalize(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if self.normalization is None:
            return z
        lo, hi = self.normalization
        span = hi - lo
        return np.where(span > 0, (z + 1.0) * 0.5 * span + lo, lo)


def _scale(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, 2.0 * (x - lo) / safe - 1.0, 0.0)


def _clipped_noise(rng, shape, std: float) -> np.ndarray:
    # truncated at 4 std so preprocessed coordinates stay inside [-1-4s, 1+4s]
    return std * np.clip(rng.standard_normal(shape), -4.0, 4.0)


def _circle_means(k: int, scale: float) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(k) / k
    return scale * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _balanced_labels(n: int, k: int, rng) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def generate(spec: DatasetSpec, rng: np.random.Generator | None = None) -> LabeledDataset:
    """Draw a labeled dataset; ``rng`` defaults to one seeded by ``spec.seed``."""
    if spec.generator not in GENERATORS:
        raise ConfigError(f"unknown generator {spec.generator!r}")
    if spec.generator == "file":
        return load_file(spec.path)
    if spec.k < 1 or spec.n < 1:
        raise ConfigError("k and n must be positive")
    if spec.sigma < 0 or spec.scale <= 0:
        raise ConfigError("sigma must be >= 0 and scale > 0")
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    k, n = spec.k, spec.n
    geometry: dict = {"kind": spec.generator}

    if spec.generator == "gauss_mixture":
        means = _circle_means(k, spec.scale)
        y = _balanced_labels(n, k, rng)
        x = means[y] + spec.sigma * rng.standard_normal((n, 2))
        geometry.update(means=means.tolist(), sigma=spec.sigma)
    elif spec.generator == "rings":
        y = _balanced_labels(n, k, rng)
        radii = spec.scale * (np.arange(k) + 1.0)
        theta = rng.uniform(0.0, 2.0 * np.pi, n)
        r = radii[y] + spec.sigma * rng.standard_normal(n)
        x = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        geometry.update(radii=radii.tolist(), sigma=spec.sigma)
    elif spec.generator == "spirals":
        y = _balanced_labels(n, k, rng)
        t = np.sqrt(rng.uniform(0.0, 1.0, n))
        angle = 2.0 * np.pi * y / k + 1.5 * np.pi * t
        r = spec.scale * t
        x = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)
        x = x + spec.sigma * rng.standard_normal((n, 2))
        geometry.update(sigma=spec.sigma)
    else:
        cells = spec.cells
        if k > cells * cells or k < 1:
            raise ConfigError(f"checkerboard with {cells}x{cells} cells cannot carry {k} classes")
        x = rng.uniform(-spec.scale, spec.scale, size=(n, 2))
        width = 2.0 * spec.scale / cells
        ij = np.clip(np.floor((x + spec.scale) / width).astype(np.int64), 0, cells - 1)
        y = (ij[:, 0] + ij[:, 1]) % k
        centers = [[-spec.scale + (i + 0.5) * width, -spec.scale + (j + 0.5) * width, (i + j) % k]
                   for i in range(cells) for j in range(cells)]
        geometry.update(cell_centers=centers, cell_width=width)

    if spec.label_noise > 0.0 and k > 1:
        flip = rng.random(n) < spec.label_noise
        shift = rng.integers(1, k, size=n)
        y = np.where(flip, (y + shift) % k, y)
    if spec.extra_dims > 0:
        x = np.concatenate([x, np.zeros((n, spec.extra_dims))], axis=1)
    return LabeledDataset(x, y, k, name=spec.generator, geometry=geometry)


def preprocess(
    ds: LabeledDataset,
    rng: np.random.Generator | None = None,
    noise_std: float = 0.03,
    renoise: bool = False,
    normalization: tuple | None = None,
) -> LabeledDataset:
    """Scale each dimension to ``[-1, 1]`` and add Gaussian noise.

    ``normalization`` defaults to the per-dimension (min, max) of ``ds``;
    pass the training set's to transform held-out data consistently. With
    ``renoise`` the returned view carries no noise yet and adds fresh noise in
    :meth:`LabeledDataset.batch`.
    """
    if not np.all(np.isfinite(ds.inputs)):
        raise ConfigError("inputs must be finite")
    if normalization is None:
        normalization = (ds.inputs.min(axis=0), ds.inputs.max(axis=0))
    lo, hi = (np.asarray(a, dtype=np.float64) for a in normalization)
    x = _scale(ds.inputs, lo, hi)
    if noise_std > 0.0 and not renoise:
        if rng is None:
            raise ConfigError("noise requires an rng")
        x = x + _clipped_noise(rng, x.shape, noise_std)
    return replace(ds, inputs=x, normalization=(lo, hi), noise_std=noise_std if renoise else 0.0)


# -- files -----------------------------------------------------------------


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt:
        return fmt
    return "csv" if path.suffix.lower() == ".csv" else "jtb"


def save_file(ds: LabeledDataset, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = _infer_format(path, fmt)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(ds.dim)] + ["label"])
            for row, label in zip(ds.inputs, ds.labels):
                w.writerow([repr(float(v)) for v in row] + [int(label)])
    elif fmt == "jtb":
        n, d = ds.inputs.shape
        blob = JTB_MAGIC + struct.pack("<III", n, d, ds.num_classes)
        blob += ds.inputs.astype("<f4").tobytes() + ds.labels.astype("<u4").tobytes()
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(blob)
        tmp.replace(path)
    else:
        raise ConfigError(f"unknown format {fmt!r}")


def _load_jtb(path: Path) -> LabeledDataset:
    blob = path.read_bytes()
    if len(blob) < 4 or blob[:4] != JTB_MAGIC:
        raise BadMagicError(f"{path}: missing JTB1 magic")
    if len(blob) < 16:
        raise TruncatedFileError(f"{path}: truncated header")
    n, d, k = struct.unpack_from("<III", blob, 4)
    need = 16 + 4 * n * d + 4 * n
    if len(blob) < need:
        raise TruncatedFileError(f"{path}: expected {need} bytes, found {len(blob)}")
    if len(blob) > need:
        raise HeaderError(f"{path}: {len(blob) - need} trailing bytes")
    x = np.frombuffer(blob, dtype="<f4", count=n * d, offset=16).reshape(n, d).astype(np.float64)
    y = np.frombuffer(blob, dtype="<u4", count=n, offset=16 + 4 * n * d).astype(np.int64)
    if np.any(y >= k):
        raise LabelRangeError(f"{path}: label {int(y.max())} >= K={k}")
    return LabeledDataset(x, y, int(k), name=path.stem)


def _load_csv(path: Path, num_classes: int | None) -> LabeledDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or "label" not in rows[0]:
        raise HeaderError(f"{path}: header must contain a 'label' column")
    header = rows[0]
    li = header.index("label")
    feats, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise TruncatedFileError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            labels.append(int(row[li]))
            feats.append([float(v) for j, v in enumerate(row) if j != li])
        except ValueError as exc:
            raise HeaderError(f"{path}:{lineno}: {exc}") from None
    y = np.asarray(labels, dtype=np.int64)
    if len(y) == 0:
        raise TruncatedFileError(f"{path}: no data rows")
    k = int(y.max()) + 1 if num_classes is None else int(num_classes)
    if np.any(y < 0) or np.any(y >= k):
        raise LabelRangeError(f"{path}: labels must lie in [0, {k})")
    return LabeledDataset(np.asarray(feats, dtype=np.float64), y, k, name=path.stem)


def load_file(path, fmt: str | None = None, num_classes: int | None = None) -> LabeledDataset:
    path = Path(path)
    fmt = _infer_format(path, fmt)
    if fmt == "jtb":
        return _load_jtb(path)
    if fmt == "csv":
        return _load_csv(path, num_classes)
    raise ConfigError(f"unknown format {fmt!r}")
