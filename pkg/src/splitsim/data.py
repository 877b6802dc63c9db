"""Synthetic datasets and non-IID partitioning across devices.

Partitioning draws one class-probability vector per device from a symmetric
Dirichlet with concentration alpha / (1 - alpha + eps); alpha near 1 sends the
concentration to ~1/eps and the split becomes approximately IID, while small
alpha concentrates each device on a few classes. Samples are handed out one
at a time, cycling over devices, each device drawing a label from its own
probability vector until the class pools run dry.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

DEFAULT_EPSILON = 1e-9

_TAG_SYNTH = 11
_TAG_PARTITION = 12
_TAG_VALSPLIT = 13

_MAGIC = b"SSD1"

KINDS = ("gaussian-blobs", "spirals", "image-patches")


@dataclass
class Dataset:
    x: np.ndarray  # (n, *shape) float32
    y: np.ndarray  # (n,) int64
    classes: int

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])


@dataclass
class Partition:
    """Assignment of every sample index to exactly one device."""

    dataset: Dataset
    devices: int
    assignment: np.ndarray  # (n,) device id per sample index
    counts: np.ndarray      # (devices,) samples per device
    alpha: float
    epsilon: float
    seed: int
    _indices: list = field(default_factory=list, repr=False)

    def device_indices(self, k: int) -> np.ndarray:
        if not self._indices:
            self._indices = [np.where(self.assignment == i)[0] for i in range(self.devices)]
        return self._indices[k]


def _balanced_labels(n: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    base, extra = divmod(n, classes)
    labels = np.concatenate(
        [np.full(base + (1 if c < extra else 0), c, dtype=np.int64) for c in range(classes)]
    )
    rng.shuffle(labels)
    return labels


def make_synthetic(n: int, classes: int, kind: str, shape, seed: int,
                   spread: float = 4.0, noise: float = 1.0) -> Dataset:
    """Deterministic synthetic dataset with class counts balanced to within 1.

    spread scales class separation, noise scales within-class jitter.
    """
    if n < classes:
        raise ConfigError(f"need at least one sample per class: n={n}, classes={classes}")
    if kind not in KINDS:
        raise ConfigError(f"unknown dataset kind {kind!r}; choose from {KINDS}")
    shape = (shape,) if isinstance(shape, int) else tuple(int(d) for d in shape)
    rng = np.random.default_rng(np.random.SeedSequence([seed, _TAG_SYNTH]))
    y = _balanced_labels(n, classes, rng)

    if kind == "gaussian-blobs":
        dim = int(np.prod(shape))
        means = rng.normal(size=(classes, dim))
        means *= spread / np.linalg.norm(means, axis=1, keepdims=True)
        x = means[y] + noise * rng.normal(size=(n, dim))
        x = x.reshape(n, *shape)
    elif kind == "spirals":
        dim = int(np.prod(shape))
        if dim < 2:
            raise ConfigError("spirals need at least 2 feature dimensions")
        t = rng.uniform(0.05, 1.0, size=n)
        theta = 3.0 * np.pi * t + 2.0 * np.pi * y / classes
        x = np.zeros((n, dim))
        x[:, 0] = spread * t * np.cos(theta)
        x[:, 1] = spread * t * np.sin(theta)
        x += 0.05 * noise * rng.normal(size=(n, dim))
        x = x.reshape(n, *shape)
    else:  # image-patches
        base = rng.normal(size=(classes, *shape))
        x = spread / 4.0 * base[y] + noise * rng.normal(size=(n, *shape))

    return Dataset(x.astype(np.float32), y, classes)


def split_validation(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Hold out an IID slice for validation; every engine sees the same split."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"validation fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _TAG_VALSPLIT]))
    perm = rng.permutation(ds.n)
    n_val = max(1, int(round(ds.n * fraction)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    return (
        Dataset(ds.x[train_idx], ds.y[train_idx], ds.classes),
        Dataset(ds.x[val_idx], ds.y[val_idx], ds.classes),
    )


def dirichlet_partition(ds: Dataset, devices: int, alpha: float,
                        epsilon: float = DEFAULT_EPSILON, seed: int = 0) -> Partition:
    """Partition a dataset across devices with Dirichlet-skewed class mixtures."""
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"alpha must be in (0, 1], got {alpha}")
    if devices < 1:
        raise ConfigError(f"need at least one device, got {devices}")
    if devices > ds.n:
        raise ConfigError(f"cannot spread {ds.n} samples over {devices} devices")
    concentration = alpha / (1.0 - alpha + epsilon)

    attempt = seed
    while True:
        rng = np.random.default_rng(np.random.SeedSequence([attempt, _TAG_PARTITION]))
        assignment = _draw_assignment(ds, devices, concentration, rng)
        counts = np.bincount(assignment, minlength=devices)
        if counts.min() > 0:
            break
        attempt += 1  # re-draw so every device owns at least one sample
    return Partition(ds, devices, assignment, counts, alpha, epsilon, seed)


def _draw_assignment(ds: Dataset, devices: int, concentration: float,
                     rng: np.random.Generator) -> np.ndarray:
    classes = ds.classes
    probs = rng.dirichlet(np.full(classes, concentration), size=devices)
    pools = [list(rng.permutation(np.where(ds.y == c)[0])) for c in range(classes)]
    available = np.array([len(p) > 0 for p in pools])

    # per-device cumulative distributions over the classes still in stock;
    # rebuilt only when a class pool empties
    def rebuild():
        masked = probs * available
        sums = masked.sum(axis=1, keepdims=True)
        flat = sums[:, 0] == 0.0
        if flat.any():  # degenerate dirichlet row: fall back to uniform on stock
            masked[flat] = available.astype(float)
            sums = masked.sum(axis=1, keepdims=True)
        return np.cumsum(masked / sums, axis=1)

    cums = rebuild()
    assignment = np.empty(ds.n, dtype=np.int64)
    assigned = 0
    device = 0
    while assigned < ds.n:
        c = int(np.searchsorted(cums[device], rng.random(), side="right"))
        if c >= classes or not pools[c]:
            # fp tail guard: the draw landed beyond the last in-stock boundary
            c = max(i for i in range(classes) if pools[i])
        idx = pools[c].pop()
        assignment[idx] = device
        assigned += 1
        if not pools[c]:
            available[c] = False
            if assigned < ds.n:
                cums = rebuild()
        device = (device + 1) % devices
    return assignment


# ---------------------------------------------------------------------------
# heterogeneity measurement (test-level proxy for the non-IID degree)


def label_histogram(y: np.ndarray, classes: int) -> np.ndarray:
    counts = np.bincount(y, minlength=classes).astype(float)
    return counts / counts.sum()


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(p - q).sum())


def partition_tv(part: Partition) -> np.ndarray:
    """Total-variation distance of each device's label mix from the global one."""
    ds = part.dataset
    global_hist = label_histogram(ds.y, ds.classes)
    out = np.empty(part.devices)
    for k in range(part.devices):
        out[k] = tv_distance(label_histogram(ds.y[part.device_indices(k)], ds.classes),
                             global_hist)
    return out


# ---------------------------------------------------------------------------
# flat binary dump/load (little-endian: header, f32 samples, u16 labels)


def dump_dataset(ds: Dataset, path) -> None:
    if ds.classes > 0xFFFF or ds.y.max(initial=0) > 0xFFFF:
        raise DataError("binary format stores labels as u16")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IB", ds.n, len(ds.shape)))
        fh.write(struct.pack(f"<{len(ds.shape)}I", *ds.shape))
        fh.write(struct.pack("<H", ds.classes))
        fh.write(np.ascontiguousarray(ds.x, dtype="<f4").tobytes())
        fh.write(ds.y.astype("<u2").tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise DataError(f"{path}: not a splitsim dataset file")
    off = 4
    n, ndim = struct.unpack_from("<IB", raw, off)
    off += 5
    shape = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    (classes,) = struct.unpack_from("<H", raw, off)
    off += 2
    n_elem = n * int(np.prod(shape))
    expected = off + 4 * n_elem + 2 * n
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(raw)}")
    x = np.frombuffer(raw, dtype="<f4", count=n_elem, offset=off).reshape(n, *shape)
    y = np.frombuffer(raw, dtype="<u2", count=n, offset=off + 4 * n_elem).astype(np.int64)
    if y.max(initial=0) >= classes:
        raise DataError(f"{path}: labels exceed class count {classes}")
    return Dataset(x.copy(), y, classes)
