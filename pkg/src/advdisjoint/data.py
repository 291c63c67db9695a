"""Dataset ingestion: CIFAR-10 binary batches, IDX files and synthetic generators."""

from __future__ import annotations

import dataclasses
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]

IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


class DatasetError(ValueError):
    """Malformed dataset input; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, path: str | os.PathLike | None = None, offset: int | None = None):
        self.path = str(path) if path is not None else None
        self.offset = offset
        where = ""
        if path is not None:
            where += f" in {path}"
        if offset is not None:
            where += f" at byte offset {offset}"
        super().__init__(message + where)


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("x and y lengths differ")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def take(self, count: int | None) -> "Dataset":
        if count is None or count >= len(self):
            return self
        return dataclasses.replace(self, x=self.x[:count], y=self.y[:count])

    def astype(self, dtype) -> "Dataset":
        return dataclasses.replace(self, x=self.x.astype(dtype))


# ------------------------------------------------------------------ CIFAR-10

def read_cifar_batch(path: str | os.PathLike, num_classes: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Parse one binary batch: records of 1 label byte + 3072 pixel bytes (R, G, B planes)."""
    raw = Path(path).read_bytes()
    whole, rest = divmod(len(raw), CIFAR_RECORD)
    if rest:
        raise DatasetError(f"truncated record: {rest} trailing bytes, expected {CIFAR_RECORD} per record",
                           path, whole * CIFAR_RECORD)
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(whole, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        i = int(bad[0])
        raise DatasetError(f"label {labels[i]} out of range for {num_classes} classes", path, i * CIFAR_RECORD)
    pixels = rec[:, 1:].reshape(whole, 3, 32, 32)
    return pixels, labels


def load_cifar10(path: str | os.PathLike, split: str = "train", limit: int | None = None,
                 dtype=np.float32) -> Dataset:
    p = Path(path)
    if p.is_file():
        files = [p]
    else:
        names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
        for sub in ("", "cifar-10-batches-bin"):
            if (p / sub / names[0]).exists():
                files = [p / sub / n for n in names]
                break
        else:
            raise DatasetError(f"no CIFAR-10 {split} batches found", p)
    xs, ys = [], []
    have = 0
    for f in files:
        px, lb = read_cifar_batch(f)
        xs.append(px)
        ys.append(lb)
        have += len(lb)
        if limit is not None and have >= limit:
            break
    x = np.concatenate(xs)[:limit].astype(dtype) / 255.0
    y = np.concatenate(ys)[:limit]
    return Dataset(x.astype(dtype), y, 10, f"cifar10-{split}")


# ----------------------------------------------------------------------- IDX

def read_idx(path: str | os.PathLike) -> np.ndarray:
    """Read an IDX array (big-endian header: 0, 0, dtype code, ndim, then dims)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DatasetError("file shorter than the 4-byte magic", path, 0)
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0:
        raise DatasetError(f"bad magic prefix 0x{zero:04x}", path, 0)
    if code not in IDX_DTYPES:
        raise DatasetError(f"unknown IDX type code 0x{code:02x}", path, 2)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetError("truncated dimension header", path, len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dt = IDX_DTYPES[code]
    need = int(np.prod(dims)) * dt.itemsize
    if len(raw) - header != need:
        raise DatasetError(f"payload is {len(raw) - header} bytes, header implies {need}", path,
                           header + min(need, len(raw) - header))
    return np.frombuffer(raw, dtype=dt, offset=header).reshape(dims).astype(dt.newbyteorder("="))


def load_idx(images: str | os.PathLike, labels: str | os.PathLike, num_classes: int = 10,
             limit: int | None = None, dtype=np.float32) -> Dataset:
    x = read_idx(images)
    y = read_idx(labels).astype(np.int64)
    if x.shape[0] != y.shape[0]:
        raise DatasetError(f"{x.shape[0]} images but {y.shape[0]} labels", labels)
    bad = np.flatnonzero((y < 0) | (y >= num_classes))
    if bad.size:
        i = int(bad[0])
        raise DatasetError(f"label {y[i]} out of range for {num_classes} classes", labels, 8 + i)
    if x.ndim == 3:
        x = x[:, None]
    x = x.astype(np.float64)
    if x.max(initial=0) > 1.0:
        x = x / 255.0
    return Dataset(x[:limit].astype(dtype), y[:limit], num_classes, "idx")


# ----------------------------------------------------------------- synthetic

def make_blobs(classes: int = 2, n: int = 200, sigma: float = 0.1, seed: int = 0,
               dtype=np.float32) -> Dataset:
    """Isotropic 2-D Gaussian blobs with centres spread on a circle inside [0, 1]^2."""
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(classes) / classes
    centres = 0.5 + 0.3 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    y = np.arange(n) % classes
    rng.shuffle(y)
    x = centres[y] + sigma * rng.standard_normal((n, 2))
    return Dataset(x.astype(dtype), y.astype(np.int64), classes, "blobs")


def make_arcs(classes: int = 2, n: int = 200, sigma: float = 0.05, seed: int = 0,
              dtype=np.float32) -> Dataset:
    """Interleaved half-circle arcs in 2-D (``classes=2`` gives the usual two moons)."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % classes
    rng.shuffle(y)
    t = rng.uniform(0.0, np.pi, n)
    flip = np.where(y % 2 == 0, 1.0, -1.0)
    x0 = np.cos(t) + (y % 2) * 1.0 + (y // 2) * 0.5
    x1 = flip * np.sin(t) - (y % 2) * 0.5 + (y // 2) * 0.5
    x = np.stack([x0, x1], axis=1)
    x = (x - x.min(axis=0)) / (x.max(axis=0) - x.min(axis=0) + 1e-12) * 0.8 + 0.1
    x = x + sigma * rng.standard_normal(x.shape)
    return Dataset(x.astype(dtype), y.astype(np.int64), classes, "arcs")


def make_templates(classes: int = 10, n: int = 2000, shape=(3, 16, 16), amplitude: float = 0.08,
                   sigma: float = 0.15, cell: int = 2, template_seed: int = 1234, seed: int = 0,
                   dtype=np.float32) -> Dataset:
    """Synthetic image classification with many weak, redundant pixel features.

    Each class owns a fixed blocky random pattern (drawn from ``template_seed``,
    so train and test splits generated with different ``seed`` share it). A
    sample is ``0.5 + amplitude * pattern[label] + sigma * noise``, clamped to
    ``[0, 1]``, where the noise is blocky with the same ``cell`` size.
    """
    c, h, w = shape
    if h % cell or w % cell:
        raise ValueError("image size must be divisible by cell")
    trng = np.random.default_rng(template_seed)
    low = trng.standard_normal((classes, c, h // cell, w // cell))
    templates = np.kron(low, np.ones((1, 1, cell, cell)))
    templates /= np.abs(templates).max(axis=(1, 2, 3), keepdims=True)
    rng = np.random.default_rng(seed)
    y = np.arange(n) % classes
    rng.shuffle(y)
    noise = np.kron(rng.standard_normal((n, c, h // cell, w // cell)), np.ones((1, 1, cell, cell)))
    x = np.clip(0.5 + amplitude * templates[y] + sigma * noise, 0.0, 1.0)
    return Dataset(x.astype(dtype), y.astype(np.int64), classes, "templates")


SYNTHETIC = {"blobs": make_blobs, "arcs": make_arcs, "templates": make_templates}


def load_dataset(source: dict, dtype=np.float32) -> Dataset:
    """Load a dataset described by a source mapping.

    ``{"kind": "cifar10", "path": DIR, "split": "train"|"test", "limit": N}``,
    ``{"kind": "idx", "images": PATH, "labels": PATH, "classes": K}``, or a
    synthetic generator ``{"kind": "blobs"|"arcs"|"templates", ...}`` whose
    remaining keys are passed to the generator.
    """
    source = dict(source)
    kind = source.pop("kind", None)
    if kind == "cifar10":
        return load_cifar10(source["path"], source.get("split", "train"), source.get("limit"), dtype)
    if kind == "idx":
        return load_idx(source["images"], source["labels"], source.get("classes", 10),
                        source.get("limit"), dtype)
    if kind in SYNTHETIC:
        if "shape" in source:
            source["shape"] = tuple(source["shape"])
        return SYNTHETIC[kind](dtype=dtype, **source)
    raise DatasetError(f"unknown dataset kind {kind!r}")


def batches(n: int, batch_size: int, rng: np.random.Generator, drop_last: bool = False):
    """Yield shuffled index arrays covering ``range(n)``."""
    order = rng.permutation(n)
    stop = n - (n % batch_size) if drop_last else n
    for lo in range(0, stop, batch_size):
        yield order[lo:lo + batch_size]
