"""MNIST IDX and CIFAR-10 binary readers."""

from __future__ import annotations

import gzip
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..tensor import DTYPE

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 3073

MNIST_MEAN, MNIST_STD = (0.1307,), (0.3081,)
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


class DatasetFormatError(ValueError):
    pass


@dataclass
class LabeledData:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an IDX file (big-endian header, unsigned-byte payload)."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DatasetFormatError(f"{path}: file too short for IDX magic at byte offset 0")
    magic = int.from_bytes(raw[:4], "big")
    if magic >> 8 != 0x08 or magic & 0xFF == 0:
        raise DatasetFormatError(f"{path}: bad IDX magic 0x{magic:08x} at byte offset 0")
    if expected_magic is not None and magic != expected_magic:
        raise DatasetFormatError(f"{path}: expected magic 0x{expected_magic:08x}, got 0x{magic:08x} at byte offset 0")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetFormatError(f"{path}: truncated dimension header, file ends at byte offset {len(raw)}")
    dims = tuple(int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim))
    need = header + int(np.prod(dims))
    if len(raw) < need:
        raise DatasetFormatError(f"{path}: truncated payload, expected {need} bytes but file ends at byte offset {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, count=need - header, offset=header).reshape(dims)


def standardize(images_u8: np.ndarray, mean, std) -> np.ndarray:
    x = images_u8.astype(DTYPE) / 255.0
    m = np.asarray(mean, dtype=DTYPE).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=DTYPE).reshape(1, -1, 1, 1)
    return ((x - m) / s).astype(DTYPE)


def _check_labels(y: np.ndarray, path, classes: int = 10):
    if y.size and (y.min() < 0 or y.max() >= classes):
        raise DatasetFormatError(f"{path}: labels outside 0..{classes - 1}")


def _find(root: Path, stems) -> Path:
    for stem in stems:
        for suffix in ("", ".gz"):
            p = root / (stem + suffix)
            if p.exists():
                return p
    raise FileNotFoundError(f"none of {list(stems)} found in {root}")


def load_mnist(root, split: str = "train") -> LabeledData:
    """Images as ``(n, 1, 28, 28)`` standardized float32, labels as int64."""
    root = Path(root)
    prefix = "train" if split == "train" else "t10k"
    ipath = _find(root, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte"])
    lpath = _find(root, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte"])
    images = read_idx(ipath, IDX_IMAGES)
    labels = read_idx(lpath, IDX_LABELS).astype(np.int64)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise DatasetFormatError(f"{root}: images {images.shape} and labels {labels.shape} disagree")
    _check_labels(labels, lpath)
    return LabeledData(standardize(images[:, None], MNIST_MEAN, MNIST_STD), labels)


def read_cifar_binary(path) -> tuple[np.ndarray, np.ndarray]:
    raw = _read_bytes(path)
    if len(raw) % CIFAR_RECORD:
        full = len(raw) // CIFAR_RECORD
        raise DatasetFormatError(
            f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}; "
            f"record {full} truncated at byte offset {full * CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    _check_labels(labels, path)
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10(root, split: str = "train") -> LabeledData:
    root = Path(root)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    parts = [read_cifar_binary(root / n) for n in names if (root / n).exists()]
    if not parts:
        raise FileNotFoundError(f"no CIFAR-10 {split} batches in {root}")
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return LabeledData(standardize(images, CIFAR_MEAN, CIFAR_STD), labels)


def ingest_dataset(path, fmt: str, split: str = "train") -> LabeledData:
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset path {path} does not exist")
    if fmt in ("idx", "mnist"):
        return load_mnist(path, split)
    if fmt in ("cifar-binary", "cifar10"):
        return load_cifar10(path, split)
    raise ValueError(f"unknown dataset format {fmt!r}; expected 'idx' or 'cifar-binary'")


def flip_crop(batch: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip and padded random crop."""
    n, c, h, w = batch.shape
    flip = rng.random(n) < 0.5
    out = np.where(flip[:, None, None, None], batch[..., ::-1], batch)
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    res = np.empty_like(batch)
    for i in range(n):
        res[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    return res
