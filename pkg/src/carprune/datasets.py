"""Dataset ingestion: MNIST IDX files, a synthetic bar-pattern generator, and splits."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .network import Dataset

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


def _read_exact(f, n: int, chunk: int | None, what: str) -> bytes:
    if chunk is None:
        data = f.read(n)
    else:
        parts, got = [], 0
        while got < n:
            part = f.read(min(chunk, n - got))
            if not part:
                break
            parts.append(part)
            got += len(part)
        data = b"".join(parts)
    if len(data) != n:
        raise IdxTruncatedError(f"{what}: expected {n} bytes, file ended after {len(data)}")
    return data


def read_idx(path, expected_magic: int, chunk: int | None = None) -> np.ndarray:
    """Read one IDX file of unsigned bytes; ``chunk`` bounds the read size (streaming)."""
    path = Path(path)
    with open(path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, chunk, path.name))
        if magic != expected_magic:
            raise IdxMagicError(f"{path.name}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
        ndim = magic & 0xFF
        dims = struct.unpack(f">{ndim}I", _read_exact(f, 4 * ndim, chunk, path.name))
        body = _read_exact(f, math.prod(dims), chunk, path.name)
    return np.frombuffer(body, np.uint8).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    a = np.asarray(array, np.uint8)
    magic = {1: IDX_LABELS, 3: IDX_IMAGES}[a.ndim]
    with open(path, "wb") as f:
        f.write(struct.pack(f">I{a.ndim}I", magic, *a.shape))
        f.write(a.tobytes())


def load_idx(image_path, label_path, split: str = "train", chunk: int | None = None) -> Dataset:
    """MNIST-style image/label pair; pixels are scaled to [0, 1]."""
    images = read_idx(image_path, IDX_IMAGES, chunk)
    labels = read_idx(label_path, IDX_LABELS, chunk)
    if len(images) != len(labels):
        raise IdxCountMismatchError(f"{len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() >= 10:
        raise IdxError(f"label {labels.max()} outside [0, 10)")
    x = (images.astype(np.float32) / np.float32(255.0))[:, None]
    return Dataset(x, labels.astype(np.int64), 10, split)


def synth_dataset(seed: int, n: int, class_count: int, image_shape=(1, 28, 28)) -> Dataset:
    """Oriented bars, one orientation per class, jittered in position and noised."""
    if n <= 0:
        raise ValueError("synthetic dataset needs n >= 1")
    c, h, w = image_shape
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % class_count
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    images = np.empty((n, c, h, w), np.float32)
    for i, label in enumerate(labels):
        angle = math.pi * label / class_count
        cy = (h - 1) / 2 + rng.uniform(-2, 2)
        cx = (w - 1) / 2 + rng.uniform(-2, 2)
        # distance from the line through (cy, cx) at this angle
        dist = np.abs((yy - cy) * math.cos(angle) - (xx - cx) * math.sin(angle))
        bar = np.clip(1.5 - dist, 0, 1)
        img = bar + rng.normal(0, 0.1, (h, w))
        images[i] = np.clip(img, 0, 1)[None]
    return Dataset(images, labels, class_count, "train")


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    validation: float = 0.1
    test: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fr = (self.train, self.validation, self.test)
        if any(f < 0 for f in fr) or not math.isclose(sum(fr), 1.0, abs_tol=1e-9):
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {fr}")


def split_dataset(data: Dataset, spec: SplitSpec) -> dict[str, Dataset]:
    """Disjoint, exhaustive, seeded split into train/validation/test."""
    n = len(data)
    order = np.random.default_rng(spec.seed).permutation(n)
    n_val = round(spec.validation * n)
    n_test = round(spec.test * n)
    n_train = n - n_val - n_test
    parts = {
        "train": order[:n_train],
        "validation": order[n_train : n_train + n_val],
        "test": order[n_train + n_val :],
    }
    return {name: data.subset(np.sort(idx), name) for name, idx in parts.items()}


def export_mlxtend_mnist(directory) -> tuple[Path, Path]:
    """Write the 5000-digit MNIST sample bundled with mlxtend as an IDX pair.

    Returns ``(images_path, labels_path)``; existing files are reused.
    """
    directory = Path(directory)
    images_path = directory / "mnist5k-images-idx3-ubyte"
    labels_path = directory / "mnist5k-labels-idx1-ubyte"
    if images_path.exists() and labels_path.exists():
        return images_path, labels_path
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    directory.mkdir(parents=True, exist_ok=True)
    write_idx(images_path, x.reshape(-1, 28, 28).astype(np.uint8))
    write_idx(labels_path, y.astype(np.uint8))
    return images_path, labels_path
