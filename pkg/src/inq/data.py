"""Dataset ingestion (IDX files) and deterministic synthetic datasets."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .engine import Dataset

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class IdxFormatError(ValueError):
    pass


def _read(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_idx(path_images, path_labels, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped).

    Pixels are scaled to [0, 1] and returned as ``(N, 1, rows, cols)``.
    """
    img = _read(path_images)
    lab = _read(path_labels)
    if len(img) < 16 or len(lab) < 8:
        raise IdxFormatError("IDX header truncated")
    magic, n, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IDX_IMAGES:
        raise IdxFormatError(f"{path_images}: magic {magic:#010x}, expected {IDX_IMAGES:#010x}")
    lmagic, ln = struct.unpack(">II", lab[:8])
    if lmagic != IDX_LABELS:
        raise IdxFormatError(f"{path_labels}: magic {lmagic:#010x}, expected {IDX_LABELS:#010x}")
    if n != ln:
        raise IdxFormatError(f"{n} images but {ln} labels")
    if len(img) != 16 + n * rows * cols or len(lab) != 8 + n:
        raise IdxFormatError("IDX payload size does not match header dimensions")
    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if n else 0
    return Dataset(pixels / 255.0, labels, num_classes)


def write_idx(path_images, path_labels, data: Dataset) -> None:
    """Write image data in [0, 1] as uint8 IDX files (``round(x * 255)``)."""
    x = data.inputs
    if x.ndim == 4:
        if x.shape[1] != 1:
            raise ValueError("IDX images must have a single channel")
        x = x[:, 0]
    if x.ndim != 3:
        raise ValueError(f"expected (N, rows, cols) images, got {data.inputs.shape}")
    if len(data) and data.labels.max() > 255:
        raise ValueError("IDX labels must fit in one byte")
    n, rows, cols = x.shape
    pixels = np.clip(np.rint(x * 255), 0, 255).astype(np.uint8)
    Path(path_images).write_bytes(struct.pack(">IIII", IDX_IMAGES, n, rows, cols)
                                  + pixels.tobytes())
    Path(path_labels).write_bytes(struct.pack(">II", IDX_LABELS, n)
                                  + data.labels.astype(np.uint8).tobytes())


def _class_counts(classes: int, n: int) -> list[int]:
    return [n // classes + (c < n % classes) for c in range(classes)]


def gen_synthetic(kind: str, classes: int, n: int, seed: int = 0,
                  image_size: int | None = None, noise: float | None = None) -> Dataset:
    """Deterministic 2-D point datasets, optionally rendered as images.

    ``blobs`` puts Gaussian clusters on a circle of radius 10 (std 1 by
    default); ``spirals`` draws one noisy arm per class, which no linear
    model separates. With ``image_size`` set, every point is drawn as a
    Gaussian spot on an ``image_size`` square canvas and the dataset holds
    ``(N, 1, S, S)`` images quantized to multiples of 1/255.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if n < classes:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    counts = _class_counts(classes, n)
    labels = np.repeat(np.arange(classes), counts)
    if kind == "blobs":
        noise = 1.0 if noise is None else noise
        angles = 2 * np.pi * np.arange(classes) / classes
        centers = 10.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        points = centers[labels] + noise * rng.standard_normal((n, 2))
    elif kind == "spirals":
        noise = 0.12 if noise is None else noise
        t = rng.uniform(0.2, 1.0, n)
        theta = (2 * np.pi * labels / classes + 1.5 * np.pi * t
                 + noise * rng.standard_normal(n))
        points = t[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    else:
        raise ValueError(f"unknown synthetic dataset kind {kind!r}")
    order = rng.permutation(n)
    points, labels = points[order], labels[order]
    if image_size is None:
        return Dataset(points, labels, classes)
    extent = 1.0 if kind == "spirals" else 10.0 + 4 * noise
    return Dataset(rasterize(points, image_size, extent), labels, classes)


def rasterize(points: np.ndarray, size: int, extent: float = 1.0,
              spot: float = 0.8) -> np.ndarray:
    """Render points in ``[-extent, extent]^2`` as Gaussian spots of width
    ``spot`` pixels on ``size x size`` single-channel images."""
    centre = (size - 1) / 2
    px = centre + points[:, 0] / extent * centre
    py = centre - points[:, 1] / extent * centre
    grid = np.arange(size)
    gx = np.exp(-((grid[None, :] - px[:, None]) ** 2) / (2 * spot ** 2))
    gy = np.exp(-((grid[None, :] - py[:, None]) ** 2) / (2 * spot ** 2))
    img = gy[:, :, None] * gx[:, None, :]
    return (np.rint(img * 255) / 255)[:, None]


def regression_datasets(seed: int = 0, n_train: int = 3000, n_test: int = 1000,
                        image_size: int = 16) -> tuple[Dataset, Dataset]:
    """Train/test split of the 10-class spiral image task used for experiments."""
    train = gen_synthetic("spirals", 10, n_train, seed=seed, image_size=image_size)
    test = gen_synthetic("spirals", 10, n_test, seed=seed + 1_000_003, image_size=image_size)
    return train, test
