"""
data_service.py - MNIST IDX ingestion and a synthetic two-class generator

IDX layout (big endian): u32 magic, u32 count, [u32 rows, u32 cols], u8 payload.
"""

import logging
import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from interprobust.exceptions import IdxCountMismatchError, IdxMagicError, IdxTruncatedError
from interprobust.models import Dataset

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_idx(path: Union[str, Path], magic: int, ndims: int) -> Tuple[Tuple[int, ...], np.ndarray]:
    blob = Path(path).read_bytes()
    header_size = 4 + 4 * ndims
    if len(blob) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the magic number")
    (found,) = struct.unpack(">I", blob[:4])
    if found != magic:
        raise IdxMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(blob) < header_size:
        raise IdxTruncatedError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndims}I", blob[4:header_size])
    expected = int(np.prod(dims))
    payload = np.frombuffer(blob, dtype=np.uint8, offset=header_size)
    if payload.size < expected:
        raise IdxTruncatedError(f"{path}: {payload.size} payload bytes, expected {expected}")
    return dims, payload[:expected]


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path], split: str = "train") -> Dataset:
    (count, rows, cols), pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (label_count,), labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if count != label_count:
        raise IdxCountMismatchError(f"{count} images vs {label_count} labels")

    images = (pixels.reshape(count, 1, rows, cols).astype(np.float32) / np.float32(255.0)).astype(np.float32)
    logger.info(f"loaded {count} {rows}x{cols} images from {images_path}")
    return Dataset(images=images, labels=labels.astype(np.int64), split=split)


def synth_two_class(n: int, size: int = 28, seed: int = 0, noise: float = 0.2) -> Dataset:
    """Class 0 lights the top half, class 1 the bottom half; exactly n/2 of each."""
    if n % 2:
        raise ValueError(f"n must be even, got {n}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.repeat(np.array([0, 1], dtype=np.int64), n // 2))

    images = rng.uniform(0.0, noise, size=(n, 1, size, size)).astype(np.float32)
    half = size // 2
    brightness = rng.uniform(0.6, 1.0 - noise, size=n).astype(np.float32)
    for i, label in enumerate(labels):
        rows = slice(0, half) if label == 0 else slice(half, size)
        images[i, 0, rows, :] += brightness[i]
    return Dataset(images=np.clip(images, 0.0, 1.0), labels=labels, split="synth")


def split_dataset(dataset: Dataset, test_fraction: float = 0.25) -> Tuple[Dataset, Dataset]:
    """Deterministic head/tail split (synthetic data has no separate test file)."""
    cut = int(round(len(dataset) * (1 - test_fraction)))
    head = Dataset(images=dataset.images[:cut], labels=dataset.labels[:cut], split="train")
    tail = Dataset(images=dataset.images[cut:], labels=dataset.labels[cut:], split="test")
    return head, tail
