import struct

import numpy as np
import pytest

from interprobust.exceptions import IdxCountMismatchError, IdxMagicError, IdxTruncatedError
from interprobust.services.data_service import (
    IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
    load_idx,
    split_dataset,
    synth_two_class,
)


def write_images(path, pixels, magic=IDX_IMAGES_MAGIC):
    count, rows, cols = pixels.shape
    path.write_bytes(struct.pack(">IIII", magic, count, rows, cols) + pixels.astype(np.uint8).tobytes())
    return path


def write_labels(path, labels, magic=IDX_LABELS_MAGIC):
    path.write_bytes(struct.pack(">II", magic, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes())
    return path


@pytest.fixture
def idx_pair(tmp_path):
    pixels = np.arange(3 * 4 * 5).reshape(3, 4, 5) % 256
    pixels[0, 0, 0] = 255
    images = write_images(tmp_path / "images.idx", pixels)
    labels = write_labels(tmp_path / "labels.idx", [7, 0, 3])
    return images, labels


def test_load_idx(idx_pair):
    data = load_idx(*idx_pair, split="test")
    assert data.images.shape == (3, 1, 4, 5)
    assert data.images.dtype == np.float32
    assert data.images[0, 0, 0, 0] == 1.0
    assert data.images[0, 0, 0, 1] == pytest.approx(1 / 255)
    assert data.labels.tolist() == [7, 0, 3]
    assert data.split == "test"
    assert data.num_classes == 8


def test_idx_wrong_magic(tmp_path, idx_pair):
    images, labels = idx_pair
    with pytest.raises(IdxMagicError):
        load_idx(labels, labels)
    bad = write_images(tmp_path / "bad.idx", np.zeros((3, 4, 5)), magic=0x00000900)
    with pytest.raises(IdxMagicError) as excinfo:
        load_idx(bad, labels)
    assert excinfo.value.exit_code == 2


def test_idx_truncated_payload(tmp_path, idx_pair):
    images, labels = idx_pair
    short = tmp_path / "short.idx"
    short.write_bytes(images.read_bytes()[:-1])
    with pytest.raises(IdxTruncatedError):
        load_idx(short, labels)


def test_idx_truncated_header(tmp_path, idx_pair):
    _, labels = idx_pair
    stub = tmp_path / "stub.idx"
    stub.write_bytes(struct.pack(">II", IDX_IMAGES_MAGIC, 3))
    with pytest.raises(IdxTruncatedError):
        load_idx(stub, labels)


def test_idx_count_mismatch(tmp_path, idx_pair):
    images, _ = idx_pair
    labels = write_labels(tmp_path / "four.idx", [1, 2, 3, 4])
    with pytest.raises(IdxCountMismatchError):
        load_idx(images, labels)


# === SYNTHETIC ===

def test_synth_is_balanced_and_in_range():
    data = synth_two_class(50 * 2, 12, seed=4)
    assert data.images.shape == (100, 1, 12, 12)
    assert (data.labels == 0).sum() == 50
    assert data.images.min() >= 0 and data.images.max() <= 1


def test_synth_classes_light_different_halves():
    data = synth_two_class(20, 10, seed=1)
    top = data.images[:, 0, :5].mean(axis=(1, 2))
    bottom = data.images[:, 0, 5:].mean(axis=(1, 2))
    np.testing.assert_array_equal(top > bottom, data.labels == 0)


def test_synth_is_deterministic():
    a, b = synth_two_class(10, 8, seed=9), synth_two_class(10, 8, seed=9)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, synth_two_class(10, 8, seed=10).images)


def test_synth_needs_even_count():
    with pytest.raises(ValueError):
        synth_two_class(7)


def test_split_is_head_and_tail():
    data = synth_two_class(20, 8)
    train, test = split_dataset(data)
    assert (len(train), len(test)) == (15, 5)
    np.testing.assert_array_equal(test.images, data.images[15:])


def test_subset_is_seeded():
    data = synth_two_class(20, 8)
    first, second = data.subset(6, seed=2), data.subset(6, seed=2)
    np.testing.assert_array_equal(first.labels, second.labels)
    assert len(data.subset(None)) == 20
