import struct
import tempfile
from pathlib import Path

import hypothesis as h
import hypothesis.strategies as st
import numpy as np
import pytest

from interprobust.exceptions import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ShapeMismatchError,
)
from interprobust.models import Arch
from interprobust.services import network_service
from interprobust.services.network_service import CHECKPOINT_MAGIC, build, infer_feature_shape, load, save


@pytest.mark.parametrize(
    "arch,expected",
    [
        (Arch.SMALL, (100, 7, 7)),
        (Arch.POOL, (64, 7, 7)),
        (Arch.TINY, (8, 28, 28)),
        (Arch.LINEAR, (1, 28, 28)),
    ],
)
def test_feature_shapes_on_mnist_input(arch, expected):
    assert infer_feature_shape(arch, (1, 28, 28)) == expected


def test_forward_shapes(small_net, rng):
    out = small_net.forward(rng.uniform(0, 1, size=(3, 1, 28, 28)))
    assert out.logits.shape == (3, 10)
    assert out.scores.shape == (3, 10)
    assert out.features.shape == (3, 100, 49)
    assert out.feature_maps.shape == (3, 100, 7, 7)
    assert small_net.spatial_units == 49


def test_too_small_input_is_rejected():
    with pytest.raises(ShapeMismatchError):
        infer_feature_shape(Arch.POOL, (1, 2, 2))
    with pytest.raises(ShapeMismatchError):
        build(Arch.SMALL, (28, 28), 10)


def test_forward_rejects_wrong_input_shape(tiny_net):
    with pytest.raises(ShapeMismatchError):
        tiny_net.forward(np.zeros((1, 1, 9, 9)))


def test_build_is_deterministic():
    a = build(Arch.POOL, (1, 12, 12), 4, seed=7)
    b = build(Arch.POOL, (1, 12, 12), 4, seed=7)
    c = build(Arch.POOL, (1, 12, 12), 4, seed=8)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
    assert not np.array_equal(a.params["c1.w"], c.params["c1.w"])


def test_logits_are_scores_plus_bias(tiny_net, rng):
    params = dict(tiny_net.params)
    params["head.b"] = np.array([0.5, -1.0, 2.0], dtype=np.float32)
    net = tiny_net.with_params(params)
    out = net.forward(rng.uniform(0, 1, size=(2, 1, 8, 8)))
    np.testing.assert_allclose(out.logits.numpy(), out.scores.numpy() + params["head.b"], rtol=1e-6)


# === CHECKPOINTS ===

def test_checkpoint_round_trip(tmp_path, small_net):
    path = tmp_path / "model.irc"
    save(small_net, path)
    restored = load(path)
    assert restored.arch == Arch.SMALL
    assert restored.input_shape == (1, 28, 28)
    assert restored.num_classes == 10
    assert set(restored.params) == set(small_net.params)
    for name, value in small_net.params.items():
        np.testing.assert_array_equal(restored.params[name], value)


@h.settings(max_examples=15, deadline=None)
@h.given(
    arch=st.sampled_from([Arch.TINY, Arch.LINEAR]),
    height=st.integers(3, 10),
    width=st.integers(3, 10),
    classes=st.integers(2, 5),
    seed=st.integers(0, 2**16),
)
def test_checkpoint_round_trip_any_shape(arch, height, width, classes, seed):
    net = build(arch, (1, height, width), classes, seed=seed)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "net.irc"
        save(net, path)
        first = path.read_bytes()
        restored = load(path)
        save(restored, path)
        assert path.read_bytes() == first
    assert restored.input_shape == net.input_shape


def test_checkpoint_bad_magic(tmp_path, tiny_net):
    path = tmp_path / "bad.irc"
    save(tiny_net, path)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(CheckpointMagicError):
        load(path)


def test_checkpoint_bad_version(tmp_path):
    path = tmp_path / "v2.irc"
    path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<II", 2, 0))
    with pytest.raises(CheckpointVersionError):
        load(path)


def test_checkpoint_truncated(tmp_path, tiny_net):
    path = tmp_path / "short.irc"
    save(tiny_net, path)
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(CheckpointTruncatedError):
        load(path)


def test_checkpoint_missing_parameter(tmp_path, tiny_net):
    params = {k: v for k, v in tiny_net.params.items() if k != "c1.b"}
    path = tmp_path / "partial.irc"
    save(network_service.Network(Arch.TINY, (1, 8, 8), 3, params), path)
    with pytest.raises(CheckpointError):
        load(path)


def test_checkpoint_errors_exit_with_io_code():
    assert CheckpointMagicError("x").exit_code == 2
