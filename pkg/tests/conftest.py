import os

import numpy as np
import pytest

from interprobust.config import settings
from interprobust.models import Arch
from interprobust.services import data_service, network_service
from interprobust.services.network_service import Network

SYNTH_SIZE = 8


def pytest_collection_modifyitems(config, items):
    if os.environ.get("INTERP_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set INTERP_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def quiet(monkeypatch):
    monkeypatch.setattr(settings, "SHOW_PROGRESS", False)
    monkeypatch.setattr(settings, "THREADS", 2)


def linear_net(weights, bias=None, shape=(1, 4, 4)) -> Network:
    """Linear arch: logits_c = w_c * mean(x) + b_c (one input channel)."""
    w = np.asarray(weights, dtype=np.float32).reshape(-1, shape[0])
    b = np.zeros(len(w), dtype=np.float32) if bias is None else np.asarray(bias, dtype=np.float32)
    return Network(Arch.LINEAR, shape, len(w), {"head.w": w, "head.b": b})


def with_random_biases(net: Network, seed: int = 0, scale: float = 0.3) -> Network:
    rng = np.random.default_rng(seed)
    params = {
        name: (rng.normal(0, scale, size=v.shape).astype(v.dtype) if name.endswith(".b") else v)
        for name, v in net.params.items()
    }
    return net.with_params(params)


@pytest.fixture
def tiny_net():
    """One conv, three classes, 8x8 inputs."""
    return network_service.build(Arch.TINY, (1, 8, 8), 3, seed=0)


@pytest.fixture
def small_net():
    return network_service.build(Arch.SMALL, (1, 28, 28), 10, seed=0)


@pytest.fixture
def synth():
    return data_service.synth_two_class(40, SYNTH_SIZE, seed=0)


@pytest.fixture
def synth_net():
    return network_service.build(Arch.TINY, (1, SYNTH_SIZE, SYNTH_SIZE), 2, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, shape=(1, 8, 8)) -> np.ndarray:
    return rng.uniform(0, 1, size=shape).astype(np.float32)
