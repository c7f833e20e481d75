"""
network_service.py - CNNs ending in global average pooling -> dense head

The head structure is what makes CAM exact: logits_c = w^c . mean_i(A_i) + b_c, so the
pre-bias score f_c splits over the spatial cells of the penultimate feature maps.
Also holds the portable checkpoint format (magic "IRC1").
"""

import logging
import struct
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from interprobust.exceptions import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ShapeMismatchError,
)
from interprobust.models import Arch
from interprobust.utils.tensor import (
    BiasAdd,
    Tensor,
    conv2d,
    default_dtype,
    dense,
    global_avg_pool,
    max_pool,
    no_grad,
    relu,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"IRC1"
CHECKPOINT_VERSION = 1
ARCH_TAG_PREFIX = "arch:"


class LayerSpec(NamedTuple):
    kind: str  # "conv" | "relu" | "pool"
    name: str = ""
    filters: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 1


def _conv(name: str, filters: int, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv", name, filters, 3, stride, 1)


RELU = LayerSpec("relu")
POOL = LayerSpec("pool", kernel=2)

# Everything before GAP -> dense
ARCHITECTURES: Dict[Arch, List[LayerSpec]] = {
    # 16, 32, 100 filters; the first two convolutions downsample with stride 2
    Arch.SMALL: [_conv("c1", 16, 2), RELU, _conv("c2", 32, 2), RELU, _conv("c3", 100), RELU],
    # 32 and 64 filters, each followed by 2x2 max-pooling
    Arch.POOL: [_conv("c1", 32), RELU, POOL, _conv("c2", 64), RELU, POOL],
    Arch.TINY: [_conv("c1", 8), RELU],
    # no feature extractor: the input channels are the feature maps
    Arch.LINEAR: [],
}


class NetworkOutput(NamedTuple):
    logits: Tensor  # [N, C], with bias
    scores: Tensor  # [N, C], pre-bias classification scores f_c
    features: Tensor  # [N, K, u] penultimate maps, row-major spatial cells
    feature_maps: Tensor  # [N, K, H, W], the node the head consumes


class Network:
    def __init__(
        self,
        arch: Union[Arch, str],
        input_shape: Sequence[int],
        num_classes: int,
        params: Dict[str, np.ndarray],
    ):
        self.arch = Arch(arch)
        self.input_shape: Tuple[int, int, int] = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        self.layers = ARCHITECTURES[self.arch]
        self.params = params
        self.feature_shape = infer_feature_shape(self.arch, self.input_shape)

    @property
    def feature_channels(self) -> int:
        return self.feature_shape[0]

    @property
    def spatial_units(self) -> int:
        return self.feature_shape[1] * self.feature_shape[2]

    @property
    def head_weight(self) -> np.ndarray:
        return self.params["head.w"]

    @property
    def head_bias(self) -> np.ndarray:
        return self.params["head.b"]

    def with_params(self, params: Dict[str, np.ndarray]) -> "Network":
        return Network(self.arch, self.input_shape, self.num_classes, params)

    def param_tensors(self) -> Dict[str, Tensor]:
        return {name: Tensor(value, requires_grad=True) for name, value in self.params.items()}

    def forward(
        self, batch: Union[Tensor, np.ndarray], params: Optional[Dict[str, Tensor]] = None
    ) -> NetworkOutput:
        """Pass `params` (from param_tensors) to differentiate w.r.t. the weights."""
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeMismatchError("forward", x.shape, ("N",) + self.input_shape)
        p = params if params is not None else {n: Tensor(v) for n, v in self.params.items()}

        h = x
        for layer in self.layers:
            if layer.kind == "conv":
                h = conv2d(h, p[f"{layer.name}.w"], p[f"{layer.name}.b"], layer.stride, layer.padding)
            elif layer.kind == "relu":
                h = relu(h)
            else:
                h = max_pool(h, layer.kernel)

        n, k, fh, fw = h.shape
        scores = dense(global_avg_pool(h), p["head.w"])
        logits = BiasAdd.apply(scores, p["head.b"])
        return NetworkOutput(logits=logits, scores=scores, features=h.reshape(n, k, fh * fw), feature_maps=h)

    def logits(self, batch: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(batch).logits.numpy()

    def predict(self, batch: np.ndarray) -> np.ndarray:
        return self.logits(batch).argmax(axis=1)


def infer_feature_shape(arch: Arch, input_shape: Sequence[int]) -> Tuple[int, int, int]:
    if len(input_shape) != 3 or min(input_shape) < 1:
        raise ShapeMismatchError("build", tuple(input_shape), ("C", "H", "W"))
    c, h, w = input_shape
    for layer in ARCHITECTURES[Arch(arch)]:
        if layer.kind == "conv":
            c = layer.filters
            h = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            w = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
        elif layer.kind == "pool":
            h, w = h // layer.kernel, w // layer.kernel
        if h < 1 or w < 1:
            raise ShapeMismatchError(f"build[{Arch(arch).value}]", tuple(input_shape), (layer.kind, h, w))
    return c, h, w


def build(
    arch: Union[Arch, str], input_shape: Sequence[int], num_classes: int, seed: int = 0
) -> Network:
    """He fan-in normal weights, zero biases; deterministic in seed."""
    arch = Arch(arch)
    infer_feature_shape(arch, input_shape)
    if num_classes < 2:
        raise ValueError("need at least two classes")

    rng = np.random.default_rng(seed)
    dtype = default_dtype()
    params: Dict[str, np.ndarray] = {}
    channels = int(input_shape[0])
    for layer in ARCHITECTURES[arch]:
        if layer.kind != "conv":
            continue
        fan_in = channels * layer.kernel * layer.kernel
        shape = (layer.filters, channels, layer.kernel, layer.kernel)
        params[f"{layer.name}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
        params[f"{layer.name}.b"] = np.zeros(layer.filters, dtype=dtype)
        channels = layer.filters

    params["head.w"] = rng.normal(0.0, np.sqrt(2.0 / channels), size=(num_classes, channels)).astype(dtype)
    params["head.b"] = np.zeros(num_classes, dtype=dtype)
    net = Network(arch, input_shape, num_classes, params)
    logger.debug(f"built {arch.value}: K={net.feature_channels}, u={net.spatial_units}")
    return net


# =====================================================
# === CHECKPOINTS ===
# =====================================================

def _tensor_record(name: str, array: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    dims = array.shape
    return b"".join(
        [
            struct.pack("<I", len(encoded)),
            encoded,
            struct.pack("<I", len(dims)),
            struct.pack(f"<{len(dims)}Q", *dims),
            np.ascontiguousarray(array, dtype="<f4").tobytes(),
        ]
    )


def save(net: Network, path: Union[str, Path]) -> None:
    tag = np.array([*net.input_shape, net.num_classes], dtype=np.float32)
    records = [(f"{ARCH_TAG_PREFIX}{net.arch.value}", tag), *net.params.items()]
    payload = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(records))]
    payload += [_tensor_record(name, array) for name, array in records]
    Path(path).write_bytes(b"".join(payload))
    logger.info(f"checkpoint saved: {path}")


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(self.blob)} (needed {self.pos + n})")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path: Union[str, Path]) -> Network:
    reader = _Reader(Path(path).read_bytes())
    if len(reader.blob) < 4 or reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"{path}: not an IRC1 checkpoint")
    version, count = reader.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")

    arch_tag: Optional[Tuple[str, np.ndarray]] = None
    params: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<I")
        dims = reader.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(reader.take(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
        if name.startswith(ARCH_TAG_PREFIX):
            arch_tag = (name[len(ARCH_TAG_PREFIX) :], data)
        else:
            params[name] = data

    if arch_tag is None:
        raise CheckpointError(f"{path}: missing architecture tag")
    arch_name, tag = arch_tag
    if arch_name not in {a.value for a in Arch}:
        raise CheckpointError(f"{path}: unknown architecture {arch_name!r}")
    c, h, w, num_classes = (int(v) for v in tag)
    expected = build(arch_name, (c, h, w), num_classes).params
    for name, value in expected.items():
        if name not in params or params[name].shape != value.shape:
            raise CheckpointError(f"{path}: parameter {name} missing or mis-shaped")
    return Network(arch_name, (c, h, w), num_classes, {name: params[name] for name in expected})
