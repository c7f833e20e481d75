"""
tensor.py - Minimal reverse-mode automatic differentiation over numpy arrays

Tensors are NCHW, row-major, float32 by default. Every differentiable operation is a
Function with a forward over raw arrays and a backward that maps the output gradient to
one gradient per input. Graph orders the recorded operations topologically and runs the
backward pass for any set of tensors in it (leaves or intermediates such as feature maps).

Sub-gradient conventions: ReLU'(0) = 0, sign(0) = 0, max-pool and masked max route the
gradient to the first (row-major) maximal element.
"""

import contextlib
import logging
import threading
from typing import Any, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from interprobust.exceptions import GradientError, ShapeMismatchError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]


class _Mode(threading.local):
    dtype = np.float32
    grad_enabled = True


_mode = _Mode()


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Run the engine in another float type on this thread (float64 for gradient checks)."""
    previous = _mode.dtype
    _mode.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _mode.dtype = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    previous = _mode.grad_enabled
    _mode.grad_enabled = False
    try:
        yield
    finally:
        _mode.grad_enabled = previous


def default_dtype():
    return _mode.dtype


def _sum64(x: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    # 64-bit accumulation, result in the input dtype
    return np.asarray(np.sum(x, axis=axis, dtype=np.float64, keepdims=keepdims)).astype(x.dtype)


class Tensor:
    """Immutable n-dimensional float array; carries the Function that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "_fn", "_parents")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        _fn: Optional["Function"] = None,
        _parents: Tuple["Tensor", ...] = (),
    ):
        self.data = np.asarray(data, dtype=_mode.dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._fn = _fn
        self._parents = _parents

    # --- introspection ---

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def op(self) -> str:
        return self._fn.name if self._fn is not None else "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError("item", self.shape, ())
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # --- autodiff ---

    def backward(self, grad_output: Optional[np.ndarray] = None) -> None:
        """Populate .grad on every leaf that requires it."""
        graph = Graph(self)
        leaves = [n for n in graph.nodes if n._fn is None and n.requires_grad]
        for leaf, g in zip(leaves, graph.backward(leaves, grad_output)):
            leaf.grad = g

    # --- operators ---

    def __add__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return Add.apply(self, other)
        return AddScalar.apply(self, value=float(other))

    __radd__ = __add__

    def __sub__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return Sub.apply(self, other)
        return AddScalar.apply(self, value=-float(other))

    def __rsub__(self, other: float) -> "Tensor":
        return AddScalar.apply(Scale.apply(self, factor=-1.0), value=float(other))

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return Mul.apply(self, other)
        return Scale.apply(self, factor=float(other))

    __rmul__ = __mul__

    def __truediv__(self, other: float) -> "Tensor":
        return Scale.apply(self, factor=1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return Scale.apply(self, factor=-1.0)

    def sum(self, axis=None) -> "Tensor":
        return Sum.apply(self, axis=axis)

    def mean(self, axis=None) -> "Tensor":
        return Mean.apply(self, axis=axis)

    def reshape(self, *shape: int) -> "Tensor":
        return Reshape.apply(self, shape=shape)

    def abs(self) -> "Tensor":
        return Abs.apply(self)

    def square(self) -> "Tensor":
        return Square.apply(self)

    def sqrt(self) -> "Tensor":
        return Sqrt.apply(self)

    def relu(self) -> "Tensor":
        return ReLU.apply(self)


def tensor(data: ArrayLike, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


class Function:
    """One recorded operation: forward over arrays, backward to per-input gradients."""

    name = "op"

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        fn = cls()
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        record = _mode.grad_enabled and any(t.requires_grad for t in inputs)
        if not record:
            return Tensor(out)
        return Tensor(out, requires_grad=True, _fn=fn, _parents=inputs)


class Graph:
    """Operations reachable from `output`, every node after its inputs."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))

    def records(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """(op kind, input node ids) per node."""
        index = {id(n): i for i, n in enumerate(self.nodes)}
        return [(n.op, tuple(index[id(p)] for p in n._parents)) for n in self.nodes]

    def backward(
        self, wrt: Sequence[Tensor], grad_output: Optional[np.ndarray] = None
    ) -> List[np.ndarray]:
        out = self.output
        if grad_output is None:
            if out.data.size != 1:
                raise GradientError(
                    f"gradient of non-scalar output {out.shape} needs a reduction or grad_output"
                )
            grad_output = np.ones_like(out.data)
        elif grad_output.shape != out.shape:
            raise ShapeMismatchError("backward", grad_output.shape, out.shape)

        grads = {id(out): np.asarray(grad_output, dtype=out.data.dtype)}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._fn is None:
                continue
            for parent, pg in zip(node._parents, node._fn.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


def backward(
    output: Tensor, wrt: Sequence[Tensor], grad_output: Optional[np.ndarray] = None
) -> List[np.ndarray]:
    """Gradients of `output` (scalar, or reduced by grad_output) w.r.t. each tensor in wrt."""
    return Graph(output).backward(wrt, grad_output)


def _same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(op, a.shape, b.shape)


# =====================================================
# === ELEMENTWISE ===
# =====================================================

class Add(Function):
    name = "add"

    def forward(self, a, b):
        _same_shape(self.name, a, b)
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _same_shape(self.name, a, b)
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _same_shape(self.name, a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Scale(Function):
    name = "scale"

    def forward(self, a, factor: float = 1.0):
        self.factor = factor
        return a * a.dtype.type(factor)

    def backward(self, grad):
        return (grad * grad.dtype.type(self.factor),)


class AddScalar(Function):
    name = "add_scalar"

    def forward(self, a, value: float = 0.0):
        return a + a.dtype.type(value)

    def backward(self, grad):
        return (grad,)


class ReLU(Function):
    name = "relu"

    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0).astype(a.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


class Abs(Function):
    name = "abs"

    def forward(self, a):
        self.sign = np.sign(a)
        return np.abs(a)

    def backward(self, grad):
        return (grad * self.sign,)


class Square(Function):
    name = "square"

    def forward(self, a):
        self.a = a
        return a * a

    def backward(self, grad):
        return (grad * 2 * self.a,)


class Sqrt(Function):
    name = "sqrt"

    def forward(self, a):
        self.out = np.sqrt(np.maximum(a, 0))
        return self.out

    def backward(self, grad):
        safe = np.where(self.out > 0, self.out, 1)
        return (np.where(self.out > 0, grad / (2 * safe), 0).astype(grad.dtype),)


class ClampMin(Function):
    """max(a, floor); gradient passes only where a > floor."""

    name = "clamp_min"

    def forward(self, a, floor: float = 0.0):
        self.mask = a > floor
        return np.where(self.mask, a, a.dtype.type(floor)).astype(a.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


# =====================================================
# === SHAPE / REDUCTIONS ===
# =====================================================

class Reshape(Function):
    name = "reshape"

    def forward(self, a, shape=()):
        self.in_shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeMismatchError(self.name, a.shape, shape) from None

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Sum(Function):
    name = "sum"

    def forward(self, a, axis=None):
        self.in_shape, self.axis = a.shape, axis
        return _sum64(a, axis=axis)

    def backward(self, grad):
        g = grad if self.axis is None else np.expand_dims(grad, self.axis)
        return (np.broadcast_to(g, self.in_shape).copy(),)


class Mean(Function):
    name = "mean"

    def forward(self, a, axis=None):
        self.in_shape, self.axis = a.shape, axis
        self.count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
        return np.asarray(np.mean(a, axis=axis, dtype=np.float64)).astype(a.dtype)

    def backward(self, grad):
        g = grad if self.axis is None else np.expand_dims(grad, self.axis)
        return ((np.broadcast_to(g, self.in_shape) / self.count).astype(grad.dtype),)


class Pick(Function):
    """x[n, index[n], ...] for a batch of per-example indices."""

    name = "pick"

    def forward(self, a, index=None):
        index = np.asarray(index, dtype=np.int64)
        if a.ndim < 2 or index.shape != (a.shape[0],):
            raise ShapeMismatchError(self.name, a.shape, index.shape)
        self.in_shape, self.index = a.shape, index
        return a[np.arange(a.shape[0]), index]

    def backward(self, grad):
        g = np.zeros(self.in_shape, dtype=grad.dtype)
        g[np.arange(self.in_shape[0]), self.index] = grad
        return (g,)


class MaxExcluding(Function):
    """Row-wise max over the last axis of [N, C] skipping column exclude[n]."""

    name = "max_excluding"

    def forward(self, a, exclude=None):
        exclude = np.asarray(exclude, dtype=np.int64)
        if a.ndim != 2 or exclude.shape != (a.shape[0],) or a.shape[1] < 2:
            raise ShapeMismatchError(self.name, a.shape, exclude.shape)
        masked = a.astype(np.float64)
        masked[np.arange(a.shape[0]), exclude] = -np.inf
        self.in_shape = a.shape
        self.arg = masked.argmax(axis=1)
        return a[np.arange(a.shape[0]), self.arg]

    def backward(self, grad):
        g = np.zeros(self.in_shape, dtype=grad.dtype)
        g[np.arange(self.in_shape[0]), self.arg] = grad
        return (g,)


# =====================================================
# === LAYERS ===
# =====================================================

class BiasAdd(Function):
    """x + b along axis 1 (the only broadcast the engine allows)."""

    name = "bias_add"

    def forward(self, x, b):
        if x.ndim < 2 or b.shape != (x.shape[1],):
            raise ShapeMismatchError(self.name, x.shape, b.shape)
        self.axes = tuple(i for i in range(x.ndim) if i != 1)
        return x + b.reshape((1, -1) + (1,) * (x.ndim - 2))

    def backward(self, grad):
        return grad, _sum64(grad, axis=self.axes)


class Dense(Function):
    """x [N, in] @ W[out, in]^T"""

    name = "dense"

    def forward(self, x, w):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ShapeMismatchError(self.name, x.shape, w.shape)
        self.x, self.w = x, w
        return x @ w.T

    def backward(self, grad):
        return grad @ self.w, grad.T @ self.x


class Einsum(Function):
    """Two-operand einsum; every index of an operand must appear in the output or the other operand."""

    name = "einsum"

    def forward(self, a, b, subscripts: str = ""):
        inputs, self.so = subscripts.replace(" ", "").split("->")
        self.sa, self.sb = inputs.split(",")
        self.a, self.b = a, b
        try:
            return np.einsum(subscripts, a, b, optimize=True)
        except ValueError:
            raise ShapeMismatchError(f"einsum[{subscripts}]", a.shape, b.shape) from None

    def backward(self, grad):
        ga = np.einsum(f"{self.so},{self.sb}->{self.sa}", grad, self.b, optimize=True)
        gb = np.einsum(f"{self.so},{self.sa}->{self.sb}", grad, self.a, optimize=True)
        return ga, gb


class Conv2d(Function):
    """Cross-correlation with zero padding; x [N,C,H,W], w [F,C,kh,kw]."""

    name = "conv2d"

    def forward(self, x, w, stride: int = 1, padding: int = 0):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeMismatchError(self.name, x.shape, w.shape)
        n, _, h, wd = x.shape
        f, _, kh, kw = w.shape
        ho = (h + 2 * padding - kh) // stride + 1
        wo = (wd + 2 * padding - kw) // stride + 1
        if ho < 1 or wo < 1:
            raise ShapeMismatchError(self.name, x.shape, w.shape)
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        self.xp, self.w = xp, w
        self.stride, self.padding, self.in_shape = stride, padding, x.shape
        self.out_hw = (ho, wo)

        out = np.zeros((n, f, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                out += np.einsum("nchw,fc->nfhw", self._window(xp, i, j), w[:, :, i, j], optimize=True)
        return out

    def _window(self, xp, i, j):
        ho, wo = self.out_hw
        s = self.stride
        return xp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s]

    def backward(self, grad):
        ho, wo = self.out_hw
        s, p = self.stride, self.padding
        _, _, kh, kw = self.w.shape
        gxp = np.zeros_like(self.xp)
        gw = np.zeros_like(self.w)
        for i in range(kh):
            for j in range(kw):
                gw[:, :, i, j] = np.einsum("nfhw,nchw->fc", grad, self._window(self.xp, i, j), optimize=True)
                gxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += np.einsum(
                    "nfhw,fc->nchw", grad, self.w[:, :, i, j], optimize=True
                )
        h, wd = self.in_shape[2:]
        return gxp[:, :, p : p + h, p : p + wd], gw


class MaxPool2d(Function):
    """Non-overlapping size x size pooling; trailing rows/cols that do not fill a window are dropped."""

    name = "max_pool"

    def forward(self, x, size: int = 2):
        if x.ndim != 4 or x.shape[2] < size or x.shape[3] < size:
            raise ShapeMismatchError(self.name, x.shape, (size, size))
        n, c, h, w = x.shape
        ho, wo = h // size, w // size
        windows = (
            x[:, :, : ho * size, : wo * size]
            .reshape(n, c, ho, size, wo, size)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, ho, wo, size * size)
        )
        self.arg = windows.argmax(axis=-1)
        self.in_shape, self.size = x.shape, size
        return np.take_along_axis(windows, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n, c, h, w = self.in_shape
        k = self.size
        ho, wo = grad.shape[2:]
        gw = np.zeros((n, c, ho, wo, k * k), dtype=grad.dtype)
        np.put_along_axis(gw, self.arg[..., None], grad[..., None], axis=-1)
        gx = np.zeros(self.in_shape, dtype=grad.dtype)
        gx[:, :, : ho * k, : wo * k] = (
            gw.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        )
        return (gx,)


class GlobalAvgPool(Function):
    """[N, K, H, W] -> [N, K]"""

    name = "global_avg_pool"

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeMismatchError(self.name, x.shape, ("N", "K", "H", "W"))
        self.in_shape = x.shape
        return np.asarray(np.mean(x, axis=(2, 3), dtype=np.float64)).astype(x.dtype)

    def backward(self, grad):
        u = self.in_shape[2] * self.in_shape[3]
        return ((np.broadcast_to(grad[:, :, None, None], self.in_shape) / u).astype(grad.dtype),)


class Softmax(Function):
    name = "softmax"

    def forward(self, a):
        if a.ndim != 2:
            raise ShapeMismatchError(self.name, a.shape, ("N", "C"))
        z = np.exp(a - a.max(axis=1, keepdims=True))
        self.out = z / _sum64(z, axis=1, keepdims=True)
        return self.out

    def backward(self, grad):
        inner = _sum64(grad * self.out, axis=1, keepdims=True)
        return (self.out * (grad - inner),)


class CrossEntropy(Function):
    """Softmax cross-entropy of logits [N, C] against integer labels; mean or sum over N."""

    name = "cross_entropy"

    def forward(self, logits, labels=None, reduction: str = "mean"):
        labels = np.asarray(labels, dtype=np.int64)
        if logits.ndim != 2 or labels.shape != (logits.shape[0],):
            raise ShapeMismatchError(self.name, logits.shape, labels.shape)
        z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
        log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        rows = np.arange(logits.shape[0])
        self.labels, self.reduction = labels, reduction
        self.probs = np.exp(log_probs).astype(logits.dtype)
        losses = -log_probs[rows, labels]
        total = losses.mean() if reduction == "mean" else losses.sum()
        return np.asarray(total).astype(logits.dtype)

    def backward(self, grad):
        d = self.probs.copy()
        n = d.shape[0]
        d[np.arange(n), self.labels] -= 1
        scale = grad / n if self.reduction == "mean" else grad
        return (d * scale,)


# =====================================================
# === FUNCTIONAL HELPERS ===
# =====================================================

def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    out = Conv2d.apply(x, w, stride=stride, padding=padding)
    return BiasAdd.apply(out, b) if b is not None else out


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    out = Dense.apply(x, w)
    return BiasAdd.apply(out, b) if b is not None else out


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def max_pool(x: Tensor, size: int = 2) -> Tensor:
    return MaxPool2d.apply(x, size=size)


def global_avg_pool(x: Tensor) -> Tensor:
    return GlobalAvgPool.apply(x)


def softmax(x: Tensor) -> Tensor:
    return Softmax.apply(x)


def cross_entropy(logits: Tensor, labels: ArrayLike, reduction: str = "mean") -> Tensor:
    return CrossEntropy.apply(logits, labels=labels, reduction=reduction)


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    return Einsum.apply(a, b, subscripts=subscripts)


def pick(x: Tensor, index: ArrayLike) -> Tensor:
    return Pick.apply(x, index=index)


def max_excluding(x: Tensor, exclude: ArrayLike) -> Tensor:
    return MaxExcluding.apply(x, exclude=exclude)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    return ClampMin.apply(x, floor=floor)


def l1_distance(a: Tensor, b: Tensor, axis=None) -> Tensor:
    return (a - b).abs().sum(axis=axis)


def l2_distance(a: Tensor, b: Tensor, axis=None) -> Tensor:
    return (a - b).square().sum(axis=axis).sqrt()
