"""
interpret_service.py - Interpretation maps: CAM, GradCAM, GradCAM++, IG and Repr

Class scores here are the pre-bias scores f_c, so that CAM sums exactly to f_c(x).
Maps are left signed and at feature resolution (u cells); up-sampling is for display only.
"""

import logging
from typing import Optional, Tuple

import numpy as np

from interprobust.exceptions import InterpretationError, ShapeMismatchError
from interprobust.models import InterpMap, InterpreterKind
from interprobust.services.network_service import Network, NetworkOutput
from interprobust.utils.tensor import Tensor, backward, einsum, no_grad, pick

logger = logging.getLogger(__name__)

IG_STEPS_TRAINING = 5
IG_STEPS_EVAL = 32


def as_batch(net: Network, x: np.ndarray) -> np.ndarray:
    """[C,H,W] or [1,C,H,W] -> [1,C,H,W]"""
    x = np.asarray(x)
    if x.shape == net.input_shape:
        x = x[None]
    if x.shape != (1,) + net.input_shape:
        raise ShapeMismatchError("interpret", x.shape, net.input_shape)
    return x


def check_class(net: Network, c: int) -> int:
    if not 0 <= int(c) < net.num_classes:
        raise InterpretationError(f"class {c} outside [0, {net.num_classes})")
    return int(c)


def class_maps(features: Tensor, head_weight: Tensor) -> Tensor:
    """CAM of every class: [N, K, u] x [C, K] -> [N, C, u], values (1/u) sum_k w_k^c A_k,i"""
    u = features.shape[2]
    return einsum("ck,nki->nci", head_weight, features) * (1.0 / u)


def cam_maps(net: Network, batch, params=None) -> Tuple[NetworkOutput, Tensor]:
    """Differentiable CAMs for a batch (w.r.t. the input and, given params, the weights)."""
    out = net.forward(batch, params)
    head = params["head.w"] if params is not None else Tensor(net.head_weight)
    return out, class_maps(out.features, head)


def cam(net: Network, x: np.ndarray, c: int) -> InterpMap:
    c = check_class(net, c)
    with no_grad():
        _, maps = cam_maps(net, as_batch(net, x))
    return InterpMap(values=maps.numpy()[0, c].copy(), kind=InterpreterKind.CAM, class_label=c)


def _feature_gradients(net: Network, x: np.ndarray, c: int) -> Tuple[np.ndarray, np.ndarray]:
    """(A, d f_c / d A), both [K, u]"""
    xb = Tensor(as_batch(net, x), requires_grad=True)
    out = net.forward(xb)
    (grad,) = backward(pick(out.scores, [c]).sum(), [out.feature_maps])
    k, u = net.feature_channels, net.spatial_units
    return out.features.numpy()[0], grad[0].reshape(k, u)


def gradcam(net: Network, x: np.ndarray, c: int) -> InterpMap:
    c = check_class(net, c)
    features, grads = _feature_gradients(net, x, c)
    # gradient w.r.t. the pooled feature; equals w_k^c under a GAP -> dense head
    alpha = grads.sum(axis=1, dtype=np.float64)
    values = (alpha @ features.astype(np.float64)) / net.spatial_units
    return InterpMap(values=values.astype(features.dtype), kind=InterpreterKind.GRADCAM, class_label=c)


def gradcampp_weights(features: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Channel weights sum_i alpha_k,i relu(g_k,i), alpha = g^2 / (2 g^2 + sum(A_k) g^3)."""
    g = grads.astype(np.float64)
    g2, g3 = g * g, g * g * g
    totals = features.astype(np.float64).sum(axis=1, keepdims=True)
    denom = 2 * g2 + totals * g3
    alpha = np.where((g != 0) & (denom != 0), g2 / np.where(denom != 0, denom, 1), 0.0)
    return (alpha * np.maximum(g, 0)).sum(axis=1)


def gradcampp(net: Network, x: np.ndarray, c: int) -> InterpMap:
    c = check_class(net, c)
    features, grads = _feature_gradients(net, x, c)
    weights = gradcampp_weights(features, grads)
    values = (weights @ features.astype(np.float64)) / net.spatial_units
    return InterpMap(values=values.astype(features.dtype), kind=InterpreterKind.GRADCAMPP, class_label=c)


def ig(
    net: Network,
    x: np.ndarray,
    c: int,
    baseline: Optional[np.ndarray] = None,
    steps: int = IG_STEPS_EVAL,
) -> InterpMap:
    """Right-endpoint Riemann sum: (x - a) * (1/m) sum_j grad f_c(a + (j/m)(x - a))."""
    c = check_class(net, c)
    if steps < 1:
        raise InterpretationError(f"IG needs at least one step, got {steps}")
    x = as_batch(net, x)[0]
    a = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=x.dtype)
    if a.shape != x.shape:
        raise ShapeMismatchError("ig", x.shape, a.shape)

    fractions = (np.arange(1, steps + 1, dtype=np.float64) / steps).reshape(-1, 1, 1, 1)
    path = Tensor((a + fractions * (x - a)).astype(x.dtype), requires_grad=True)
    out = net.forward(path)
    (grads,) = backward(pick(out.scores, [c] * steps).sum(), [path])
    values = (x - a).astype(np.float64) * grads.mean(axis=0, dtype=np.float64)
    return InterpMap(values=values.reshape(-1).astype(x.dtype), kind=InterpreterKind.IG, class_label=c)


def ig_completeness_residual(
    net: Network, x: np.ndarray, c: int, baseline: Optional[np.ndarray] = None, steps: int = IG_STEPS_EVAL
) -> float:
    """|sum IG - (f_c(x) - f_c(a))|"""
    x = as_batch(net, x)[0]
    a = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=x.dtype)
    with no_grad():
        scores = net.forward(np.stack([x, a])).scores.numpy().astype(np.float64)
    total = ig(net, x, c, a, steps).values.sum(dtype=np.float64)
    return float(abs(total - (scores[0, c] - scores[1, c])))


def repr_map(net: Network, x: np.ndarray) -> InterpMap:
    """Penultimate feature maps, flattened row-major (K * u); class-independent."""
    with no_grad():
        out = net.forward(as_batch(net, x))
    return InterpMap(values=out.features.numpy()[0].reshape(-1).copy(), kind=InterpreterKind.REPR)


def interpret(
    net: Network, x: np.ndarray, kind: InterpreterKind, c: Optional[int] = None, ig_steps: int = IG_STEPS_EVAL
) -> InterpMap:
    kind = InterpreterKind(kind)
    if kind == InterpreterKind.REPR:
        return repr_map(net, x)
    if c is None:
        raise InterpretationError(f"{kind.value} needs a class label")
    if kind == InterpreterKind.CAM:
        return cam(net, x, c)
    if kind == InterpreterKind.GRADCAM:
        return gradcam(net, x, c)
    if kind == InterpreterKind.GRADCAMPP:
        return gradcampp(net, x, c)
    return ig(net, x, c, steps=ig_steps)


def to_grid(net: Network, interp: InterpMap) -> np.ndarray:
    """Reshape a map to its 2-D layout (feature grid, or the input image for IG)."""
    if interp.kind == InterpreterKind.IG:
        return interp.values.reshape(net.input_shape).sum(axis=0)
    if interp.kind == InterpreterKind.REPR:
        return interp.values.reshape(net.feature_channels * net.feature_shape[1], net.feature_shape[2])
    return interp.values.reshape(net.feature_shape[1:])
