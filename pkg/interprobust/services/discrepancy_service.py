"""
discrepancy_service.py - Interpretation discrepancy measures and their evaluation metrics

Two layers:
  * evaluation on single examples (numpy, any interpreter): generic_discrepancy,
    two_class_l1, softmax_weighted_discrepancy, check_prop1, nds, nsl, kendall_tau;
  * differentiable batch versions over CAM tensors, used inside attacks and training.
"""

import logging
from typing import Callable, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy.stats import kendalltau

from interprobust.exceptions import DiscrepancyError, ShapeMismatchError
from interprobust.models import BoundCheck, ClassSet, DiscrepancySpec, InterpMap, InterpreterKind, Norm
from interprobust.services.interpret_service import as_batch, interpret
from interprobust.services.network_service import Network
from interprobust.utils.tensor import Tensor, l1_distance, l2_distance, pick, softmax

logger = logging.getLogger(__name__)

BOUND_TOLERANCE = 1e-5
COMPLETE_INTERPRETERS = {
    InterpreterKind.CAM,
    InterpreterKind.GRADCAM,
    InterpreterKind.GRADCAMPP,
    InterpreterKind.IG,
}


class NdsScore(NamedTuple):
    value: float
    degenerate: int  # class terms whose benign map had zero range


class RankCorrelation(NamedTuple):
    tau: float
    degenerate: bool


def _norm(diff: np.ndarray, norm: Norm) -> float:
    diff = diff.astype(np.float64)
    return float(np.abs(diff).sum() if norm == Norm.L1 else np.sqrt((diff * diff).sum()))


def _check_pair(net: Network, x: np.ndarray, x_prime: np.ndarray) -> None:
    if np.shape(x) != np.shape(x_prime):
        raise ShapeMismatchError("discrepancy", np.shape(x), np.shape(x_prime))
    as_batch(net, x)


def classes_of(spec: DiscrepancySpec, net: Network) -> List[int]:
    if spec.class_set == ClassSet.ALL_CLASS:
        return list(range(net.num_classes))
    if spec.y is None:
        raise DiscrepancyError(f"{spec.class_set.value} needs the true label y (use spec.bind)")
    if spec.class_set == ClassSet.ONE_CLASS:
        return [spec.y]
    if spec.y_prime is None or spec.y_prime == spec.y:
        raise DiscrepancyError("TwoClass needs a second label y' != y")
    return [spec.y, spec.y_prime]


def _map(net: Network, x: np.ndarray, spec: DiscrepancySpec, c: Optional[int]) -> np.ndarray:
    return interpret(net, x, spec.interpreter, c, ig_steps=spec.ig_steps).values


def _repr_allowed(spec: DiscrepancySpec) -> None:
    # Repr is class-free: only the two-class column evaluates it, once, with |C| = 1
    if spec.class_set != ClassSet.TWO_CLASS:
        raise DiscrepancyError(f"Repr cannot be combined with class set {spec.class_set.value}")


def generic_discrepancy(spec: DiscrepancySpec, net: Network, x: np.ndarray, x_prime: np.ndarray) -> float:
    """(1/|C|) sum_{i in C} ||I(x, i) - I(x', i)||_p"""
    _check_pair(net, x, x_prime)
    if spec.class_set == ClassSet.SOFTMAX_WEIGHTED:
        if spec.y is None:
            raise DiscrepancyError("SoftmaxWeighted needs the true label y")
        return softmax_weighted_discrepancy(net, x, x_prime, spec.y, spec.interpreter, spec.norm, spec.ig_steps)
    if spec.interpreter == InterpreterKind.REPR:
        _repr_allowed(spec)
        return _norm(_map(net, x, spec, None) - _map(net, x_prime, spec, None), spec.norm)

    classes = classes_of(spec, net)
    terms = [_norm(_map(net, x, spec, c) - _map(net, x_prime, spec, c), spec.norm) for c in classes]
    return float(np.mean(terms))


def two_class_l1(
    net: Network,
    x: np.ndarray,
    x_prime: np.ndarray,
    y: int,
    y_prime: int,
    interpreter: InterpreterKind = InterpreterKind.CAM,
    ig_steps: int = 32,
) -> float:
    if y == y_prime:
        raise DiscrepancyError("two-class discrepancy needs y != y'")
    spec = DiscrepancySpec(class_set=ClassSet.TWO_CLASS, norm=Norm.L1, interpreter=interpreter, ig_steps=ig_steps)
    return generic_discrepancy(spec.bind(y, y_prime), net, x, x_prime)


def softmax_weighted_discrepancy(
    net: Network,
    x: np.ndarray,
    x_prime: np.ndarray,
    y: int,
    interpreter: InterpreterKind = InterpreterKind.CAM,
    norm: Norm = Norm.L1,
    ig_steps: int = 32,
) -> float:
    """1/2 ||dI_y|| + 1/2 sum_{i != y} softmax(f(x'))_i ||dI_i||; not symmetric in (x, x')."""
    if interpreter not in COMPLETE_INTERPRETERS:
        raise DiscrepancyError(f"{InterpreterKind(interpreter).value} does not satisfy completeness")
    _check_pair(net, x, x_prime)
    spec = DiscrepancySpec(class_set=ClassSet.ALL_CLASS, norm=norm, interpreter=interpreter, ig_steps=ig_steps)
    logits = net.logits(as_batch(net, x_prime))[0].astype(np.float64)
    weights = np.exp(logits - logits.max())
    weights /= weights.sum()

    total = 0.0
    for c in range(net.num_classes):
        term = _norm(_map(net, x, spec, c) - _map(net, x_prime, spec, c), norm)
        total += 0.5 * term if c == y else 0.5 * weights[c] * term
    return float(total)


# =====================================================
# === COMPLETENESS LOWER BOUND ===
# =====================================================

def check_prop1(
    net: Network,
    x: np.ndarray,
    x_prime: np.ndarray,
    y: int,
    y_prime: int,
    interpreter: InterpreterKind = InterpreterKind.CAM,
    tolerance: float = BOUND_TOLERANCE,
    ig_steps: int = 32,
) -> BoundCheck:
    """D_2,l1(x, x') >= 1/2 (logit_y(x) - logit_y'(x)) for a successful attack.

    Completeness holds for pre-bias scores (sum_i I(x, c)_i = logit_c - b_c); the biases
    cancel against the prediction condition on x', so the bound is on the full logits.
    """
    if interpreter not in COMPLETE_INTERPRETERS:
        raise DiscrepancyError(f"{InterpreterKind(interpreter).value} does not satisfy completeness")
    if y == y_prime:
        raise DiscrepancyError("bound needs y != y'")
    logits = net.logits(np.concatenate([as_batch(net, x), as_batch(net, x_prime)]))
    predicted = logits.argmax(axis=1)
    if predicted[0] != y or predicted[1] != y_prime:
        raise DiscrepancyError(
            f"bound hypotheses unmet: predictions ({predicted[0]}, {predicted[1]}), claimed ({y}, {y_prime})"
        )

    discrepancy = two_class_l1(net, x, x_prime, y, y_prime, interpreter, ig_steps)
    half_margin = 0.5 * float(logits[0, y].astype(np.float64) - logits[0, y_prime])
    return BoundCheck(discrepancy=discrepancy, half_margin=half_margin, holds=discrepancy >= half_margin - tolerance)


def check_prop1_general(
    net: Network,
    x: np.ndarray,
    x_prime: np.ndarray,
    y: int,
    y_prime: int,
    interpreter: Callable[[Network, np.ndarray, int], np.ndarray],
    g: Callable[[float], float],
    tolerance: float = BOUND_TOLERANCE,
) -> BoundCheck:
    """Bound for interpreters with sum_i I(x, c)_i = g(logit_c(x)) + k_c, g increasing.

    k_c is a per-class constant (for CAM, g is the identity and k_c = -b_c);
    it cancels in each class term, so predictions and the margin both use full logits.
    """
    if y == y_prime:
        raise DiscrepancyError("bound needs y != y'")
    logits = net.logits(np.concatenate([as_batch(net, x), as_batch(net, x_prime)])).astype(np.float64)
    predicted = logits.argmax(axis=1)
    if predicted[0] != y or predicted[1] != y_prime:
        raise DiscrepancyError(
            f"bound hypotheses unmet: predictions ({predicted[0]}, {predicted[1]}), claimed ({y}, {y_prime})"
        )
    discrepancy = 0.5 * sum(
        _norm(interpreter(net, x, c) - interpreter(net, x_prime, c), Norm.L1) for c in (y, y_prime)
    )
    half_margin = 0.5 * (g(float(logits[0, y])) - g(float(logits[0, y_prime])))
    return BoundCheck(discrepancy=discrepancy, half_margin=half_margin, holds=discrepancy >= half_margin - tolerance)


# =====================================================
# === NDS / NSL / KENDALL TAU ===
# =====================================================

def range_normalised_distance(benign: np.ndarray, adversarial: np.ndarray, norm: Norm) -> Optional[float]:
    """||(benign - adversarial) / range(benign)||_p; None when the benign map is constant."""
    benign = np.asarray(benign, dtype=np.float64)
    spread = benign.max() - benign.min()
    if spread == 0:
        return None
    return _norm((benign - adversarial) / spread, norm)


def nds_score(spec: DiscrepancySpec, net: Network, x: np.ndarray, x_prime: np.ndarray) -> NdsScore:
    """Discrepancy with each class term divided by the range of the benign map."""
    _check_pair(net, x, x_prime)
    if spec.class_set == ClassSet.SOFTMAX_WEIGHTED:
        raise DiscrepancyError("NDS is defined for fixed class sets only")
    if spec.interpreter == InterpreterKind.REPR:
        _repr_allowed(spec)
        classes: Sequence[Optional[int]] = [None]
    else:
        classes = classes_of(spec, net)

    terms, degenerate = [], 0
    for c in classes:
        term = range_normalised_distance(_map(net, x, spec, c), _map(net, x_prime, spec, c), spec.norm)
        if term is None:
            degenerate += 1
            term = 0.0
        terms.append(term)
    if degenerate:
        logger.debug(f"NDS {spec.label}: {degenerate} zero-range benign map(s)")
    return NdsScore(value=float(np.mean(terms)), degenerate=degenerate)


def nds(spec: DiscrepancySpec, net: Network, x: np.ndarray, x_prime: np.ndarray) -> float:
    return nds_score(spec, net, x, x_prime).value


def nsl(nds_low: float, nds_high: float, eps_low: float, eps_high: float) -> float:
    """Relative change of NDS per relative change of eps."""
    if nds_low <= 0:
        raise DiscrepancyError(f"NSL needs a positive NDS at the low eps, got {nds_low}")
    if eps_low <= 0 or eps_high <= eps_low:
        raise DiscrepancyError(f"NSL needs 0 < eps_low < eps_high, got {eps_low}, {eps_high}")
    return (abs(nds_high - nds_low) / nds_low) / ((eps_high - eps_low) / eps_low)


def _values(m) -> np.ndarray:
    return m.values if isinstance(m, InterpMap) else np.asarray(m)


def rank_correlation(a, b) -> RankCorrelation:
    """Kendall tau-b. Identical maps give 1; otherwise a constant map gives 0, flagged degenerate."""
    a, b = _values(a).reshape(-1), _values(b).reshape(-1)
    if a.shape != b.shape or a.size < 2:
        raise DiscrepancyError(f"kendall tau needs equal lengths >= 2, got {a.size} and {b.size}")
    if np.array_equal(a, b):
        return RankCorrelation(tau=1.0, degenerate=False)
    if np.all(a == a[0]) or np.all(b == b[0]):
        logger.debug("kendall tau of a constant map")
        return RankCorrelation(tau=0.0, degenerate=True)
    tau, _ = kendalltau(a, b, variant="b")
    return RankCorrelation(tau=float(np.clip(tau, -1.0, 1.0)), degenerate=False)


def kendall_tau(a, b) -> float:
    return rank_correlation(a, b).tau


# =====================================================
# === DIFFERENTIABLE (batch, CAM tensors) ===
# =====================================================

def map_distances(maps_x: Tensor, maps_x_prime: Tensor, norm: Norm = Norm.L1) -> Tensor:
    """[N, C, u] x2 -> [N, C] per-class norms of the difference"""
    if norm == Norm.L1:
        return l1_distance(maps_x, maps_x_prime, axis=2)
    return l2_distance(maps_x, maps_x_prime, axis=2)


def class_set_discrepancy(
    distances: Tensor,
    class_set: ClassSet,
    y: np.ndarray,
    y_prime: Optional[np.ndarray] = None,
) -> Tensor:
    """[N, C] per-class distances -> [N] discrepancy for a fixed class set"""
    if class_set == ClassSet.ONE_CLASS:
        return pick(distances, y)
    if class_set == ClassSet.TWO_CLASS:
        if y_prime is None:
            raise DiscrepancyError("TwoClass needs y'")
        return (pick(distances, y) + pick(distances, y_prime)) * 0.5
    if class_set == ClassSet.ALL_CLASS:
        return distances.mean(axis=1)
    raise DiscrepancyError("use softmax_weighted_tensor for SoftmaxWeighted")


def softmax_weighted_tensor(distances: Tensor, logits_x_prime: Tensor, y: np.ndarray) -> Tensor:
    """[N, C] distances, [N, C] logits of x' -> [N]; gradients flow through the weights too."""
    y = np.asarray(y, dtype=np.int64)
    others = np.ones(distances.shape, dtype=distances.data.dtype)
    others[np.arange(len(y)), y] = 0
    weighted = softmax(logits_x_prime) * distances * Tensor(others)
    return pick(distances, y) * 0.5 + weighted.sum(axis=1) * 0.5
