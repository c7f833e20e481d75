"""
attack_service.py - l_inf attacks: PGD, interpretability-sneaking (ISA) with lambda
bisection, attack-against-interpretability (AAI) and minimal-eps search

All attacks keep a perturbation delta with |delta|_inf <= eps and x0 + delta in [0, 1],
and step with the sign of the (sub-)gradient.
"""

import logging
from typing import Callable, List, Optional, Tuple

import numpy as np

from interprobust.exceptions import AttackError
from interprobust.models import (
    AaiObjective,
    AttackConfig,
    AttackOutcome,
    ClassSet,
    DiscrepancySpec,
    InterpreterKind,
    Norm,
)
from interprobust.services.discrepancy_service import (
    class_set_discrepancy,
    generic_discrepancy,
    map_distances,
    softmax_weighted_tensor,
)
from interprobust.services.interpret_service import as_batch, cam, cam_maps
from interprobust.services.network_service import Network, NetworkOutput
from interprobust.utils.tensor import (
    Tensor,
    backward,
    clamp_min,
    cross_entropy,
    default_dtype,
    max_excluding,
    no_grad,
    pick,
)

logger = logging.getLogger(__name__)

ISA_TAU = 0.1
ISA_STEPS = 200
BISECT_ITERS = 10
AAI_STEPS = 200
AAI_STEP_SIZE = 0.01
AAI_TOPK = 8
MIN_EPS_TOLERANCE = 1e-3


def project(delta: np.ndarray, x0: np.ndarray, eps: float) -> np.ndarray:
    """Clamp delta to the eps-ball, then keep x0 + delta inside [0, 1]."""
    delta = np.clip(delta, -eps, eps)
    return np.minimum(np.maximum(delta, -x0), 1 - x0).astype(x0.dtype)


def random_start(x0: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
    return project(rng.uniform(-eps, eps, size=x0.shape).astype(x0.dtype), x0, eps)


def margins(logits: np.ndarray, labels: np.ndarray, targeted: bool = False) -> np.ndarray:
    """Untargeted: f_y - max_{j!=y} f_j.  Targeted: max_{j!=t} f_j - f_t."""
    logits = logits.astype(np.float64)
    rows = np.arange(len(labels))
    others = logits.copy()
    others[rows, labels] = -np.inf
    gap = logits[rows, labels] - others.max(axis=1)
    return -gap if targeted else gap


def runner_up(net: Network, x: np.ndarray, y: int) -> int:
    """Highest-scoring class other than y; the default ISA target."""
    logits = net.logits(as_batch(net, x))[0].astype(np.float64)
    logits[y] = -np.inf
    return int(logits.argmax())


def sign_step(x0: np.ndarray, delta: np.ndarray, grad: np.ndarray, step_size: float, eps: float) -> np.ndarray:
    step = x0.dtype.type(step_size) * np.sign(grad).astype(x0.dtype)
    return project(delta + step, x0, eps)


# =====================================================
# === PGD ===
# =====================================================

def pgd_batch(
    net: Network,
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, List[float]]:
    """Batched PGD on cross-entropy; ascends at y, or descends at cfg.target when set.

    Returns the adversarial batch and the mean loss before every step.
    """
    x0 = np.asarray(x, dtype=default_dtype())
    y = np.asarray(y, dtype=np.int64)
    delta = np.zeros_like(x0)
    if cfg.rand_init and cfg.eps > 0:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        delta = random_start(x0, cfg.eps, rng)
    if cfg.eps == 0:
        return x0.copy(), []

    labels = y if cfg.target is None else np.full_like(y, cfg.target)
    direction = 1.0 if cfg.target is None else -1.0
    trace: List[float] = []
    for _ in range(cfg.steps):
        xt = Tensor(x0 + delta, requires_grad=True)
        loss = cross_entropy(net.forward(xt).logits, labels, reduction="sum")
        (grad,) = backward(loss, [xt])
        trace.append(loss.item() / len(y))
        delta = sign_step(x0, delta, direction * grad, cfg.step_size, cfg.eps)
    return x0 + delta, trace


def pgd(net: Network, x: np.ndarray, y: int, cfg: AttackConfig) -> AttackOutcome:
    if cfg.target is not None and not 0 <= cfg.target < net.num_classes:
        raise AttackError(f"target {cfg.target} outside [0, {net.num_classes})")
    x_adv, trace = pgd_batch(net, as_batch(net, x), np.array([y]), cfg)
    logits = net.logits(x_adv)
    prediction = int(logits[0].argmax())
    if cfg.target is None:
        success = prediction != y
        margin = float(margins(logits, np.array([y]))[0])
    else:
        success = prediction == cfg.target
        margin = float(margins(logits, np.array([cfg.target]), targeted=True)[0])
    return AttackOutcome(
        x_adv=x_adv[0],
        success=success,
        margin=margin,
        prediction=prediction,
        eps=cfg.eps,
        loss_trace=trace,
    )


# =====================================================
# === DIFFERENTIABLE DISCREPANCY (attack side) ===
# =====================================================

def _surrogate(spec: DiscrepancySpec) -> DiscrepancySpec:
    # GradCAM++ and IG would need second-order gradients; optimise the CAM discrepancy instead
    if spec.interpreter in (InterpreterKind.GRADCAMPP, InterpreterKind.IG):
        return spec.model_copy(update={"interpreter": InterpreterKind.CAM})
    return spec


def benign_maps(net: Network, x0: np.ndarray, spec: DiscrepancySpec) -> np.ndarray:
    with no_grad():
        out, maps = cam_maps(net, x0)
    if spec.interpreter == InterpreterKind.REPR:
        return out.features.numpy().reshape(len(x0), 1, -1)
    return maps.numpy()


def discrepancy_objective(
    net: Network,
    xt: Tensor,
    benign: np.ndarray,
    spec: DiscrepancySpec,
    y: np.ndarray,
    y_prime: Optional[np.ndarray] = None,
) -> Tuple[NetworkOutput, Tensor]:
    """Forward pass at xt plus the [N] discrepancy to the benign maps, both differentiable in xt.

    GradCAM shares CAM's tensor: on a GAP -> dense head the two maps coincide.
    """
    out, maps = cam_maps(net, xt)
    if spec.interpreter == InterpreterKind.REPR:
        if spec.class_set != ClassSet.TWO_CLASS:
            raise AttackError("Repr is only defined for the two-class column")
        n = xt.shape[0]
        distances = map_distances(Tensor(benign), out.features.reshape(n, 1, -1), spec.norm)
        return out, pick(distances, np.zeros(n, dtype=np.int64))
    distances = map_distances(Tensor(benign), maps, spec.norm)
    if spec.class_set == ClassSet.SOFTMAX_WEIGHTED:
        return out, softmax_weighted_tensor(distances, out.logits, y)
    return out, class_set_discrepancy(distances, spec.class_set, y, y_prime)


# =====================================================
# === ISA ===
# =====================================================

def isa(
    net: Network,
    x: np.ndarray,
    y: int,
    y_prime: int,
    eps: float,
    tau: float = ISA_TAU,
    lam: float = 1.0,
    steps: int = ISA_STEPS,
    step_size: Optional[float] = None,
    spec: Optional[DiscrepancySpec] = None,
) -> AttackOutcome:
    """Minimise lam * max{max_{j!=y'} f_j - f_y', -tau} + D(x, x + delta).

    Success means the attack term sits at -tau at the final iterate.
    Step size defaults to eps / 10.
    """
    if y == y_prime:
        raise AttackError("ISA needs a target y' different from the true label")
    if tau <= 0:
        raise AttackError(f"tau must be positive, got {tau}")
    spec = spec or DiscrepancySpec(class_set=ClassSet.TWO_CLASS, norm=Norm.L1)
    spec = spec.bind(y, y_prime if spec.class_set == ClassSet.TWO_CLASS else None)
    step_size = step_size if step_size is not None else eps / 10
    optimised = _surrogate(spec)

    x0 = as_batch(net, x).astype(default_dtype())
    ys, yps = np.array([y]), np.array([y_prime])
    benign = benign_maps(net, x0, optimised)
    delta = np.zeros_like(x0)
    trace: List[float] = []
    if eps > 0 and step_size > 0:
        for _ in range(steps):
            xt = Tensor(x0 + delta, requires_grad=True)
            out, dist = discrepancy_objective(net, xt, benign, optimised, ys, yps)
            attack = clamp_min(max_excluding(out.logits, yps) - pick(out.logits, yps), -tau)
            loss = (attack * lam + dist).sum()
            (grad,) = backward(loss, [xt])
            trace.append(loss.item())
            delta = sign_step(x0, delta, -grad, step_size, eps)

    x_adv = x0 + delta
    logits = net.logits(x_adv)
    margin = float(margins(logits, yps, targeted=True)[0])
    return AttackOutcome(
        x_adv=x_adv[0],
        success=margin <= -tau,
        margin=margin,
        prediction=int(logits[0].argmax()),
        eps=eps,
        discrepancy=generic_discrepancy(spec, net, x0[0], x_adv[0]),
        lambda_used=lam,
        loss_trace=trace,
    )


def bisect_lambda(
    run: Callable[[float], AttackOutcome], lo: float, hi: float, iters: int = BISECT_ITERS
) -> Tuple[float, AttackOutcome]:
    """Smallest lambda in [lo, hi] whose run still succeeds, assuming success is monotone in lambda."""
    best = run(hi)
    if not best.success:
        raise AttackError(f"no successful attack at lambda_hi={hi}; raise eps or lambda_hi")
    at_lo = run(lo)
    if at_lo.success:
        return lo, at_lo

    top, best_lam = hi, hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        outcome = run(mid)
        if outcome.success:
            hi, best_lam, best = mid, mid, outcome
        else:
            lo = mid

    # bisection never revisits the range above a success; probe it once
    if best_lam < top:
        probe = 0.5 * (best_lam + top)
        if not run(probe).success:
            logger.warning(f"ISA success not monotone in lambda: succeeded at {best_lam:.4g}, failed at {probe:.4g}")
    return best_lam, best


def isa_bisect(
    net: Network,
    x: np.ndarray,
    y: int,
    y_prime: int,
    eps: float,
    tau: float = ISA_TAU,
    lambda_range: Tuple[float, float] = (0.0, 100.0),
    iters: int = BISECT_ITERS,
    steps: int = ISA_STEPS,
    step_size: Optional[float] = None,
    spec: Optional[DiscrepancySpec] = None,
) -> AttackOutcome:
    lo, hi = lambda_range
    if not 0 <= lo < hi:
        raise AttackError(f"lambda range must satisfy 0 <= lo < hi, got {lambda_range}")

    def run(lam: float) -> AttackOutcome:
        return isa(net, x, y, y_prime, eps, tau, lam, steps, step_size, spec)

    lam, outcome = bisect_lambda(run, lo, hi, iters)
    logger.debug(f"ISA bisection: lambda={lam:.4g}, discrepancy={outcome.discrepancy:.4g}")
    return outcome.model_copy(update={"lambda_used": lam})


# =====================================================
# === AAI ===
# =====================================================

def topk_cells(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries, stable on ties."""
    return np.argsort(-values, kind="stable")[: min(k, values.size)]


def aai(
    net: Network,
    x: np.ndarray,
    y: int,
    eps: float,
    lam: float = 1.0,
    objective: AaiObjective = AaiObjective.L1_ONE_CLASS,
    k: int = AAI_TOPK,
    steps: int = AAI_STEPS,
    step_size: float = AAI_STEP_SIZE,
    seed: int = 0,
) -> AttackOutcome:
    """Move the CAM of the true class while a hinge keeps the label at y.

    L1OneClass maximises ||CAM(x, y) - CAM(x + delta, y)||_1; TopK pushes down the
    adversarial map on the benign top-k cells. Both start from a uniform point in the ball.
    """
    x0 = as_batch(net, x).astype(default_dtype())
    if int(net.predict(x0)[0]) != y:
        raise AttackError("AAI needs a correctly classified input")
    ys = np.array([y])
    benign = cam(net, x0[0], y).values
    top = topk_cells(benign, k)
    mask = np.zeros((1, net.num_classes, benign.size), dtype=x0.dtype)
    mask[0, y, top] = 1

    delta = np.zeros_like(x0)
    trace: List[float] = []
    if eps > 0:
        delta = random_start(x0, eps, np.random.default_rng(seed))
        spec = DiscrepancySpec(class_set=ClassSet.ONE_CLASS, norm=Norm.L1)
        benign_all = benign_maps(net, x0, spec)
        for _ in range(steps):
            xt = Tensor(x0 + delta, requires_grad=True)
            if objective == AaiObjective.L1_ONE_CLASS:
                out, dist = discrepancy_objective(net, xt, benign_all, spec, ys)
                term = -dist
            else:
                out, maps = cam_maps(net, xt)
                term = (maps * Tensor(mask)).sum(axis=2).sum(axis=1)
            hinge = clamp_min(max_excluding(out.logits, ys) - pick(out.logits, ys), 0.0)
            loss = (hinge * lam + term).sum()
            (grad,) = backward(loss, [xt])
            trace.append(loss.item())
            delta = sign_step(x0, delta, -grad, step_size, eps)

    x_adv = x0 + delta
    logits = net.logits(x_adv)
    prediction = int(logits[0].argmax())
    adversarial = cam(net, x_adv[0], y).values
    displaced = len(set(top.tolist()) - set(topk_cells(adversarial, k).tolist()))
    return AttackOutcome(
        x_adv=x_adv[0],
        success=prediction == y,
        margin=float(margins(logits, ys)[0]),
        prediction=prediction,
        eps=eps,
        discrepancy=float(np.abs(benign.astype(np.float64) - adversarial).sum()),
        lambda_used=lam,
        topk_displaced=displaced,
        loss_trace=trace,
    )


# =====================================================
# === MINIMAL EPS ===
# =====================================================

def min_eps(net: Network, x: np.ndarray, y: int, cfg: AttackConfig, tol: float = MIN_EPS_TOLERANCE) -> float:
    """Smallest eps in (0, cfg.eps] at which untargeted PGD succeeds, to within tol."""
    xb = as_batch(net, x)
    if int(net.predict(xb)[0]) != y:
        return 0.0
    untargeted = cfg.model_copy(update={"target": None})
    if not pgd(net, x, y, untargeted).success:
        raise AttackError(f"PGD fails at the upper bracket eps={cfg.eps}")

    lo, hi = 0.0, cfg.eps
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if pgd(net, x, y, untargeted.model_copy(update={"eps": mid})).success:
            hi = mid
        else:
            lo = mid
    return hi
