"""
eval_service.py - Experiment harness: ATA and multi-step sweeps, AAI rank-correlation
sweep, completeness-bound deciles, NDS/NSL table, ISA discrepancy-vs-eps sweep, gamma sweep,
feature visualisation

Samples are the first n of a seed-0 shuffle of the test set. Work fans out over a thread
pool; results are gathered in example order, so tables do not depend on the pool width.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
from tqdm import tqdm

from interprobust.config import settings
from interprobust.exceptions import (
    AttackError,
    BoundViolationError,
    DiscrepancyError,
    InsufficientSamplesError,
    InterpretationError,
)
from interprobust.models import (
    AaiObjective,
    AttackConfig,
    ClassSet,
    Dataset,
    DecileTable,
    DiscrepancySpec,
    SweepResult,
    TrainConfig,
    TrainMethod,
)
from interprobust.services import attack_service, network_service, train_service
from interprobust.services.discrepancy_service import check_prop1, kendall_tau, nds, nsl
from interprobust.services.interpret_service import as_batch, cam
from interprobust.services.network_service import Network
from interprobust.utils.tensor import Tensor, backward, default_dtype, no_grad

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

SAMPLE_SEED = 0
CHUNK = 50
DECILE_LEVELS = [round(0.1 * i, 1) for i in range(1, 11)]
MIN_BOUND_SAMPLES = 10
NSL_EPS_FACTOR = 1.6


def fan_out(fn: Callable[[T], R], items: Sequence[T], threads: Optional[int] = None) -> List[R]:
    """Map fn over items in a thread pool, results in input order."""
    width = threads or settings.thread_count()
    if width <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=width) as pool:
        return list(pool.map(fn, items))


def sample(dataset: Dataset, n: int) -> Dataset:
    if len(dataset) == 0:
        raise InsufficientSamplesError("empty dataset")
    return dataset.subset(min(n, len(dataset)), seed=SAMPLE_SEED)


def _chunks(data: Dataset) -> List[Tuple[np.ndarray, np.ndarray]]:
    return [(data.images[i : i + CHUNK], data.labels[i : i + CHUNK]) for i in range(0, len(data), CHUNK)]


def assert_bound(net: Network, x: np.ndarray, x_adv: np.ndarray, y: int, y_prime: int) -> None:
    """Global hook: a successful attack must satisfy the completeness lower bound."""
    try:
        check = check_prop1(net, x, x_adv, y, y_prime)
    except DiscrepancyError:
        # single-example and batched predictions disagree on a near-tie
        logger.debug(f"bound check skipped for labels {y} -> {y_prime}")
        return
    if not check.holds:
        raise BoundViolationError(
            f"discrepancy {check.discrepancy:.6g} < half margin {check.half_margin:.6g} (labels {y} -> {y_prime})"
        )


def _robust_hits(net: Network, cfg: AttackConfig, chunk: Tuple[np.ndarray, np.ndarray], check: bool) -> int:
    x, y = chunk
    x_adv, _ = attack_service.pgd_batch(net, x, y, cfg)
    clean = net.predict(x.astype(default_dtype()))
    adv = net.predict(x_adv)
    if check:
        for i in np.flatnonzero((clean == y) & (adv != y)):
            assert_bound(net, x[i], x_adv[i], int(y[i]), int(adv[i]))
    return int((adv == y).sum())


def _ata(net: Network, data: Dataset, cfg: AttackConfig, threads: Optional[int], check: bool) -> float:
    hits = fan_out(lambda chunk: _robust_hits(net, cfg, chunk, check), _chunks(data), threads)
    return sum(hits) / len(data)


# =====================================================
# === ATA SWEEPS ===
# =====================================================

def ata_sweep(
    net: Network,
    dataset: Dataset,
    eps_list: Sequence[float],
    steps: int = 200,
    n_samples: int = 200,
    step_size: float = 0.01,
    threads: Optional[int] = None,
    check_bound: bool = True,
) -> SweepResult:
    """Accuracy under untargeted PGD per eps; the eps = 0 cell is clean accuracy."""
    data = sample(dataset, n_samples)
    cells = []
    for eps in tqdm(eps_list, desc="ata", disable=not settings.SHOW_PROGRESS):
        cfg = AttackConfig(eps=eps, steps=steps, step_size=step_size)
        cells.append(_ata(net, data, cfg, threads, check_bound))
    return SweepResult(
        name="ata", axis="eps", values=list(eps_list), metric="accuracy", cells=cells, n_samples=len(data), seed=SAMPLE_SEED
    )


def multistep_sweep(
    net: Network,
    dataset: Dataset,
    step_list: Sequence[int],
    eps: float = 0.3,
    n_samples: int = 200,
    step_size: float = 0.01,
    threads: Optional[int] = None,
    check_bound: bool = True,
) -> SweepResult:
    data = sample(dataset, n_samples)
    cells = []
    for steps in tqdm(step_list, desc="multistep", disable=not settings.SHOW_PROGRESS):
        cfg = AttackConfig(eps=eps, steps=steps, step_size=step_size)
        cells.append(_ata(net, data, cfg, threads, check_bound))
    return SweepResult(
        name="multistep",
        axis="steps",
        values=[float(s) for s in step_list],
        metric="accuracy",
        cells=cells,
        n_samples=len(data),
        seed=SAMPLE_SEED,
    )


# =====================================================
# === AAI ===
# =====================================================

def aai_sweep(
    net: Network,
    dataset: Dataset,
    eps_list: Sequence[float],
    n_samples: int = 200,
    lam: float = 1.0,
    objective: AaiObjective = AaiObjective.L1_ONE_CLASS,
    k: int = attack_service.AAI_TOPK,
    steps: int = attack_service.AAI_STEPS,
    step_size: float = attack_service.AAI_STEP_SIZE,
    threads: Optional[int] = None,
) -> SweepResult:
    """Mean Kendall tau between benign and AAI-perturbed true-class CAM, per eps."""
    data = sample(dataset, n_samples)
    correct = np.flatnonzero(net.predict(data.images.astype(default_dtype())) == data.labels)
    if correct.size == 0:
        raise InsufficientSamplesError("AAI needs at least one correctly classified point")
    excluded = len(data) - correct.size
    if excluded:
        logger.info(f"AAI sweep: {excluded} misclassified point(s) excluded")

    cells, survivors = [], []
    for eps in tqdm(eps_list, desc="aai", disable=not settings.SHOW_PROGRESS):

        def run(i: int) -> Optional[Tuple[float, bool]]:
            x, y = data.images[i], int(data.labels[i])
            try:
                outcome = attack_service.aai(net, x, y, eps, lam, objective, k, steps, step_size, seed=int(i))
            except AttackError:
                return None
            return kendall_tau(cam(net, x, y), cam(net, outcome.x_adv, y)), outcome.success

        results = [r for r in fan_out(run, correct.tolist(), threads) if r is not None]
        if not results:
            raise InsufficientSamplesError(f"no AAI run completed at eps={eps}")
        cells.append(float(np.mean([tau for tau, _ in results])))
        survivors.append(float(sum(ok for _, ok in results)))
    return SweepResult(
        name="aai",
        axis="eps",
        values=list(eps_list),
        metric="tau",
        cells=cells,
        columns={"survivors": survivors},
        n_samples=int(correct.size),
        seed=SAMPLE_SEED,
    )


# =====================================================
# === COMPLETENESS BOUND DECILES ===
# =====================================================

def prop1_deciles(
    net: Network,
    dataset: Dataset,
    n: int = 200,
    eps: float = 0.3,
    steps: int = 200,
    step_size: float = 0.01,
    threads: Optional[int] = None,
) -> DecileTable:
    """Deciles of D_2,l1 and of the margin logit_y(x) - logit_y'(x) over successful PGD attacks."""
    data = sample(dataset, n)
    cfg = AttackConfig(eps=eps, steps=steps, step_size=step_size)

    def run(i: int) -> Optional[Tuple[float, float]]:
        x, y = data.images[i], int(data.labels[i])
        if int(net.predict(as_batch(net, x))[0]) != y:
            return None
        outcome = attack_service.pgd(net, x, y, cfg)
        if not outcome.success:
            return None
        check = check_prop1(net, x, outcome.x_adv, y, outcome.prediction)
        if not check.holds:
            raise BoundViolationError(f"example {i}: {check.discrepancy:.6g} < {check.half_margin:.6g}")
        return check.discrepancy, 2 * check.half_margin

    pairs = [p for p in fan_out(run, list(range(len(data))), threads) if p is not None]
    if len(pairs) < MIN_BOUND_SAMPLES:
        raise InsufficientSamplesError(
            f"only {len(pairs)} successful attacks at eps={eps}; need at least {MIN_BOUND_SAMPLES}"
        )
    discrepancy = np.array([d for d, _ in pairs])
    margin = np.array([m for _, m in pairs])
    positive = margin > 0
    ratios = discrepancy[positive] / (0.5 * margin[positive])
    return DecileTable(
        levels=DECILE_LEVELS,
        discrepancy=np.quantile(discrepancy, DECILE_LEVELS).tolist(),
        margin=np.quantile(margin, DECILE_LEVELS).tolist(),
        n_checked=len(pairs),
        median_ratio=float(np.median(ratios)) if ratios.size else float("nan"),
    )


# =====================================================
# === NDS / NSL TABLE ===
# =====================================================

def _bind(spec: DiscrepancySpec, y: int, y_prime: int) -> DiscrepancySpec:
    return spec.bind(y, y_prime if spec.class_set == ClassSet.TWO_CLASS else None)


def nds_table(
    net: Network,
    dataset: Dataset,
    specs: Sequence[DiscrepancySpec],
    n: int = 200,
    eps_hi: float = 0.3,
    steps: int = 200,
    step_size: float = 0.01,
    tau: float = attack_service.ISA_TAU,
    lambda_range: Tuple[float, float] = (0.0, 100.0),
    iters: int = attack_service.BISECT_ITERS,
    isa_steps: int = attack_service.ISA_STEPS,
    threads: Optional[int] = None,
) -> SweepResult:
    """Per spec: mean NDS of the smallest-lambda ISA at eps*, and mean NSL between eps* and 1.6 eps*."""
    data = sample(dataset, n)
    cfg = AttackConfig(eps=eps_hi, steps=steps, step_size=step_size)

    def run(i: int) -> List[Optional[Tuple[float, Optional[float]]]]:
        x, y = data.images[i], int(data.labels[i])
        if int(net.predict(as_batch(net, x))[0]) != y:
            return [None] * len(specs)
        try:
            eps_star = attack_service.min_eps(net, x, y, cfg)
        except AttackError:
            return [None] * len(specs)
        target = attack_service.pgd(net, x, y, cfg.model_copy(update={"eps": eps_star})).prediction
        rows: List[Optional[Tuple[float, Optional[float]]]] = []
        for spec in specs:
            bound = _bind(spec, y, target)
            try:
                low = attack_service.isa_bisect(net, x, y, target, eps_star, tau, lambda_range, iters, isa_steps, spec=bound)
                high = attack_service.isa_bisect(
                    net, x, y, target, NSL_EPS_FACTOR * eps_star, tau, lambda_range, iters, isa_steps, spec=bound
                )
            except AttackError:
                rows.append(None)
                continue
            nds_low, nds_high = nds(bound, net, x, low.x_adv), nds(bound, net, x, high.x_adv)
            slope = nsl(nds_low, nds_high, eps_star, NSL_EPS_FACTOR * eps_star) if nds_low > 0 else None
            rows.append((nds_low, slope))
        return rows

    per_example = fan_out(run, list(range(len(data))), threads)
    cells, slopes, counts = [], [], []
    for j, spec in enumerate(specs):
        kept = [row[j] for row in per_example if row[j] is not None]
        logger.info(f"NDS {spec.label}: {len(kept)} of {len(data)} examples with successful ISA")
        cells.append(float(np.mean([v for v, _ in kept])) if kept else float("nan"))
        valid = [s for _, s in kept if s is not None]
        slopes.append(float(np.mean(valid)) if valid else float("nan"))
        counts.append(float(len(kept)))
    return SweepResult(
        name="nds",
        axis="spec",
        values=[s.label for s in specs],
        metric="nds",
        cells=cells,
        columns={"nsl": slopes, "n": counts},
        n_samples=len(data),
        seed=SAMPLE_SEED,
    )


def isa_eps_sweep(
    net: Network,
    dataset: Dataset,
    specs: Sequence[DiscrepancySpec],
    eps_list: Sequence[float],
    n: int = 200,
    lam: float = 1.0,
    tau: float = attack_service.ISA_TAU,
    steps: int = attack_service.ISA_STEPS,
    threads: Optional[int] = None,
) -> SweepResult:
    """Mean discrepancy of successful ISAs (runner-up target) per eps, one column per spec.

    The first spec fills the cells column; a cell with no successful attack is nan.
    """
    if not specs:
        raise ValueError("isa sweep needs at least one discrepancy spec")
    if len({spec.label for spec in specs}) != len(specs):
        raise ValueError("isa sweep specs must be distinct")
    data = sample(dataset, n)
    correct = np.flatnonzero(net.predict(data.images.astype(default_dtype())) == data.labels)
    if correct.size == 0:
        raise InsufficientSamplesError("ISA sweep needs at least one correctly classified point")

    table: Dict[str, List[float]] = {spec.label: [] for spec in specs}
    for eps in tqdm(eps_list, desc="isa", disable=not settings.SHOW_PROGRESS):

        def run(i: int) -> List[Optional[float]]:
            x, y = data.images[i], int(data.labels[i])
            target = attack_service.runner_up(net, x, y)
            found: List[Optional[float]] = []
            for spec in specs:
                outcome = attack_service.isa(net, x, y, target, eps, tau, lam, steps, spec=spec)
                found.append(outcome.discrepancy if outcome.success else None)
            return found

        per_example = fan_out(run, correct.tolist(), threads)
        for j, spec in enumerate(specs):
            kept = [row[j] for row in per_example if row[j] is not None]
            logger.info(f"ISA eps={eps} {spec.label}: {len(kept)} of {correct.size} successful")
            table[spec.label].append(float(np.mean(kept)) if kept else float("nan"))

    first = specs[0].label
    return SweepResult(
        name="isa",
        axis="eps",
        values=list(eps_list),
        metric="discrepancy",
        metric_label=first,
        cells=table.pop(first),
        columns=table,
        n_samples=int(correct.size),
        seed=SAMPLE_SEED,
    )


# =====================================================
# === GAMMA SWEEP ===
# =====================================================

def gamma_sweep(
    train_set: Dataset,
    test_set: Dataset,
    gamma_list: Sequence[float],
    cfg: TrainConfig,
    arch: str,
    eps: float = 0.3,
    steps: int = 200,
    n_samples: int = 200,
    threads: Optional[int] = None,
) -> SweepResult:
    """One Int model per gamma (same seed and init); clean accuracy and ATA at eps."""
    input_shape = train_set.images.shape[1:]
    num_classes = max(train_set.num_classes, test_set.num_classes)
    clean, robust = [], []
    for gamma in gamma_list:
        net = network_service.build(arch, input_shape, num_classes, seed=cfg.seed)
        run_cfg = cfg.model_copy(update={"gamma": gamma, "method": TrainMethod.INT})
        state = train_service.train(net, train_set, run_cfg)
        clean.append(train_service.accuracy(state.network, sample(test_set, n_samples)))
        robust.append(ata_sweep(state.network, test_set, [eps], steps, n_samples, threads=threads, check_bound=False).cells[0])
        logger.info(f"gamma={gamma}: clean={clean[-1]:.4f} ata={robust[-1]:.4f}")
    return SweepResult(
        name="gamma",
        axis="gamma",
        values=list(gamma_list),
        metric="clean_acc",
        cells=clean,
        columns={"ata": robust},
        n_samples=min(n_samples, len(test_set)),
        seed=cfg.seed,
    )


# =====================================================
# === FEATURE VISUALISATION ===
# =====================================================

def channel_activation(net: Network, image: np.ndarray, neuron_index: int) -> float:
    with no_grad():
        out = net.forward(as_batch(net, image))
    return float(out.features.numpy()[0, neuron_index].mean(dtype=np.float64))


def visualize_features(
    net: Network, seed_image: np.ndarray, neuron_index: int, steps: int = 100, eps_step: float = 0.01
) -> np.ndarray:
    """Sign ascent on the mean activation of one penultimate channel; returns the best iterate."""
    if not 0 <= neuron_index < net.feature_channels:
        raise InterpretationError(f"neuron index {neuron_index} outside [0, {net.feature_channels})")
    image = as_batch(net, seed_image)[0].astype(default_dtype())
    best, best_value = image.copy(), channel_activation(net, image, neuron_index)
    for _ in range(steps):
        xt = Tensor(image[None], requires_grad=True)
        out = net.forward(xt)
        channel = out.features.reshape(-1)
        k, u = net.feature_channels, net.spatial_units
        mask = np.zeros(k * u, dtype=channel.data.dtype)
        mask[neuron_index * u : (neuron_index + 1) * u] = 1.0 / u
        (grad,) = backward((channel * Tensor(mask)).sum(), [xt])
        image = np.clip(image + image.dtype.type(eps_step) * np.sign(grad[0]).astype(image.dtype), 0, 1)
        value = channel_activation(net, image, neuron_index)
        if value > best_value:
            best, best_value = image.copy(), value
    return best


def activation_gain(net: Network, seed_image: np.ndarray, result: np.ndarray, neuron_index: int) -> Dict[str, float]:
    before = channel_activation(net, seed_image, neuron_index)
    after = channel_activation(net, result, neuron_index)
    return {"before": before, "after": after}
