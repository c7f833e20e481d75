"""
train_service.py - Normal, adversarial and interpretability-regularised training

Objective per batch: CE(x_ce, y) + gamma * mean_n D~(x, x'), where x_ce is the clean or
PGD-perturbed input and x' comes from one of two inner maximisations:
  * discrepancy ascent (Int, IntAdv, IntOneClass)
  * cross-entropy ascent, x' fixed before the outer gradient (Int2, Int2Adv)
D~ is the softmax-weighted l1 CAM measure (true-label l1 term for IntOneClass).
"""

import logging
import time
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from tqdm import tqdm

from interprobust.config import settings
from interprobust.exceptions import NumericError
from interprobust.models import AttackConfig, ClassSet, Dataset, DiscrepancySpec, MetricRow, Norm, TrainConfig, TrainMethod
from interprobust.services import network_service
from interprobust.services.attack_service import benign_maps, discrepancy_objective, pgd_batch, random_start, sign_step
from interprobust.services.discrepancy_service import map_distances, softmax_weighted_tensor
from interprobust.services.interpret_service import cam_maps
from interprobust.services.network_service import Network
from interprobust.utils.formats import write_csv
from interprobust.utils.optim import Adam
from interprobust.utils.tensor import Tensor, backward, cross_entropy, default_dtype, pick

logger = logging.getLogger(__name__)

ADV_CE_METHODS = {TrainMethod.ADV, TrainMethod.INT_ADV, TrainMethod.INT2_ADV}
DISCREPANCY_ASCENT = {TrainMethod.INT, TrainMethod.INT_ADV, TrainMethod.INT_ONE_CLASS}
LOSS_ASCENT = {TrainMethod.INT2, TrainMethod.INT2_ADV}
LR_DECAY_FACTOR = 0.1
METRICS_HEADER = ["step", "epoch", "eps", "loss", "clean_acc"]
TIMING_HEADER = ["method", "steps", "seconds"]


class TrainState:
    def __init__(self, network: Network, optimizer: Adam):
        self.network = network
        self.optimizer = optimizer
        self.step = 0
        self.history: List[MetricRow] = []
        self.checkpoints: List[Path] = []
        self.seconds = 0.0  # wall clock of the training loop

    @property
    def last(self) -> Optional[MetricRow]:
        return self.history[-1] if self.history else None


def _inner_spec(one_class: bool) -> DiscrepancySpec:
    return DiscrepancySpec(class_set=ClassSet.ONE_CLASS if one_class else ClassSet.SOFTMAX_WEIGHTED, norm=Norm.L1)


def inner_max_discrepancy(
    net: Network,
    x: np.ndarray,
    y: np.ndarray,
    eps: float,
    steps: int,
    step_size: float,
    rng: Optional[np.random.Generator] = None,
    one_class: bool = False,
) -> np.ndarray:
    """Sign ascent on D~(x, x + delta) from a uniform start in the ball; weights follow x + delta."""
    x0 = np.asarray(x, dtype=default_dtype())
    if eps == 0:
        return x0.copy()
    y = np.asarray(y, dtype=np.int64)
    spec = _inner_spec(one_class)
    benign = benign_maps(net, x0, spec)
    delta = random_start(x0, eps, rng if rng is not None else np.random.default_rng(0))
    for _ in range(steps):
        xt = Tensor(x0 + delta, requires_grad=True)
        _, dist = discrepancy_objective(net, xt, benign, spec, y)
        (grad,) = backward(dist.sum(), [xt])
        delta = sign_step(x0, delta, grad, step_size, eps)
    return x0 + delta


def inner_max_loss(net: Network, x: np.ndarray, y: np.ndarray, eps: float, steps: int, step_size: float) -> np.ndarray:
    """Untargeted PGD on cross-entropy; the same routine as the PGD attack."""
    x_adv, _ = pgd_batch(net, x, y, AttackConfig(eps=eps, steps=steps, step_size=step_size))
    return x_adv


def _regulariser(net: Network, params: Dict[str, Tensor], x: np.ndarray, x_prime: np.ndarray, y: np.ndarray, one_class: bool) -> Tensor:
    """[N] D~(x, x'), differentiable in the parameters through both maps and the softmax weights."""
    _, maps_x = cam_maps(net, x, params)
    out_prime, maps_prime = cam_maps(net, x_prime, params)
    distances = map_distances(maps_x, maps_prime, Norm.L1)
    if one_class:
        return pick(distances, y)
    return softmax_weighted_tensor(distances, out_prime.logits, y)


def train(
    net: Network,
    dataset: Dataset,
    cfg: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
) -> TrainState:
    n = len(dataset)
    if n == 0:
        raise ValueError("empty training set")
    batches_per_epoch = -(-n // cfg.batch_size)
    total_steps = cfg.epochs * batches_per_epoch
    data_rng, inner_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    out_path = Path(out_dir) if out_dir is not None else None

    state = TrainState(net, Adam(cfg.lr, (cfg.beta1, cfg.beta2)))
    use_discrepancy = cfg.gamma > 0 and cfg.method in DISCREPANCY_ASCENT | LOSS_ASCENT
    one_class = cfg.method == TrainMethod.INT_ONE_CLASS
    logger.info(f"training {cfg.method.value}: {n} examples, {total_steps} steps, gamma={cfg.gamma}")
    if cfg.warmup_for(total_steps) < cfg.warmup_steps:
        logger.warning(
            f"warmup of {cfg.warmup_steps} steps exceeds the run ({total_steps} steps); "
            f"eps stays 0 until step {cfg.warmup_for(total_steps)} and reaches {cfg.eps_final} at the last step"
        )

    started = time.perf_counter()
    bar = tqdm(total=total_steps, desc=f"train {cfg.method.value}", disable=not settings.SHOW_PROGRESS)
    for epoch in range(cfg.epochs):
        order = data_rng.permutation(n)
        for b in range(batches_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            xb = dataset.images[idx].astype(default_dtype())
            yb = dataset.labels[idx]
            eps = cfg.eps_at(state.step, total_steps)
            current = state.network

            x_ce = xb
            if cfg.method in ADV_CE_METHODS and eps > 0:
                x_ce = inner_max_loss(current, xb, yb, eps, cfg.inner_steps, cfg.inner_step_size)
            x_prime = None
            if use_discrepancy and eps > 0:
                if cfg.method in LOSS_ASCENT:
                    x_prime = x_ce if x_ce is not xb else inner_max_loss(
                        current, xb, yb, eps, cfg.inner_steps, cfg.inner_step_size
                    )
                else:
                    x_prime = inner_max_discrepancy(
                        current, xb, yb, eps, cfg.inner_steps, cfg.inner_step_size, inner_rng, one_class
                    )

            params = current.param_tensors()
            out = current.forward(x_ce, params)
            loss = cross_entropy(out.logits, yb)
            if x_prime is not None:
                loss = loss + _regulariser(current, params, xb, x_prime, yb, one_class).mean() * cfg.gamma

            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at step {state.step} (epoch {epoch}, batch {b}, eps {eps:.4g})")
            names = list(params)
            grads = dict(zip(names, backward(loss, [params[k] for k in names])))

            if state.step in cfg.lr_decay_steps:
                state.optimizer.lr *= LR_DECAY_FACTOR
                logger.info(f"step {state.step}: learning rate -> {state.optimizer.lr:.3g}")
            updated = state.optimizer.step(current.params, grads)
            if not all(np.isfinite(p).all() for p in updated.values()):
                raise NumericError(f"non-finite parameters after step {state.step} (epoch {epoch}, batch {b}, eps {eps:.4g})")

            clean_logits = out.logits.numpy() if x_ce is xb else current.logits(xb)
            clean_acc = float((clean_logits.argmax(axis=1) == yb).mean())
            state.network = current.with_params(updated)
            state.history.append(MetricRow(step=state.step, epoch=epoch, eps=eps, loss=value, clean_acc=clean_acc))
            state.step += 1

            if cfg.checkpoint_every and out_path is not None and state.step % cfg.checkpoint_every == 0:
                path = out_path / f"checkpoint_{state.step:06d}.irc"
                network_service.save(state.network, path)
                state.checkpoints.append(path)
            bar.update(1)
            bar.set_postfix(loss=f"{value:.4f}", eps=f"{eps:.3f}")
    bar.close()
    state.seconds = time.perf_counter() - started

    if out_path is not None:
        write_metrics(state.history, out_path / "metrics.csv")
        write_csv(out_path / "timing.csv", TIMING_HEADER, [[cfg.method.value, state.step, state.seconds]])
    return state


def write_metrics(history: List[MetricRow], path: Union[str, Path]) -> None:
    write_csv(path, METRICS_HEADER, [[r.step, r.epoch, r.eps, r.loss, r.clean_acc] for r in history])


def accuracy(net: Network, dataset: Dataset, batch_size: int = 256) -> float:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    hits = 0
    for start in range(0, len(dataset), batch_size):
        batch = dataset.images[start : start + batch_size].astype(default_dtype())
        hits += int((net.predict(batch) == dataset.labels[start : start + batch_size]).sum())
    return hits / len(dataset)
