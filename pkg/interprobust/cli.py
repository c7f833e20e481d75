"""
cli.py - Command line: train, attack, eval, visualize, serve

    python -m interprobust train --config run.cfg --out runs/int
    python -m interprobust eval  --config run.cfg --seed 1

Exit codes: 0 ok, 1 config, 2 I/O, 3 numeric failure. stdout gets one summary line;
diagnostics go to stderr.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from interprobust.config import settings
from interprobust.exceptions import AttackError, ConfigError, InterprobustError
from interprobust.models import Dataset, DiscrepancySpec, RunConfig
from interprobust.services import (
    attack_service,
    data_service,
    eval_service,
    network_service,
    train_service,
)
from interprobust.services.discrepancy_service import generic_discrepancy, kendall_tau
from interprobust.services.interpret_service import cam, to_grid
from interprobust.services.network_service import Network
from interprobust.utils.formats import export_pair, read_run_config, write_csv, write_pgm

logger = logging.getLogger("interprobust")

ATTACK_HEADER = ["index", "label", "prediction", "success", "margin", "discrepancy", "tau", "lambda_used", "topk_displaced"]


# =====================================================
# === HELPERS ===
# =====================================================

def _require(cfg: RunConfig, *keys: str) -> None:
    for key in keys:
        if getattr(cfg, key) in (None, ""):
            raise ConfigError("required for this command", key)


def load_data(cfg: RunConfig, split: str) -> Dataset:
    if cfg.dataset == "synth":
        if cfg.synth_n % 2:
            raise ConfigError("must be even", "synth_n")
        full = data_service.synth_two_class(cfg.synth_n, cfg.synth_size, seed=cfg.seed)
        train, test = data_service.split_dataset(full)
        data = train if split == "train" else test
    else:
        images, labels = f"{split}_images", f"{split}_labels"
        _require(cfg, images, labels)
        data = data_service.load_idx(getattr(cfg, images), getattr(cfg, labels), split=split)
    if split == "train" and cfg.train_subset is not None:
        data = data.subset(cfg.train_subset, seed=cfg.seed)
    return data


def load_network(cfg: RunConfig) -> Network:
    _require(cfg, "checkpoint")
    return network_service.load(cfg.checkpoint)


def out_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.out_dir or settings.OUTPUT_DIR)
    path.mkdir(parents=True, exist_ok=True)
    return path


def threads(cfg: RunConfig) -> int:
    return cfg.threads or settings.thread_count()


# =====================================================
# === COMMANDS ===
# =====================================================

def cmd_train(cfg: RunConfig) -> str:
    train = load_data(cfg, "train")
    test = load_data(cfg, "test") if cfg.dataset == "synth" or cfg.test_images else None
    out = out_dir(cfg)

    num_classes = max(train.num_classes, 2)
    net = network_service.build(cfg.arch, train.images.shape[1:], num_classes, seed=cfg.seed)
    state = train_service.train(net, train, cfg.train_config(), out_dir=out)
    checkpoint = out / "model.irc"
    network_service.save(state.network, checkpoint)

    scored = test if test is not None else train
    acc = train_service.accuracy(state.network, scored)
    return f"✅ train: method={cfg.method.value} steps={state.step} clean_acc={acc:.4f} time={state.seconds:.1f}s checkpoint={checkpoint}"


def _attack_row(cfg: RunConfig, net: Network, spec: DiscrepancySpec, x: np.ndarray, y: int) -> Tuple[list, Optional[object]]:
    base = [y, None, False, None, None, None, None, None]
    try:
        if cfg.attack == "pgd":
            outcome = attack_service.pgd(net, x, y, cfg.attack_config())
            if outcome.success:
                bound = spec.bind(y, outcome.prediction if outcome.prediction != y else None)
                outcome = outcome.model_copy(update={"discrepancy": generic_discrepancy(bound, net, x, outcome.x_adv)})
        elif cfg.attack == "aai":
            outcome = attack_service.aai(
                net, x, y, cfg.eps, cfg.lam, cfg.aai_objective, cfg.topk, cfg.steps, cfg.step_size, cfg.seed
            )
        else:
            target = cfg.target if cfg.target is not None and cfg.target != y else attack_service.runner_up(net, x, y)
            if cfg.attack == "isa":
                outcome = attack_service.isa(net, x, y, target, cfg.eps, cfg.tau, cfg.lam, cfg.steps, None, spec)
            else:
                outcome = attack_service.isa_bisect(
                    net, x, y, target, cfg.eps, cfg.tau, (0.0, cfg.lam_hi), cfg.bisect_iters, cfg.steps, None, spec
                )
    except AttackError as e:
        logger.warning(f"attack skipped: {e}")
        return base, None

    tau = kendall_tau(cam(net, x, y), cam(net, outcome.x_adv, y))
    row = [y, outcome.prediction, outcome.success, outcome.margin, outcome.discrepancy, tau, outcome.lambda_used, outcome.topk_displaced]
    return row, outcome


def cmd_attack(cfg: RunConfig) -> str:
    net = load_network(cfg)
    data = eval_service.sample(load_data(cfg, "test"), cfg.n_samples)
    spec = DiscrepancySpec.parse(cfg.spec)
    out = out_dir(cfg)

    results = eval_service.fan_out(
        lambda i: _attack_row(cfg, net, spec, data.images[i], int(data.labels[i])), list(range(len(data))), threads(cfg)
    )
    rows = [[i, *row] for i, (row, _) in enumerate(results)]
    path = write_csv(out / f"attack_{cfg.attack}.csv", ATTACK_HEADER, rows)

    if cfg.export_maps:
        size = net.input_shape[1:]
        for i, (row, outcome) in enumerate(results):
            if outcome is None:
                continue
            y = row[0]
            benign = to_grid(net, cam(net, data.images[i], y))
            adversarial = to_grid(net, cam(net, outcome.x_adv, y))
            export_pair(out / "maps" / f"example_{i:04d}", benign, adversarial, size)

    successes = sum(1 for row, _ in results if row[2])
    return f"✅ attack: {cfg.attack} success={successes}/{len(rows)} eps={cfg.eps} -> {path}"


def cmd_eval(cfg: RunConfig) -> str:
    out = out_dir(cfg)
    width = threads(cfg)
    needs_net = any(s != "gamma" for s in cfg.sweeps)
    net = load_network(cfg) if needs_net else None
    test = load_data(cfg, "test")
    written: List[str] = []

    for name in cfg.sweeps:
        if name == "ata":
            result = eval_service.ata_sweep(net, test, cfg.eps_list, cfg.steps, cfg.n_samples, cfg.step_size, width)
        elif name == "multistep":
            result = eval_service.multistep_sweep(net, test, cfg.step_list, cfg.eps, cfg.n_samples, cfg.step_size, width)
        elif name == "aai":
            result = eval_service.aai_sweep(
                net, test, cfg.eps_list, cfg.n_samples, cfg.lam, cfg.aai_objective, cfg.topk, cfg.steps, cfg.step_size, width
            )
        elif name == "nds":
            specs = [DiscrepancySpec.parse(s) for s in cfg.specs]
            result = eval_service.nds_table(
                net, test, specs, cfg.n_samples, cfg.eps, cfg.steps, cfg.step_size, cfg.tau,
                (0.0, cfg.lam_hi), cfg.bisect_iters, cfg.steps, width,
            )
        elif name == "isa":
            specs = [DiscrepancySpec.parse(s) for s in cfg.specs]
            result = eval_service.isa_eps_sweep(
                net, test, specs, cfg.eps_list, cfg.n_samples, cfg.lam, cfg.tau, cfg.steps, width
            )
        elif name == "prop1":
            table = eval_service.prop1_deciles(net, test, cfg.n_samples, cfg.eps, cfg.steps, cfg.step_size, width)
            rows = [[lvl, d, m] for lvl, d, m in zip(table.levels, table.discrepancy, table.margin)]
            write_csv(out / "sweep_prop1.csv", ["level", "discrepancy", "margin"], rows)
            logger.info(f"bound checked on {table.n_checked} attacks, median ratio {table.median_ratio:.3f}")
            written.append(name)
            continue
        else:
            train = load_data(cfg, "train")
            result = eval_service.gamma_sweep(
                train, test, cfg.gamma_list, cfg.train_config(), cfg.arch, cfg.eps, cfg.steps, cfg.n_samples, width
            )
        write_csv(out / f"sweep_{name}.csv", result.header(), result.rows())
        written.append(name)
    return f"✅ eval: {', '.join(written)} -> {out}"


def cmd_visualize(cfg: RunConfig) -> str:
    net = load_network(cfg)
    seed_image = eval_service.sample(load_data(cfg, "test"), 1).images[0]
    image = eval_service.visualize_features(net, seed_image, cfg.neuron_index, cfg.vis_steps, cfg.vis_step)
    gain = eval_service.activation_gain(net, seed_image, image, cfg.neuron_index)

    out = out_dir(cfg)
    for tag, img in (("seed", seed_image), ("features", image)):
        gray = np.rint(np.clip(img.mean(axis=0), 0, 1) * 255).astype(np.uint8)
        write_pgm(out / f"neuron_{cfg.neuron_index:03d}_{tag}.pgm", gray)
    return f"✅ visualize: neuron={cfg.neuron_index} activation {gain['before']:.4f} -> {gain['after']:.4f}"


def cmd_serve(cfg: RunConfig, host: str, port: int) -> str:
    import uvicorn

    if cfg.checkpoint:
        settings.SERVE_CHECKPOINT = cfg.checkpoint
    uvicorn.run("interprobust.main:app", host=host, port=port)
    return "👋 serve: stopped"


# =====================================================
# === ENTRY POINT ===
# =====================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="run config (key = value lines)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", type=str, default=None, help="output directory")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")

    parser = argparse.ArgumentParser(prog="interprobust", description="Interpretability-aware robustness toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a network")
    sub.add_parser("attack", parents=[common], help="attack sampled test points")
    sub.add_parser("eval", parents=[common], help="run evaluation sweeps")
    sub.add_parser("visualize", parents=[common], help="feature visualisation of one channel")
    serve = sub.add_parser("serve", parents=[common], help="HTTP inspection API")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def configure_logging() -> None:
    logging.basicConfig(
        stream=sys.stderr,
        level=settings.LOG_LEVEL.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()
    overrides: Dict[str, object] = {"seed": args.seed, "out_dir": args.out, "threads": args.threads}

    try:
        cfg = read_run_config(args.config, overrides)
        if args.command == "train":
            summary = cmd_train(cfg)
        elif args.command == "attack":
            summary = cmd_attack(cfg)
        elif args.command == "eval":
            summary = cmd_eval(cfg)
        elif args.command == "visualize":
            summary = cmd_visualize(cfg)
        else:
            summary = cmd_serve(cfg, args.host, args.port)
    except InterprobustError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return 2

    print(summary)
    return 0
