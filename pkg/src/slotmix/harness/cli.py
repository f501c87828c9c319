"""Command-line entry point.

Every subcommand takes ``--config FILE.toml`` plus one flag per RunConfig
field (``--max_lr 1e-3``, ``--seeds 0,1,2``). Exit codes: 0 success,
1 a failed check or aborted run, 2 an invalid configuration.
"""
from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from ..errors import ContractViolation, DatasetFormatError, NonFiniteLossError
from ..scenes import SceneSpec, gen_dataset, oracle_fg_ari, write_dataset
from . import checks, train
from .config import FIELD_TYPES, ConfigError, RunConfig, build_config

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

COMMANDS = {
    "gen-data": "generate a synthetic scene dataset (JSONL)",
    "train-setpred": "train a set property prediction model",
    "train-discovery": "train an object discovery model",
    "compare-vanilla": "k-means vs GMM slots under a trained set-prediction head",
    "sweep-iterations": "FG-ARI of a discovery checkpoint per test-time iteration count",
    "sweep-objects": "FG-ARI of a discovery checkpoint per object count",
    "reduction-check": "check SMM against EM and SA against soft k-means",
    "grad-check": "finite-difference check of every differentiable op",
    "concept-demo": "concept library sampling on a set-prediction SMM checkpoint",
}
NEEDS_DATASET = {"train-setpred", "train-discovery", "compare-vanilla", "concept-demo"}
NEEDS_CHECKPOINT = {"sweep-iterations", "sweep-objects", "concept-demo"}


def build_parser():
    parser = argparse.ArgumentParser(prog="slotmix", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML file with RunConfig fields")
        for field_name in FIELD_TYPES:
            p.add_argument(f"--{field_name}", default=None, metavar="VALUE")
        if name == "reduction-check":
            p.add_argument("--perturb", choices=["residual", "gru"], default=None,
                           help="break the reduction on purpose (negative control)")
        if name == "grad-check":
            p.add_argument("--inject_fault", action="store_true",
                           help="add an op with a wrong backward rule (negative control)")
    return parser


def resolve_config(args):
    overrides = {f: getattr(args, f) for f in FIELD_TYPES}
    problems = []
    try:
        cfg = build_config(args.config, overrides)
    except ConfigError as exc:
        cfg = None
        problems.extend(exc.problems)
    except (OSError, ValueError) as exc:
        cfg = None
        problems.append(f"config: {exc}")
    if cfg is not None:
        if args.command in NEEDS_DATASET and not os.path.exists(cfg.dataset):
            problems.append(f"dataset: {cfg.dataset!r} does not exist")
        if args.command in NEEDS_CHECKPOINT:
            if not cfg.checkpoint:
                problems.append("checkpoint: required for this command")
            elif not os.path.exists(cfg.checkpoint):
                problems.append(f"checkpoint: {cfg.checkpoint!r} does not exist")
    if problems:
        raise ConfigError(problems)
    return cfg


def scene_spec(cfg: RunConfig):
    return SceneSpec(max_objects=cfg.max_objects, points_per_object=cfg.points_per_object,
                     background_points=cfg.background_points)


def cmd_gen_data(cfg):
    start = time.perf_counter()
    records = gen_dataset(scene_spec(cfg), cfg.n_scenes, cfg.seed)
    parent = os.path.dirname(os.path.abspath(cfg.dataset))
    os.makedirs(parent, exist_ok=True)
    write_dataset(records, cfg.dataset)
    scores = np.array([oracle_fg_ari(r) for r in records])
    rid = train.run_id("gen-data", cfg)
    rows = [(rid, "data", cfg.seed, 0, name, value) for name, value in (
        ("scenes", len(records)),
        ("mean_objects", np.mean([r.n_objects for r in records])),
        ("oracle_fg_ari_min", scores.min()),
        ("oracle_fg_ari_mean", scores.mean()),
    )]
    train._finish(cfg, "gen-data", rows, start)
    print(f"wrote {len(records)} scenes to {cfg.dataset}; "
          f"oracle FG-ARI min {scores.min():.4f} mean {scores.mean():.4f}")
    return EXIT_OK


def _print_table(result):
    for row in result.table:
        print("  " + "  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                               for k, v in row.items()))


def _print_final(result, names):
    for name in names:
        try:
            print(f"  {name} = {result.metric(name):.4f}")
        except KeyError:
            pass


def cmd_reduction(cfg, args):
    start = time.perf_counter()
    report = checks.reduction_check(cfg.instances, cfg.seed, perturb=args.perturb)
    rid = train.run_id("reduction-check", cfg)
    rows = []
    for i, (a, b) in enumerate(zip(report.smm_dev, report.sa_dev)):
        rows.append((rid, "smm", cfg.seed, i, "max_dev_em", a))
        rows.append((rid, "sa", cfg.seed, i, "max_dev_soft_kmeans", b))
    train._finish(cfg, "reduction-check", rows, start, extra={"perturb": args.perturb or "none"})
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_grad(cfg, args):
    start = time.perf_counter()
    report = checks.grad_check(seed=cfg.seed, inject_fault=args.inject_fault)
    rid = train.run_id("grad-check", cfg)
    rows = [(rid, name, cfg.seed, 0, "rel_error", err) for name, err in report.errors.items()]
    train._finish(cfg, "grad-check", rows, start)
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_FAIL


def dispatch(cfg, args):
    cmd = args.command
    if cmd == "gen-data":
        return cmd_gen_data(cfg)
    if cmd == "reduction-check":
        return cmd_reduction(cfg, args)
    if cmd == "grad-check":
        return cmd_grad(cfg, args)
    runners = {
        "train-setpred": (train.train_setpred, ["ap_inf", "ap_0.5", "ap_0.25", "ap_0.125"]),
        "train-discovery": (train.train_discovery, ["fg_ari", "fg_ari_assign", "eval_mse"]),
        "compare-vanilla": (train.compare_vanilla, []),
        "sweep-iterations": (train.sweep_iterations, []),
        "sweep-objects": (train.sweep_objects, []),
        "concept-demo": (train.concept_demo, ["empty_fraction", "set_loss_delta",
                                              "concept_purity", "purity_chance"]),
    }
    fn, names = runners[cmd]
    result = fn(cfg)
    print(f"{cmd}: {len(result.rows)} metric rows -> {os.path.join(cfg.output_dir, 'metrics.csv')}"
          f" ({result.wall_clock:.1f} s)")
    _print_final(result, names)
    _print_table(result)
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    try:
        return dispatch(cfg, args)
    except NonFiniteLossError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (ContractViolation, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
