"""Command-line entry point: ``sparse-routing {train,eval,analyze,gradcheck}``.

Exit codes: 0 success, 1 a gradcheck failed, 2 usage or configuration error,
3 training diverged.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .analysis import SimilarityMatrix, routing_distribution
from .balance import write_stats_csv
from .config import ConfigError, RunConfig, dump_config, load_config, parse_config
from .estimators import EstimatorKind
from .gradcheck import format_table, run_checks
from .model import load_checkpoint, model_forward, save_checkpoint
from .routing import make_rng
from .trainer import DivergenceError, evaluate, make_task, train, write_metrics_jsonl, write_summary_csv

log = logging.getLogger("sparse_routing")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
THREADS_ENV = "SPARSE_ROUTING_THREADS"

METRICS_FILE = "metrics.jsonl"
SUMMARY_FILE = "summary.csv"
CHECKPOINT_FILE = "model.ckpt"
EFFECTIVE_CONFIG_FILE = "config.effective.json"
LOAD_STATS_FILE = "load_stats.csv"


class UsageError(Exception):
    pass


def _threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / EFFECTIVE_CONFIG_FILE)
    data = make_task(cfg.task_spec())
    spec, tcfg = cfg.model_spec(), cfg.train_config()
    try:
        result = train(spec, data, tcfg)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    write_metrics_jsonl(out / METRICS_FILE, result.metrics)
    write_summary_csv(out / SUMMARY_FILE, result, tcfg)
    last = result.metrics[-1]
    save_checkpoint(out / CHECKPOINT_FILE, spec, result.params, tcfg.seed, extra={"config": cfg.effective()})
    # load stats over the full training set, deterministic routing
    fwd = model_forward(data.x, spec, result.params, None, training=False)
    write_stats_csv(out / LOAD_STATS_FILE, fwd.stats)
    print(
        f"trained {tcfg.steps} steps: loss {result.losses[0]:.6g} -> smoothed {last.smoothed_loss:.6g}; "
        f"outputs in {out}"
    )
    return EXIT_OK


# ---------------------------------------------------------------- shared checkpoint helpers


def _load_run(checkpoint: str):
    path = Path(checkpoint)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        spec, params, header = load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from exc
    cfg = parse_config(header["extra"]["config"]) if "config" in header.get("extra", {}) else RunConfig()
    return spec, params, header, cfg


def _task_for(cfg: RunConfig, spec, task_path: str | None):
    if task_path:
        p = Path(task_path)
        if not p.is_file():
            raise UsageError(f"task file not found: {p}")
        task_cfg = parse_config({"task": json.loads(p.read_text()), "model": cfg.model.model_dump()})
        task = task_cfg.task_spec()
    else:
        task = cfg.task_spec()
    if task.d_model != spec.d_model:
        raise UsageError(f"dimension mismatch: task d_model={task.d_model}, checkpoint d_model={spec.d_model}")
    return make_task(task)


def _parse_dataset(arg: str, n_clusters: int) -> tuple[str, list[int]]:
    if "=" not in arg:
        raise UsageError(f"--dataset expects LABEL=all or LABEL=c1,c2,..., got {arg!r}")
    label, sel = arg.split("=", 1)
    if sel == "all":
        return label, list(range(n_clusters))
    try:
        clusters = [int(c) for c in sel.split(",") if c]
    except ValueError:
        raise UsageError(f"bad cluster list in {arg!r}") from None
    if not clusters or any(c < 0 or c >= n_clusters for c in clusters):
        raise UsageError(f"clusters in {arg!r} must lie in [0, {n_clusters})")
    return label, clusters


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    spec, params, header, cfg = _load_run(args.checkpoint)
    data = _task_for(cfg, spec, args.task)
    if args.dataset:
        label, clusters = _parse_dataset(args.dataset, cfg.task.n_clusters)
        data = data.subset(clusters)
    else:
        label = "all"
    kind = spec.layers[0].estimator.kind
    modes = ["deterministic", "sampled"] if args.inference_mode == "both" else [
        "deterministic" if args.inference_mode == "det" else "sampled"
    ]
    if kind is EstimatorKind.GSHARD and "sampled" in modes:
        raise UsageError("GShard models route deterministically at inference; --inference-mode sampled is not available")
    seed = header["seed"] if args.seed is None else args.seed
    report: dict = {"checkpoint": str(args.checkpoint), "dataset": label, "tokens": len(data), "estimator": kind.value}
    for mode in modes:
        if mode == "deterministic":
            report["deterministic"] = evaluate(spec, params, data, "deterministic")
        else:
            draws = [evaluate(spec, params, data, "sampled", make_rng(seed, 3, i)) for i in range(args.n_samples)]
            summary = {}
            for key in draws[0]:
                vals = np.array([d[key] for d in draws])
                summary[key] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0}
            report["sampled"] = {"n_samples": args.n_samples, "seed": seed, **summary}
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(text + "\n")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------- analyze


def cmd_analyze(args) -> int:
    spec, params, header, cfg = _load_run(args.checkpoint)
    data = _task_for(cfg, spec, args.task)
    specs = args.dataset or ["all=all"]
    parsed = sorted((_parse_dataset(s, cfg.task.n_clusters) for s in specs), key=lambda t: t[0])
    labels = [lab for lab, _ in parsed]
    if len(set(labels)) != len(labels):
        raise UsageError("dataset labels must be unique")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def one(item):
        label, clusters = item
        sub = data.subset(clusters)
        return routing_distribution(spec, params, sub.x, label)

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        dists = list(pool.map(one, parsed))
    for d in dists:
        d.to_csv(out / f"routing_{d.label}.csv")
    sim = SimilarityMatrix.from_distributions(dists)
    sim.to_csv(out / "similarity.csv")
    for d in dists:
        print(f"{d.label}: {d.tokens} tokens, per-layer max share {np.round(d.fractions.max(axis=1), 4).tolist()}")
    print("similarity:")
    for lab, row in zip(sim.labels, sim.matrix):
        print(f"  {lab}: " + " ".join(f"{v:.4f}" for v in row))
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    results = run_checks(args.level)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) FAILED: {', '.join(failed)}")
        return EXIT_CHECK_FAILED
    print(f"all {len(results)} checks PASS")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparse-routing", description="Sparse-gradient MoE routing lab.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a toy MoE model from a JSON config")
    p.add_argument("--config", required=True, metavar="PATH")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--out", default="out", metavar="DIR")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under deterministic and/or sampled routing")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--dataset", metavar="LABEL=CLUSTERS", help="cluster subset, e.g. easy=0,1 (default: all)")
    p.add_argument("--task", metavar="PATH", help="JSON task section replacing the checkpoint's task")
    p.add_argument("--inference-mode", choices=("det", "sampled", "both"), default="det")
    p.add_argument("--n-samples", type=int, default=10, metavar="N")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="per-dataset routing distributions and their cosine similarity")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--dataset", action="append", metavar="LABEL=CLUSTERS", help="repeatable; LABEL=all or LABEL=c1,c2")
    p.add_argument("--task", metavar="PATH")
    p.add_argument("--out", default="analysis", metavar="DIR")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="run the finite-difference and enumeration oracle checks")
    p.add_argument("--level", choices=("fast", "full"), default="fast")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "n_samples", 1) is not None and getattr(args, "n_samples", 1) < 1:
        print("error: --n-samples must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
