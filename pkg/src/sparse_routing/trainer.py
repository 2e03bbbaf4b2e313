"""Synthetic expert-specialization tasks and a deterministic Adam training loop."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .balance import BalanceConfig
from .estimators import EstimatorConfig, EstimatorKind
from .model import ModelParams, ToyModelSpec, init_params, model_forward, task_loss
from .routing import make_rng

log = logging.getLogger(__name__)

TASK_KINDS = ("cluster-regression", "cluster-classification")
SMOOTH_WINDOW = 100
# a finite loss this many times the first step's also counts as divergence
DIVERGENCE_FACTOR = 1e4


class DivergenceError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"training diverged at step {step} (loss={value})")
        self.step = step
        self.value = value


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "cluster-regression"
    n_clusters: int = 8
    d_model: int = 16
    d_out: int = 4
    samples_per_cluster: int = 256
    noise_std: float = 0.0
    mean_scale: float = 3.0
    cluster_weights: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        if self.cluster_weights is not None:
            object.__setattr__(self, "cluster_weights", tuple(float(w) for w in self.cluster_weights))
            if len(self.cluster_weights) != self.n_clusters or min(self.cluster_weights) <= 0:
                raise ValueError("cluster_weights needs one positive weight per cluster")


@dataclass
class Dataset:
    x: np.ndarray  # (N, d_model)
    y: np.ndarray  # (N, d_out) targets or (N,) class labels
    cluster: np.ndarray  # (N,)
    means: np.ndarray  # (n_clusters, d_model)
    maps: np.ndarray  # (n_clusters, d_out, d_model)
    kind: str

    def __len__(self) -> int:
        return len(self.x)

    def subset(self, clusters: Sequence[int]) -> Dataset:
        keep = np.isin(self.cluster, list(clusters))
        return replace(self, x=self.x[keep], y=self.y[keep], cluster=self.cluster[keep])


def make_task(spec: TaskSpec) -> Dataset:
    """Cluster c: x ~ N(mu_c, I), target A_c x (+ noise); classification takes the argmax class."""
    rng = make_rng(spec.seed, 7)
    means = rng.normal(0.0, spec.mean_scale, size=(spec.n_clusters, spec.d_model))
    maps = rng.normal(0.0, 1.0 / np.sqrt(spec.d_model), size=(spec.n_clusters, spec.d_out, spec.d_model))
    if spec.cluster_weights is None:
        sizes = np.full(spec.n_clusters, spec.samples_per_cluster)
    else:
        w = np.asarray(spec.cluster_weights) / sum(spec.cluster_weights)
        sizes = np.maximum(1, np.round(w * spec.samples_per_cluster * spec.n_clusters)).astype(int)
    cluster = np.repeat(np.arange(spec.n_clusters), sizes)
    x = means[cluster] + rng.normal(size=(len(cluster), spec.d_model))
    y = np.einsum("nod,nd->no", maps[cluster], x)
    if spec.noise_std > 0:
        y = y + rng.normal(0.0, spec.noise_std, size=y.shape)
    if spec.kind == "cluster-classification":
        y = np.argmax(y, axis=1)
    return Dataset(x, y, cluster, means, maps, spec.kind)


def nearest_mean_clusters(data: Dataset) -> np.ndarray:
    d2 = ((data.x[:, None, :] - data.means[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=1)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    alpha: float = 1e-2
    balance_scope: str = "global"
    n_shards: int = 4
    seed: int = 0
    recipe: str = "main"
    eval_interval: int = 100

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be positive")
        BalanceConfig(self.alpha, self.balance_scope, None, self.n_shards)


@dataclass
class MetricsRecord:
    step: int
    task_loss: float
    smoothed_loss: float
    balance_loss: float
    max_fraction: list[float]
    routing_entropy: list[float]
    wall_time: float = field(default=0.0, compare=False)

    def to_json(self) -> dict:
        # wall time stays out of the files so reruns are byte-identical
        d = asdict(self)
        d.pop("wall_time")
        return d


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list[MetricsRecord]
    losses: np.ndarray  # task loss at every step
    final_fractions: list[np.ndarray]  # per-layer normalized dispatch share over the last window

    def smoothed(self, window: int = SMOOTH_WINDOW) -> np.ndarray:
        return trailing_mean(self.losses, window)


def trailing_mean(values: np.ndarray, window: int) -> np.ndarray:
    c = np.cumsum(np.concatenate([[0.0], values]))
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


class Adam:
    def __init__(self, params: Sequence[ad.Tensor], lr: float, beta1: float, beta2: float, eps: float):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self, grads: ad.Gradients) -> None:
        self.t += 1
        if self.lr == 0.0:
            return
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            g = grads[p]
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p.values = p.values - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def with_balance(spec: ToyModelSpec, cfg: TrainConfig) -> ToyModelSpec:
    """Copy of ``spec`` whose layers use the training config's balance settings."""
    layers = tuple(
        replace(ls, balance=BalanceConfig(cfg.alpha, cfg.balance_scope, ls.n_expert, cfg.n_shards)) for ls in spec.layers
    )
    return replace(spec, layers=layers)


def _entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def train(
    spec: ToyModelSpec,
    data: Dataset,
    cfg: TrainConfig,
    on_metrics: Callable[[MetricsRecord], None] | None = None,
    params: ModelParams | None = None,
) -> TrainResult:
    """Adam on task loss + balance loss; metrics every ``eval_interval`` steps and at the end.

    Fully determined by ``cfg.seed``: streams 0, 1 and 2 drive parameter init,
    batch sampling and routing draws respectively.
    """
    spec = with_balance(spec, cfg)
    if params is None:
        params = init_params(spec, make_rng(cfg.seed, 0))
    batch_rng = make_rng(cfg.seed, 1)
    route_rng = make_rng(cfg.seed, 2)
    opt = Adam(params.tensors(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    losses = np.zeros(cfg.steps)
    counts = [np.zeros(ls.n_expert) for ls in spec.layers]
    metrics: list[MetricsRecord] = []
    t0 = time.perf_counter()
    window_start = max(0, cfg.steps - SMOOTH_WINDOW)
    for step in range(cfg.steps):
        idx = batch_rng.integers(0, len(data), size=cfg.batch_size)
        out = model_forward(data.x[idx], spec, params, route_rng, training=True)
        tl = task_loss(out.outputs, data.y[idx], spec.head)
        bl = out.balance_total
        total = ad.add(tl, bl)
        value = total.item()
        if not np.isfinite(value) or (step > 0 and value > DIVERGENCE_FACTOR * max(losses[0], 1e-12)):
            raise DivergenceError(step, value)
        losses[step] = tl.item()
        opt.step(ad.backward(total))
        if step >= window_start:
            for c, st in zip(counts, out.stats):
                c += st.counts
        if step % cfg.eval_interval == 0 or step == cfg.steps - 1:
            shares = [st.normalized for st in out.stats]
            rec = MetricsRecord(
                step=step,
                task_loss=float(losses[step]),
                smoothed_loss=float(losses[max(0, step - SMOOTH_WINDOW + 1) : step + 1].mean()),
                balance_loss=float(bl.item()),
                max_fraction=[float(s.max()) for s in shares],
                routing_entropy=[_entropy(s) for s in shares],
                wall_time=time.perf_counter() - t0,
            )
            metrics.append(rec)
            if on_metrics is not None:
                on_metrics(rec)
            log.debug("step %d loss %.6g smoothed %.6g", step, rec.task_loss, rec.smoothed_loss)
    final = [c / c.sum() for c in counts]
    return TrainResult(params, metrics, losses, final)


# ---------------------------------------------------------------- evaluation


def evaluate(
    spec: ToyModelSpec,
    params: ModelParams,
    data: Dataset,
    mode: str = "deterministic",
    rng: np.random.Generator | None = None,
) -> dict:
    out = model_forward(data.x, spec, params, rng, training=False, inference_mode=mode)
    loss = task_loss(out.outputs, data.y, spec.head).item()
    report = {"loss": loss}
    if spec.head == "classification":
        report["accuracy"] = float(np.mean(np.argmax(out.outputs.values, axis=1) == data.y))
    return report


# ---------------------------------------------------------------- recipes


RECIPES: dict[str, dict] = {
    "main": {"kind": EstimatorKind.SPARSEMIXER_V2, "balance_scope": "global"},
    "main-v2star": {"kind": EstimatorKind.SPARSEMIXER_V2_STAR, "balance_scope": "global"},
    "control": {"kind": EstimatorKind.GSHARD, "balance_scope": "local"},
}


def recipe(name: str, spec: ToyModelSpec, cfg: TrainConfig, estimator: EstimatorConfig | None = None) -> tuple[ToyModelSpec, TrainConfig]:
    """Apply a named recipe's estimator kind and balance scope."""
    if name not in RECIPES:
        raise ValueError(f"unknown recipe {name!r}; known: {sorted(RECIPES)}")
    r = RECIPES[name]
    base = estimator or spec.layers[0].estimator
    est = EstimatorConfig(
        kind=r["kind"],
        r_thresh=base.r_thresh,
        jitter_epsilon=base.jitter_epsilon,
        renormalize=base.renormalize,
    )
    layers = tuple(replace(ls, estimator=est) for ls in spec.layers)
    return replace(spec, layers=layers), replace(cfg, balance_scope=r["balance_scope"], recipe=name)


@dataclass
class RecipeRun:
    label: str
    seed: int
    result: TrainResult


def compare_recipes(
    runs: Sequence[tuple[str, ToyModelSpec, TrainConfig]],
    data: Dataset,
    seeds: Sequence[int],
) -> list[RecipeRun]:
    """Train every (label, spec, config) on every seed of a shared grid."""
    out = []
    for label, spec, cfg in runs:
        for s in seeds:
            out.append(RecipeRun(label, s, train(spec, data, replace(cfg, seed=s))))
    return out


COMPARISON_HEADER = ("recipe", "seed", "step", "task_loss", "smoothed_loss")


def write_comparison_csv(path: str | Path, runs: Sequence[RecipeRun], every: int = 1) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARISON_HEADER)
        for r in runs:
            sm = r.result.smoothed()
            for step in range(0, len(sm), every):
                w.writerow((r.label, r.seed, step, repr(float(r.result.losses[step])), repr(float(sm[step]))))


def read_comparison_csv(path: str | Path) -> dict[tuple[str, int], np.ndarray]:
    curves: dict[tuple[str, int], list[float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            curves.setdefault((row["recipe"], int(row["seed"])), []).append(float(row["smoothed_loss"]))
    return {k: np.array(v) for k, v in curves.items()}


# ---------------------------------------------------------------- files


def write_metrics_jsonl(path: str | Path, metrics: Sequence[MetricsRecord]) -> None:
    with open(path, "w") as fh:
        for m in metrics:
            fh.write(json.dumps(m.to_json(), sort_keys=True) + "\n")


SUMMARY_HEADER = ("recipe", "seed", "steps", "initial_loss", "final_smoothed_loss", "layer", "max_fraction", "routing_entropy")


def write_summary_csv(path: str | Path, result: TrainResult, cfg: TrainConfig) -> None:
    sm = result.smoothed()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for layer, frac in enumerate(result.final_fractions):
            w.writerow(
                (
                    cfg.recipe,
                    cfg.seed,
                    cfg.steps,
                    repr(float(result.losses[0])),
                    repr(float(sm[-1])),
                    layer,
                    repr(float(frac.max())),
                    repr(_entropy(frac)),
                )
            )
