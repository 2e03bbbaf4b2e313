"""Load-balance auxiliary loss with local or globally reduced dispatch fractions."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SCOPES = ("local", "global")


@dataclass
class LoadStats:
    """Per-expert dispatch counts and mean full-softmax gate over a set of tokens.

    ``fractions`` is counts / tokens, so it sums to ``top_k``. ``normalized`` divides
    by the number of dispatches instead and sums to 1 (the per-layer routing share).
    """

    counts: np.ndarray
    n_tokens: int
    top_k: int
    mean_gate: np.ndarray
    scope: str = "local"

    @property
    def n_expert(self) -> int:
        return len(self.counts)

    @property
    def fractions(self) -> np.ndarray:
        return self.counts / self.n_tokens

    @property
    def normalized(self) -> np.ndarray:
        return self.counts / (self.top_k * self.n_tokens)


@dataclass(frozen=True)
class BalanceConfig:
    alpha: float = 1e-2
    scope: str = "global"
    n_expert: int | None = None
    n_shards: int = 4

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}, got {self.scope!r}")
        if self.n_shards < 1:
            raise ValueError("n_shards must be >= 1")


def _experts_of(records) -> np.ndarray:
    experts = getattr(records, "experts", records)
    experts = np.asarray(experts, dtype=np.int64)
    return experts[:, None] if experts.ndim == 1 else experts


def accumulate_stats(records, z, n_expert: int | None = None, scope: str = "local") -> LoadStats:
    """Count dispatches in ``records`` (a RoutingTrace or a (T, K) index array).

    ``z`` holds the raw router logits of the same tokens; the mean gate averages
    their full softmax.
    """
    experts = _experts_of(records)
    zv = z.values if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    zv = np.atleast_2d(zv)
    T, K = experts.shape
    if T == 0:
        raise ValueError("accumulate_stats: empty batch")
    if zv.shape[0] != T:
        raise ValueError(f"records cover {T} tokens but z has {zv.shape[0]} rows")
    n = zv.shape[1] if n_expert is None else n_expert
    counts = np.bincount(experts.reshape(-1), minlength=n).astype(np.int64)
    m = zv.max(axis=1, keepdims=True)
    e = np.exp(zv - m)
    probs = e / e.sum(axis=1, keepdims=True)
    return LoadStats(counts, T, K, probs.mean(axis=0), scope)


def global_reduce(shards: Sequence[LoadStats]) -> LoadStats:
    """Sum counts and tokens across shards; token-weighted mean gate. Folds in shard order."""
    if not shards:
        raise ValueError("global_reduce: no shards")
    n, k = shards[0].n_expert, shards[0].top_k
    for s in shards:
        if s.n_expert != n:
            raise ValueError(f"inconsistent expert count across shards: {s.n_expert} vs {n}")
        if s.top_k != k:
            raise ValueError(f"inconsistent top_k across shards: {s.top_k} vs {k}")
    counts = np.zeros(n, dtype=np.int64)
    weighted = np.zeros(n)
    tokens = 0
    for s in shards:
        counts = counts + s.counts
        weighted = weighted + s.mean_gate * s.n_tokens
        tokens += s.n_tokens
    return LoadStats(counts, tokens, k, weighted / tokens, "global")


def balance_loss(stats: LoadStats, cfg: BalanceConfig, mean_gate: Tensor | None = None) -> Tensor:
    """alpha * n * sum_i f_i * mean_gate_i, with f a constant.

    ``mean_gate`` is the on-graph mean softmax; without it ``stats.mean_gate``
    is used and the result carries no gradient.
    """
    n = stats.n_expert
    if cfg.n_expert is not None and cfg.n_expert != n:
        raise ValueError(f"config expects {cfg.n_expert} experts, stats have {n}")
    g = Tensor(stats.mean_gate) if mean_gate is None else mean_gate
    if g.shape != (n,):
        raise ad.ShapeError(f"mean gate shape {g.shape} != ({n},)")
    f = Tensor(stats.fractions)
    return ad.mul(ad.reduce_sum(ad.mul(f, g)), cfg.alpha * n)


def shard_bounds(n_tokens: int, n_shards: int) -> list[tuple[int, int]]:
    """Contiguous near-equal batch splits standing in for data-parallel ranks."""
    n_shards = max(1, min(n_shards, n_tokens))
    edges = np.linspace(0, n_tokens, n_shards + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def layer_balance_loss(z: Tensor, records, cfg: BalanceConfig) -> tuple[Tensor, LoadStats]:
    """Balance loss for one layer's batch, split into ``cfg.n_shards`` simulated ranks.

    Global scope reduces the dispatch counts across ranks before forming the
    loss; local scope averages the per-rank losses. The returned stats are
    always the global reduction (for logging).
    """
    experts = _experts_of(records)
    T, n = z.shape
    probs = ad.softmax(z, axis=-1)
    bounds = shard_bounds(T, cfg.n_shards)
    shard_stats = [accumulate_stats(experts[a:b], z.values[a:b], n, scope=f"local:{i}") for i, (a, b) in enumerate(bounds)]
    total = global_reduce(shard_stats)
    if cfg.scope == "global":
        loss = balance_loss(total, cfg, ad.mean(probs, axis=0))
    else:
        losses = []
        for (a, b), s in zip(bounds, shard_stats):
            g = ad.mean(ad.take_rows(probs, np.arange(a, b)), axis=0)
            losses.append(ad.mul(balance_loss(s, cfg, g), (b - a) / T))
        loss = losses[0]
        for extra in losses[1:]:
            loss = ad.add(loss, extra)
    return loss, total


STATS_CSV_HEADER = ("layer", "expert", "count", "fraction", "mean_gate")


def write_stats_csv(path: str | Path, per_layer: Iterable[LoadStats]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATS_CSV_HEADER)
        for layer, s in enumerate(per_layer):
            for i in range(s.n_expert):
                w.writerow((layer, i, int(s.counts[i]), repr(float(s.fractions[i])), repr(float(s.mean_gate[i]))))


def read_stats_csv(path: str | Path, top_k: int) -> list[LoadStats]:
    rows: dict[int, list[tuple[int, int, float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != STATS_CSV_HEADER:
            raise ValueError(f"unexpected header {reader.fieldnames}")
        for r in reader:
            rows.setdefault(int(r["layer"]), []).append(
                (int(r["expert"]), int(r["count"]), float(r["fraction"]), float(r["mean_gate"]))
            )
    out = []
    for layer in sorted(rows):
        entries = sorted(rows[layer])
        counts = np.array([c for _, c, _, _ in entries], dtype=np.int64)
        tokens = int(counts.sum() // top_k)
        out.append(LoadStats(counts, tokens, top_k, np.array([g for *_, g in entries]), "global"))
    return out
