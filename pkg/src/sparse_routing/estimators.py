"""Routing strategies and their gradient estimators.

Three ways of routing a token through a bank of experts:

* GShard: softmax gates times a hard TopK mask; the mask is a constant of the
  backward pass, so the router only learns through the gate values.
* SparseMixer-v2: experts are sampled from a MaskedSoftmax; a straight-through
  construction rescales the forward output by ``max(delta_D, (1 + 2B) / 3)``
  while the backward pass sees coefficient 1 on ``h = p_D * Expert(x)``.
* SparseMixer-v2*: same forward law, temperature 2 on the gate distribution,
  ``B ~ Bernoulli(5/8)`` and backward coefficient 2.

Top-K sparse mixing repeats the Top-1 round K times, masking each winner to
-inf before the next round (sampling without replacement).

All functions work on a batch: ``x`` is (T, d) and ``z`` is (T, n). Single
tokens ``(d,)`` / ``(n,)`` are accepted and the output is squeezed back.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .routing import DEFAULT_R_THRESH, argmax_lowest, inverse_cdf, masked_softmax, topk_indices

Expert = Callable[[Tensor], Tensor]
ExpertBank = Sequence[Expert]


class EstimatorKind(str, enum.Enum):
    GSHARD = "gshard"
    SPARSEMIXER_V2 = "sparsemixer_v2"
    SPARSEMIXER_V2_STAR = "sparsemixer_v2_star"

    @property
    def is_sparsemixer(self) -> bool:
        return self is not EstimatorKind.GSHARD


_DEFAULT_TEMPERATURE = {
    EstimatorKind.GSHARD: 1.0,
    EstimatorKind.SPARSEMIXER_V2: 1.0,
    EstimatorKind.SPARSEMIXER_V2_STAR: 2.0,
}
_DEFAULT_BERNOULLI = {
    EstimatorKind.GSHARD: 0.0,
    EstimatorKind.SPARSEMIXER_V2: 0.25,
    EstimatorKind.SPARSEMIXER_V2_STAR: 0.625,
}
_BACKWARD_COEF = {
    EstimatorKind.GSHARD: 1.0,
    EstimatorKind.SPARSEMIXER_V2: 1.0,
    EstimatorKind.SPARSEMIXER_V2_STAR: 2.0,
}


@dataclass(frozen=True)
class EstimatorConfig:
    """Estimator settings. ``temperature`` and ``bernoulli_p`` default per kind when None."""

    kind: EstimatorKind = EstimatorKind.SPARSEMIXER_V2
    r_thresh: float = DEFAULT_R_THRESH
    temperature: float | None = None
    bernoulli_p: float | None = None
    jitter_epsilon: float = 0.01
    renormalize: bool = False
    inference_mode: str = "deterministic"

    def __post_init__(self):
        object.__setattr__(self, "kind", EstimatorKind(self.kind))
        if self.temperature is None:
            object.__setattr__(self, "temperature", _DEFAULT_TEMPERATURE[self.kind])
        if self.bernoulli_p is None:
            object.__setattr__(self, "bernoulli_p", _DEFAULT_BERNOULLI[self.kind])
        if not 0.0 <= self.bernoulli_p <= 1.0:
            raise ValueError(f"bernoulli_p must lie in [0, 1], got {self.bernoulli_p}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.r_thresh < 0:
            raise ValueError(f"r_thresh must be >= 0, got {self.r_thresh}")
        if self.jitter_epsilon < 0:
            raise ValueError("jitter_epsilon must be >= 0")
        if self.inference_mode not in ("deterministic", "sampled"):
            raise ValueError(f"inference_mode must be 'deterministic' or 'sampled', got {self.inference_mode!r}")

    @property
    def backward_coef(self) -> float:
        return _BACKWARD_COEF[self.kind]

    def with_(self, **changes) -> EstimatorConfig:
        return replace(self, **changes)


@dataclass(frozen=True)
class RoutingDecision:
    """One token's choice in one routing round."""

    expert: int
    gate: float
    is_argmax: bool
    bernoulli: int  # -1 when no Bernoulli was drawn (GShard, inference)
    scale: float
    masked_logits: np.ndarray


@dataclass
class RoutingTrace:
    """Columnar record of a batch's routing: arrays are (T, K), logits are (K, T, n)."""

    experts: np.ndarray
    gates: np.ndarray
    is_argmax: np.ndarray
    bernoulli: np.ndarray
    scales: np.ndarray
    round_logits: np.ndarray
    kind: EstimatorKind = EstimatorKind.SPARSEMIXER_V2
    meta: dict = field(default_factory=dict)

    @property
    def n_tokens(self) -> int:
        return self.experts.shape[0]

    @property
    def top_k(self) -> int:
        return self.experts.shape[1]

    def decision(self, token: int, round_: int = 0) -> RoutingDecision:
        return RoutingDecision(
            expert=int(self.experts[token, round_]),
            gate=float(self.gates[token, round_]),
            is_argmax=bool(self.is_argmax[token, round_]),
            bernoulli=int(self.bernoulli[token, round_]),
            scale=float(self.scales[token, round_]),
            masked_logits=self.round_logits[round_, token].copy(),
        )

    def decisions(self) -> list[list[RoutingDecision]]:
        return [[self.decision(t, k) for k in range(self.top_k)] for t in range(self.n_tokens)]


@dataclass(frozen=True)
class ForcedDraws:
    """Pre-chosen (D, B) per token and round, replacing the rng draws."""

    experts: np.ndarray  # (T, K) int
    bernoulli: np.ndarray  # (T, K) int in {0, 1}

    @classmethod
    def single(cls, expert: int, bernoulli: int) -> ForcedDraws:
        return cls(np.array([[expert]]), np.array([[bernoulli]]))


def _as_batch(x, z) -> tuple[Tensor, Tensor, bool]:
    x, z = ad.as_tensor(x), ad.as_tensor(z)
    single = z.ndim == 1
    if single:
        x = ad.reshape(x, (1,) + x.shape)
        z = ad.reshape(z, (1,) + z.shape)
    if x.ndim != 2 or z.ndim != 2 or x.shape[0] != z.shape[0]:
        raise ad.ShapeError(f"token batch mismatch: x {x.shape}, z {z.shape}")
    return x, z, single


def _unbatch(y: Tensor, single: bool) -> Tensor:
    return ad.reshape(y, y.shape[1:]) if single else y


def dispatch(
    x: Tensor,
    tokens: np.ndarray,
    chosen: np.ndarray,
    gates: Tensor,
    experts: ExpertBank,
    n_tokens: int,
    scales: np.ndarray | None = None,
    coef: float = 1.0,
) -> Tensor:
    """Sum over (token, expert) pairs of the straight-through expert contribution.

    For pair j: ``h = gates[j] * Expert_{chosen[j]}(x[tokens[j]])`` and the
    contribution is ``coef*h + detach(scales[j]*h - coef*h)``. With
    ``scales=None`` and ``coef=1`` this is the plain gated mixture.
    """
    y: Tensor | None = None
    for e in np.unique(chosen):
        sel = np.flatnonzero(chosen == e)
        rows = ad.take_rows(x, tokens[sel])
        out = experts[int(e)](rows)
        g = ad.reshape(ad.take_rows(gates, sel), (len(sel), 1))
        h = ad.mul(out, g)
        if scales is None and coef == 1.0:
            contrib = h
        else:
            s = np.ones(len(sel)) if scales is None else scales[sel]
            hv = h.values
            correction = s[:, None] * hv - coef * hv
            contrib = ad.add(ad.mul(h, coef) if coef != 1.0 else h, Tensor(correction))
        part = ad.scatter_rows(contrib, tokens[sel], n_tokens)
        y = part if y is None else ad.add(y, part)
    if y is None:
        raise ValueError("dispatch: no tokens routed")
    return y


# ---------------------------------------------------------------- GShard


def gshard_forward(
    x,
    z,
    k: int,
    experts: ExpertBank,
    rng: np.random.Generator | None = None,
    training: bool = True,
    cfg: EstimatorConfig | None = None,
    frozen_mask: np.ndarray | None = None,
) -> tuple[Tensor, RoutingTrace]:
    """Softmax gates times a hard TopK mask that the backward pass treats as constant.

    Jitter ``z * (1 + u)``, ``u ~ U(-eps, eps)``, is applied only when training,
    ``eps > 0`` and an rng is given. ``frozen_mask`` pins the TopK selection.
    """
    cfg = cfg or EstimatorConfig(kind=EstimatorKind.GSHARD)
    x, z, single = _as_batch(x, z)
    T, n = z.shape
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} experts")
    zt = z
    if training and cfg.jitter_epsilon > 0 and rng is not None:
        u = rng.uniform(-cfg.jitter_epsilon, cfg.jitter_epsilon, size=(T, n))
        zt = ad.mul(z, Tensor(1.0 + u))
    if frozen_mask is None:
        chosen = topk_indices(zt.values, k)
    else:
        fm = np.asarray(frozen_mask, dtype=bool).reshape(T, n)
        if not np.all(fm.sum(axis=-1) == k):
            raise ValueError("frozen_mask must select exactly k experts per token")
        # keep largest-first ordering among the frozen winners
        order = np.argsort(-np.where(fm, zt.values, -np.inf), axis=-1, kind="stable")
        chosen = order[:, :k]
    if cfg.renormalize:
        mask = np.zeros((T, n), dtype=bool)
        np.put_along_axis(mask, chosen, True, axis=-1)
        probs = ad.softmax(ad.mask_fill(zt, mask), axis=-1)
    else:
        probs = ad.softmax(zt, axis=-1)

    tokens = np.tile(np.arange(T), k)
    flat = chosen.T.reshape(-1)
    gates = ad.gather(probs, tokens, flat)
    y = dispatch(x, tokens, flat, gates, experts, T)

    zv = zt.values
    trace = RoutingTrace(
        experts=chosen.copy(),
        gates=probs.values[np.arange(T)[:, None], chosen],
        is_argmax=chosen == argmax_lowest(zv)[:, None],
        bernoulli=np.full((T, k), -1),
        scales=np.ones((T, k)),
        round_logits=np.broadcast_to(zv, (k, T, n)).copy(),
        kind=EstimatorKind.GSHARD,
    )
    return _unbatch(y, single), trace


# ---------------------------------------------------------------- SparseMixer


def _sparsemixer_rounds(z: Tensor, K: int, cfg: EstimatorConfig, rng, forced: ForcedDraws | None, sampled: bool, with_bernoulli: bool):
    """Run K routing rounds, masking each winner to -inf before the next one.

    Returns per-round (gates tensor (T,), experts, is_argmax, bernoulli) and the
    raw masked logits of every round.
    """
    T, n = z.shape
    if not 1 <= K <= n:
        raise ValueError(f"K={K} out of range for {n} experts")
    if forced is not None and (forced.experts.shape != (T, K) or forced.bernoulli.shape != (T, K)):
        raise ValueError(f"forced draws must be shaped {(T, K)}")
    if forced is None and sampled and rng is None:
        raise ValueError("sampling needs an rng")
    rows = np.arange(T)
    alive = np.ones((T, n), dtype=bool)
    rounds = []
    snapshots = np.empty((K, T, n))
    for k in range(K):
        zk = z if k == 0 else ad.mask_fill(z, alive)
        raw = zk.values
        snapshots[k] = raw
        dist = masked_softmax(zk, cfg.r_thresh, cfg.temperature)
        p = dist.probs.values
        if forced is not None:
            D = np.asarray(forced.experts[:, k], dtype=np.int64)
            B = np.asarray(forced.bernoulli[:, k], dtype=np.int64)
            if not np.all(dist.support[rows, D]):
                raise ValueError("forced expert lies outside the MaskedSoftmax support")
        elif sampled:
            u = rng.random((T, 2)) if with_bernoulli else rng.random((T, 1))
            D = inverse_cdf(p, u[:, 0], dist.support)
            B = (u[:, 1] < cfg.bernoulli_p).astype(np.int64) if with_bernoulli else np.full(T, -1)
        else:
            D = argmax_lowest(np.where(dist.support, raw, -np.inf))
            B = np.full(T, -1)
        gates = ad.gather(dist.probs, rows, D)
        is_argmax = D == argmax_lowest(raw)
        rounds.append((gates, D, is_argmax, B))
        alive[rows, D] = False
    return rounds, snapshots


def sparsemixer_topk_train(
    x,
    z,
    K: int,
    cfg: EstimatorConfig,
    experts: ExpertBank,
    rng: np.random.Generator | None = None,
    forced: ForcedDraws | None = None,
) -> tuple[Tensor, RoutingTrace]:
    """Training-time SparseMixer-v2 / v2* layer with K rounds of sampling without replacement.

    Per round: draw D from the MaskedSoftmax (then B from Bernoulli), set
    ``h = p_D * Expert_D(x)`` and emit ``c*h + detach(s*h - c*h)`` with
    ``s = max(delta_D, (1 + 2B) / 3)`` and ``c`` the kind's backward coefficient.
    """
    if not cfg.kind.is_sparsemixer:
        raise ValueError(f"sparsemixer_topk_train needs a SparseMixer kind, got {cfg.kind}")
    x, z, single = _as_batch(x, z)
    T, n = z.shape
    rounds, snaps = _sparsemixer_rounds(z, K, cfg, rng, forced, sampled=True, with_bernoulli=True)
    D = np.stack([r[1] for r in rounds], axis=1)
    is_argmax = np.stack([r[2] for r in rounds], axis=1)
    B = np.stack([r[3] for r in rounds], axis=1)
    scales = np.where(is_argmax, 1.0, (1.0 + 2.0 * B) / 3.0)
    gates = ad.concat([r[0] for r in rounds])
    tokens = np.tile(np.arange(T), K)
    y = dispatch(x, tokens, D.T.reshape(-1), gates, experts, T, scales=scales.T.reshape(-1), coef=cfg.backward_coef)
    trace = RoutingTrace(
        experts=D,
        gates=gates.values.reshape(K, T).T.copy(),
        is_argmax=is_argmax,
        bernoulli=B,
        scales=scales,
        round_logits=snaps,
        kind=cfg.kind,
    )
    return _unbatch(y, single), trace


def sparsemixer_v2_top1_train(x, z, cfg: EstimatorConfig, experts: ExpertBank, rng=None, forced: ForcedDraws | None = None):
    if cfg.kind is not EstimatorKind.SPARSEMIXER_V2:
        raise ValueError(f"expected a SparseMixer-v2 config, got {cfg.kind}")
    return sparsemixer_topk_train(x, z, 1, cfg, experts, rng, forced)


def sparsemixer_v2star_top1_train(x, z, cfg: EstimatorConfig, experts: ExpertBank, rng=None, forced: ForcedDraws | None = None):
    if cfg.kind is not EstimatorKind.SPARSEMIXER_V2_STAR:
        raise ValueError(f"expected a SparseMixer-v2* config, got {cfg.kind}")
    return sparsemixer_topk_train(x, z, 1, cfg, experts, rng, forced)


# ---------------------------------------------------------------- inference


def inference(
    x,
    z,
    k: int,
    cfg: EstimatorConfig,
    experts: ExpertBank,
    rng: np.random.Generator | None = None,
    mode: str | None = None,
) -> tuple[Tensor, RoutingTrace]:
    """Evaluation-time layer output.

    GShard is always deterministic and jitter-free. SparseMixer kinds either
    pick the best remaining expert each round (``deterministic``) or sample it
    from the MaskedSoftmax (``sampled``); the output is ``sum_k p_D * Expert_D``.
    """
    mode = mode or cfg.inference_mode
    if cfg.kind is EstimatorKind.GSHARD:
        if mode == "sampled":
            raise ValueError("GShard routing has deterministic inference only; sampled mode is undefined")
        return gshard_forward(x, z, k, experts, rng=None, training=False, cfg=cfg)
    if mode not in ("deterministic", "sampled"):
        raise ValueError(f"unknown inference mode {mode!r}")
    if mode == "sampled" and rng is None:
        raise ValueError("sampled inference needs an rng")
    x, z, single = _as_batch(x, z)
    T, n = z.shape
    rounds, snaps = _sparsemixer_rounds(z, k, cfg, rng, None, sampled=(mode == "sampled"), with_bernoulli=False)
    D = np.stack([r[1] for r in rounds], axis=1)
    gates = ad.concat([r[0] for r in rounds])
    tokens = np.tile(np.arange(T), k)
    y = dispatch(x, tokens, D.T.reshape(-1), gates, experts, T)
    trace = RoutingTrace(
        experts=D,
        gates=gates.values.reshape(k, T).T.copy(),
        is_argmax=np.stack([r[2] for r in rounds], axis=1),
        bernoulli=np.full((T, k), -1),
        scales=np.ones((T, k)),
        round_logits=snaps,
        kind=cfg.kind,
    )
    return _unbatch(y, single), trace


def route_train(x, z, k: int, cfg: EstimatorConfig, experts: ExpertBank, rng=None, forced: ForcedDraws | None = None):
    """Training-time layer for any estimator kind."""
    if cfg.kind is EstimatorKind.GSHARD:
        return gshard_forward(x, z, k, experts, rng=rng, training=True, cfg=cfg)
    return sparsemixer_topk_train(x, z, k, cfg, experts, rng, forced)
