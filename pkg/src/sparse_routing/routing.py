"""Router logits, the TopK indicator, MaskedSoftmax gates and seeded sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_R_THRESH = 0.1


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator for ``seed``; ``stream`` selects an independent substream."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class RouterParams:
    weight: Tensor  # (n_expert, d_model)

    @classmethod
    def init(cls, n_expert: int, d_model: int, rng: np.random.Generator, std: float = 0.02) -> RouterParams:
        w = rng.normal(0.0, std, size=(n_expert, d_model))
        return cls(Tensor(w, requires_grad=True, name="router.weight"))

    @property
    def n_expert(self) -> int:
        return self.weight.shape[0]


def router_logits(x: Tensor, params: RouterParams) -> Tensor:
    """z = R x for a token (d_model,) or each row of a batch (T, d_model)."""
    x = ad.as_tensor(x)
    w = params.weight
    if x.shape[-1] != w.shape[1]:
        raise ad.ShapeError(f"router expects d_model={w.shape[1]}, got input shape {x.shape}")
    if not np.all(np.isfinite(x.values)):
        raise ValueError("router_logits: non-finite input")
    return ad.matmul(x, ad.transpose(w))


def topk_indices(z, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, largest first; ties go to the lower index."""
    v = z.values if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    n = v.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} experts")
    order = np.argsort(-v, axis=-1, kind="stable")
    return order[..., :k]


def topk_indicator(z, k: int) -> np.ndarray:
    """Boolean mask with exactly k True entries per row (see :func:`topk_indices`)."""
    v = z.values if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    idx = topk_indices(v, k)
    mask = np.zeros(v.shape, dtype=bool)
    np.put_along_axis(mask, idx, True, axis=-1)
    return mask


def argmax_lowest(v: np.ndarray) -> np.ndarray:
    """Row-wise argmax, lowest index on ties (numpy's argmax already does this)."""
    return np.argmax(v, axis=-1)


def support_mask(z: np.ndarray, r_thresh: float) -> np.ndarray:
    """delta_i = [z* - z_i <= r (|z_i| + |z*|)], computed on raw logits; -inf entries are never in support."""
    if r_thresh < 0:
        raise ValueError("r_thresh must be >= 0")
    z = np.asarray(z, dtype=np.float64)
    finite = np.isfinite(z)
    if np.any(np.isnan(z)) or np.any(z == np.inf):
        raise ValueError("support_mask: NaN or +inf logit")
    if not np.all(finite.any(axis=-1)):
        raise ValueError("masked_softmax: every logit is -inf")
    zmax = z.max(axis=-1, keepdims=True)
    zf = np.where(finite, z, 0.0)
    return finite & (zmax - zf <= r_thresh * (np.abs(zf) + np.abs(zmax)))


@dataclass
class GateDistribution:
    probs: Tensor  # (n,) or (T, n); exactly 0 off-support
    support: np.ndarray  # bool, same shape
    r_thresh: float
    temperature: float


def masked_softmax(z, r_thresh: float = DEFAULT_R_THRESH, temperature: float = 1.0) -> GateDistribution:
    """Softmax of z / temperature restricted to the relative-threshold support of raw z.

    The support mask is a constant of the backward pass.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    z = ad.as_tensor(z)
    support = support_mask(z.values, r_thresh)
    scaled = z if temperature == 1.0 else ad.mul(z, 1.0 / temperature)
    probs = ad.softmax(ad.mask_fill(scaled, support), axis=-1)
    return GateDistribution(probs, support, float(r_thresh), float(temperature))


def inverse_cdf(probs: np.ndarray, u: np.ndarray, support: np.ndarray | None = None) -> np.ndarray:
    """Row-wise inverse-CDF draw in index order. ``u`` has one uniform per row."""
    p = np.atleast_2d(probs)
    u = np.atleast_1d(u)
    cs = np.cumsum(p, axis=-1)
    idx = (cs <= u[:, None]).sum(axis=-1)
    sup = p > 0 if support is None else np.atleast_2d(support)
    last = p.shape[-1] - 1 - np.argmax(sup[:, ::-1], axis=-1)
    # rounding can leave u just above the final cumulative sum
    idx = np.where(idx > last, last, idx)
    return idx if np.ndim(probs) == 2 else idx[0]


def sample_categorical(dist: GateDistribution, rng: np.random.Generator):
    """Draw expert indices from ``dist`` (one per row) using one uniform each."""
    p = dist.probs.values
    u = rng.random(p.shape[0] if p.ndim == 2 else 1)
    out = inverse_cdf(p, u, dist.support)
    return int(out) if p.ndim == 1 else out
