"""Brute-force references for the routing estimators.

Everything here is deliberately independent of the estimator code it checks:
expected losses, exact gradients and the closed-form estimator formulas are
plain numpy, and only :func:`enumerate_estimator_expectation` runs the
training layer (with forced draws) through the autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .estimators import EstimatorConfig, EstimatorKind, ExpertBank, ForcedDraws, sparsemixer_topk_train

MAX_ENUM_EXPERTS = 8
DEFAULT_FD_STEP = 1e-6


def relative_error(a, b, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a||, ||b||, floor) in the 2-norm."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


# ---------------------------------------------------------------- downstream functions


class Downstream:
    """Scalar function f(h) of the layer output, on the graph and in numpy."""

    def value(self, h: Tensor) -> Tensor:
        raise NotImplementedError

    def value_np(self, h: np.ndarray) -> float:
        raise NotImplementedError

    def grad_np(self, h: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass
class LinearDownstream(Downstream):
    """f(h) = w . h + c, so f' is the constant w."""

    w: np.ndarray
    c: float = 0.0

    def value(self, h):
        return ad.add(ad.reduce_sum(ad.mul(h, Tensor(self.w))), self.c)

    def value_np(self, h):
        return float(self.w @ h + self.c)

    def grad_np(self, h):
        return np.array(self.w, dtype=np.float64)


@dataclass
class QuadraticDownstream(Downstream):
    """f(h) = 0.5 ||A h - t||^2."""

    A: np.ndarray
    t: np.ndarray

    def value(self, h):
        r = ad.sub(ad.matmul(Tensor(self.A), h), Tensor(self.t))
        return ad.mul(ad.reduce_sum(ad.mul(r, r)), 0.5)

    def value_np(self, h):
        r = self.A @ h - self.t
        return float(0.5 * r @ r)

    def grad_np(self, h):
        return self.A.T @ (self.A @ h - self.t)


@dataclass
class SiluDownstream(Downstream):
    """f(h) = sum_j w_j silu(h_j) + 0.5 * ||h||^2 * q."""

    w: np.ndarray
    q: float = 0.3

    def value(self, h):
        return ad.add(ad.reduce_sum(ad.mul(ad.silu(h), Tensor(self.w))), ad.mul(ad.reduce_sum(ad.mul(h, h)), 0.5 * self.q))

    def value_np(self, h):
        s = 1.0 / (1.0 + np.exp(-h))
        return float(self.w @ (h * s) + 0.5 * self.q * h @ h)

    def grad_np(self, h):
        s = 1.0 / (1.0 + np.exp(-h))
        return self.w * (s + h * s * (1.0 - s)) + self.q * h


# ---------------------------------------------------------------- numpy gates


def _check_n(n: int) -> None:
    if n > MAX_ENUM_EXPERTS:
        raise ValueError(f"enumeration limited to n <= {MAX_ENUM_EXPERTS}, got {n}")


def gate_probs(z: np.ndarray, r_thresh: float, temperature: float) -> tuple[np.ndarray, np.ndarray]:
    """MaskedSoftmax written out term by term: returns (p, support)."""
    z = np.asarray(z, dtype=np.float64)
    finite = np.isfinite(z)
    zstar = max(v for v, ok in zip(z, finite) if ok)
    support = np.array([bool(ok) and (zstar - v <= r_thresh * (abs(v) + abs(zstar))) for v, ok in zip(z, finite)])
    p = np.zeros_like(z)
    m = max(z[i] / temperature for i in range(len(z)) if support[i])
    for i in range(len(z)):
        if support[i]:
            p[i] = np.exp(z[i] / temperature - m)
    return p / p.sum(), support


def gate_jacobian(p: np.ndarray, support: np.ndarray, temperature: float) -> np.ndarray:
    """J[i, j] = d p_i / d z_j with the support held fixed."""
    ps = np.where(support, p, 0.0)
    return (np.diag(ps) - np.outer(ps, ps)) / temperature


def expert_outputs(x, experts: ExpertBank) -> np.ndarray:
    """Expert(x, w_i) for every expert, as an (n, d_out) array of constants."""
    xt = Tensor(np.asarray(ad.as_tensor(x).values)[None, :])
    return np.stack([np.asarray(e(xt).values)[0] for e in experts])


# ---------------------------------------------------------------- expected losses


def expected_loss(objective: str, x, z, experts: ExpertBank, f: Downstream, cfg: EstimatorConfig) -> float:
    """sum_i f(p_i * E_i) * p_i over the support, with p the configured MaskedSoftmax.

    The "full" and "detached" objectives share this value; they differ only in how
    :func:`expected_loss_graph` differentiates it.
    """
    if objective not in ("full", "detached"):
        raise ValueError(f"unknown objective {objective!r}")
    zv = np.asarray(z, dtype=np.float64)
    _check_n(len(zv))
    p, support = gate_probs(zv, cfg.r_thresh, cfg.temperature)
    E = expert_outputs(x, experts)
    return float(sum(f.value_np(p[i] * E[i]) * p[i] for i in range(len(zv)) if support[i]))


def expected_loss_graph(objective: str, z: Tensor, E: np.ndarray, f: Downstream, cfg: EstimatorConfig) -> Tensor:
    """The same expected loss on the autodiff graph; "detached" detaches the gate inside f."""
    from .routing import masked_softmax

    dist = masked_softmax(z, cfg.r_thresh, cfg.temperature)
    total = None
    for i in np.flatnonzero(dist.support):
        pi = ad.gather(ad.reshape(dist.probs, (1, -1)), [0], [i])
        inner = ad.detach(pi) if objective == "detached" else pi
        term = ad.mul(f.value(ad.mul(Tensor(E[i]), ad.reshape(inner, ()))), ad.reshape(pi, ()))
        total = term if total is None else ad.add(total, term)
    return total


def exact_gradient(x, z, experts: ExpertBank, f: Downstream, cfg: EstimatorConfig, baseline: bool = False) -> np.ndarray:
    """Analytic d/dz of the full expected loss; ``baseline`` subtracts f(0) from the score term."""
    zv = np.asarray(z, dtype=np.float64)
    _check_n(len(zv))
    p, support = gate_probs(zv, cfg.r_thresh, cfg.temperature)
    J = gate_jacobian(p, support, cfg.temperature)
    E = expert_outputs(x, experts)
    b = f.value_np(np.zeros(E.shape[1])) if baseline else 0.0
    g = np.zeros_like(zv)
    for i in np.flatnonzero(support):
        h = p[i] * E[i]
        g += p[i] * (f.grad_np(h) @ E[i]) * J[i] + (f.value_np(h) - b) * J[i]
    return g


# ---------------------------------------------------------------- finite differences


def fd_gradient(fn: Callable[[np.ndarray], float], theta, h: float = DEFAULT_FD_STEP) -> np.ndarray:
    """Central differences (f(theta + h e_j) - f(theta - h e_j)) / 2h over every entry of theta."""
    if h <= 0:
        raise ValueError("step must be positive")
    theta = np.array(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        old = flat[j]
        flat[j] = old + h
        up = fn(theta.copy())
        flat[j] = old - h
        down = fn(theta.copy())
        flat[j] = old
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {j}")
        gflat[j] = (up - down) / (2.0 * h)
    return grad


# ---------------------------------------------------------------- estimator expectations


@dataclass(frozen=True)
class OutcomeWeight:
    expert: int
    bernoulli: int
    mass: float


def outcome_weights(z, cfg: EstimatorConfig) -> list[OutcomeWeight]:
    """Probability of every (D, B) pair, in (D, B) lexicographic order."""
    p, support = gate_probs(np.asarray(z, dtype=np.float64), cfg.r_thresh, cfg.temperature)
    pb = cfg.bernoulli_p
    return [
        OutcomeWeight(int(d), b, float(p[d] * (pb if b else 1.0 - pb)))
        for d in np.flatnonzero(support)
        for b in (0, 1)
    ]


def _require_sparsemixer(cfg: EstimatorConfig) -> None:
    if not cfg.kind.is_sparsemixer:
        raise ValueError("GShard has no sampling measure to enumerate")


def enumerate_estimator_expectation(x, z, cfg: EstimatorConfig, experts: ExpertBank, f: Downstream) -> np.ndarray:
    """Exact expectation of the per-sample router gradient of the training layer.

    Runs the layer once per (D, B) with forced draws, backpropagates f(y) to z
    and weights by p_D * P(B).
    """
    _require_sparsemixer(cfg)
    zv = np.asarray(z, dtype=np.float64)
    _check_n(len(zv))
    total = np.zeros_like(zv)
    for ow in outcome_weights(zv, cfg):
        if ow.mass == 0.0:
            continue
        zt = Tensor(zv, requires_grad=True)
        y, _ = sparsemixer_topk_train(x, zt, 1, cfg, experts, forced=ForcedDraws.single(ow.expert, ow.bernoulli))
        total += ow.mass * ad.backward(f.value(y))[zt]
    return total


def closed_form_estimator(x, z, cfg: EstimatorConfig, experts: ExpertBank, f: Downstream) -> np.ndarray:
    """The estimator formula evaluated directly.

    sum_D p_D * sum_B P(B) * c * <f'(s p_D E_D), E_D> * dp_D/dz with
    s = (1 + 2 max(B, delta_D)) / 3, c = 2 (v2*) or 1 (v2).
    """
    _require_sparsemixer(cfg)
    zv = np.asarray(z, dtype=np.float64)
    _check_n(len(zv))
    p, support = gate_probs(zv, cfg.r_thresh, cfg.temperature)
    J = gate_jacobian(p, support, cfg.temperature)
    E = expert_outputs(x, experts)
    top = int(np.argmax(zv))
    c = 2.0 if cfg.kind is EstimatorKind.SPARSEMIXER_V2_STAR else 1.0
    g = np.zeros_like(zv)
    for d in np.flatnonzero(support):
        delta = 1 if d == top else 0
        inner = 0.0
        for b, pb in ((0, 1.0 - cfg.bernoulli_p), (1, cfg.bernoulli_p)):
            s = (1.0 + 2.0 * max(b, delta)) / 3.0
            inner += pb * c * (f.grad_np(s * p[d] * E[d]) @ E[d])
        g += p[d] * inner * J[d]
    return g


def topk_sequence_distribution(z, K: int, cfg: EstimatorConfig) -> dict[tuple[int, ...], float]:
    """Probability of every ordered expert sequence chosen by K rounds without replacement."""
    zv = np.asarray(z, dtype=np.float64)
    _check_n(len(zv))
    out: dict[tuple[int, ...], float] = {}

    def walk(zcur: np.ndarray, prefix: tuple[int, ...], mass: float) -> None:
        if len(prefix) == K:
            out[prefix] = out.get(prefix, 0.0) + mass
            return
        p, support = gate_probs(zcur, cfg.r_thresh, cfg.temperature)
        for d in np.flatnonzero(support):
            znext = zcur.copy()
            znext[d] = -np.inf
            walk(znext, prefix + (int(d),), mass * p[d])

    walk(zv, (), 1.0)
    return out


def random_instance(rng: np.random.Generator, n: int, d_model: int = 3, d_out: int | None = None, nonlinear: bool = True):
    """A random (x, z, experts, f) tuple with fixed-vector experts Expert(x, w_i) = W_i x."""
    d_out = d_out or d_model
    x = rng.normal(size=d_model)
    z = rng.normal(size=n)
    mats = [rng.normal(size=(d_out, d_model)) for _ in range(n)]
    experts = [_linear_expert(M) for M in mats]
    if nonlinear:
        f: Downstream = QuadraticDownstream(rng.normal(size=(d_out, d_out)), rng.normal(size=d_out))
    else:
        f = LinearDownstream(rng.normal(size=d_out), float(rng.normal()))
    return x, z, experts, f


def _linear_expert(M: np.ndarray):
    Mt = Tensor(M.T.copy())

    def expert(rows: Tensor) -> Tensor:
        return ad.matmul(rows, Mt)

    return expert


def support_is_stable(z, r_thresh: float, margin: float = 1e-4) -> bool:
    """True if the MaskedSoftmax support and argmax do not change within ``margin`` of z."""
    zv = np.asarray(z, dtype=np.float64)
    zstar = zv.max()
    gaps = np.abs(zstar - zv - r_thresh * (np.abs(zv) + abs(zstar)))
    order = np.sort(zv)[::-1]
    argmax_gap = order[0] - order[1] if len(zv) > 1 else np.inf
    return bool(np.all(gaps > margin * (1 + 2 * r_thresh) * 4) and argmax_gap > 4 * margin)
