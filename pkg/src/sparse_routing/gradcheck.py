"""Battery of oracle comparisons behind the ``gradcheck`` subcommand.

Each check returns a :class:`CheckResult` with the worst error it measured
and the tolerance it was held to. Primitives are looked up on the autodiff
module at call time, so a patched primitive fails only the checks using it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .balance import BalanceConfig, LoadStats, accumulate_stats, balance_loss, global_reduce
from .estimators import EstimatorConfig, EstimatorKind, gshard_forward
from .model import ExpertParams, ToyModelSpec, expert_forward, init_params, model_forward, task_loss
from .oracle import (
    closed_form_estimator,
    enumerate_estimator_expectation,
    exact_gradient,
    expected_loss,
    fd_gradient,
    gate_probs,
    random_instance,
    relative_error,
    support_is_stable,
    topk_sequence_distribution,
)
from .routing import topk_indicator

FD_STEP = 1e-6
TOL_PRIMITIVE = 1e-6
TOL_END_TO_END = 1e-5
TOL_GSHARD = 1e-6
TOL_DUALITY = 1e-8
TOL_LINEAR = 1e-6
TOL_BASELINE = 1e-10
TOL_BALANCE = 1e-12

LEVELS = {
    "fast": {"seeds": 20, "e2e_seeds": 5, "duality_instances": 20, "duality_n": (2, 3, 4), "linear_instances": 20},
    "full": {"seeds": 20, "e2e_seeds": 20, "duality_instances": 50, "duality_n": (2, 3, 4), "linear_instances": 20},
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    error: float
    tolerance: float
    cases: int
    seconds: float = 0.0
    detail: str = ""


# ---------------------------------------------------------------- primitives


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """name -> (function of Tensors, input arrays)."""
    labels = rng.integers(0, 5, size=4)
    keep = np.ones((3, 5), dtype=bool)
    keep[0, 1] = keep[2, 4] = False
    idx = np.array([2, 0, 2, 1])
    return {
        "add": (lambda a, b: ad.add(a, b), [rng.normal(size=(3, 4)), rng.normal(size=4)]),
        "sub": (lambda a, b: ad.sub(a, b), [rng.normal(size=(3, 4)), rng.normal(size=(3, 1))]),
        "mul": (lambda a, b: ad.mul(a, b), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
        "matmul": (lambda a, b: ad.matmul(a, b), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
        "matvec": (lambda a, b: ad.matmul(a, b), [rng.normal(size=(3, 4)), rng.normal(size=4)]),
        "transpose": (lambda a: ad.transpose(a), [rng.normal(size=(3, 4))]),
        "reduce_sum": (lambda a: ad.reduce_sum(a, axis=0), [rng.normal(size=(3, 4))]),
        "mean": (lambda a: ad.mean(a, axis=1), [rng.normal(size=(3, 4))]),
        "exp": (lambda a: ad.exp(a), [rng.normal(size=(3, 4))]),
        "log": (lambda a: ad.log(a), [rng.uniform(0.5, 2.0, size=(3, 4))]),
        "sigmoid": (lambda a: ad.sigmoid(a), [rng.normal(size=(3, 4))]),
        "softmax": (lambda a: ad.softmax(a, axis=-1), [rng.normal(size=(3, 5))]),
        "softmax_axis0": (lambda a: ad.softmax(a, axis=0), [rng.normal(size=(3, 5))]),
        "masked_softmax": (lambda a: ad.softmax(ad.mask_fill(a, keep), axis=-1), [rng.normal(size=(3, 5))]),
        "silu": (lambda a: ad.silu(a), [rng.normal(size=(3, 4)) * 2]),
        "layer_norm": (lambda a, g, b: ad.layer_norm(a, g, b), [rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5)]),
        "cross_entropy": (lambda a: ad.cross_entropy(a, labels), [rng.normal(size=(4, 5))]),
        "mse_loss": (lambda a, b: ad.mse_loss(a, b), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
        "take_rows": (lambda a: ad.take_rows(a, idx), [rng.normal(size=(3, 4))]),
        "gather": (lambda a: ad.gather(a, [0, 2, 2], [1, 3, 3]), [rng.normal(size=(3, 4))]),
        "scatter_rows": (lambda a: ad.scatter_rows(a, idx, 3), [rng.normal(size=(4, 2))]),
        "concat": (lambda a, b: ad.concat([a, b]), [rng.normal(size=(2, 3)), rng.normal(size=(1, 3))]),
    }


PRIMITIVES = tuple(_primitive_cases(np.random.default_rng(0)))


def _fd_check(fn: Callable, inputs: list[np.ndarray], rng: np.random.Generator) -> float:
    params = [Tensor(v, requires_grad=True) for v in inputs]
    out = fn(*params)
    w = rng.normal(size=out.shape)
    loss = ad.reduce_sum(ad.mul(out, Tensor(w)))
    grads = ad.backward(loss)
    analytic = np.concatenate([grads[p].reshape(-1) for p in params])
    numeric = []
    for i, v in enumerate(inputs):
        def scalar(theta, i=i):
            args = [Tensor(theta if j == i else inputs[j]) for j in range(len(inputs))]
            return float((fn(*args).values * w).sum())

        numeric.append(fd_gradient(scalar, v, FD_STEP).reshape(-1))
    return relative_error(analytic, np.concatenate(numeric))


def check_primitive(name: str, seeds: int = 20) -> CheckResult:
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(1000 + s)
        fn, inputs = _primitive_cases(rng)[name]
        worst = max(worst, _fd_check(fn, inputs, rng))
    return CheckResult(f"primitive:{name}", worst < TOL_PRIMITIVE, worst, TOL_PRIMITIVE, seeds)


def check_expert_forward(seeds: int = 20) -> CheckResult:
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(2000 + s)
        d, di = 4, 6
        arrays = [rng.normal(size=(3, d)), rng.normal(size=(di, d)), rng.normal(size=(di, d)), rng.normal(size=(d, di))]

        def fn(x, wg, wu, wd):
            return expert_forward(x, ExpertParams(wg, wu, wd))

        worst = max(worst, _fd_check(fn, arrays, rng))
    return CheckResult("expert_forward", worst < TOL_PRIMITIVE, worst, TOL_PRIMITIVE, seeds)


# ---------------------------------------------------------------- GShard


def _tiny_gshard_spec(n_expert: int = 3, top_k: int = 1, alpha: float = 0.1) -> ToyModelSpec:
    return ToyModelSpec.build(
        depth=1,
        d_out=2,
        n_expert=n_expert,
        top_k=top_k,
        d_model=4,
        d_inner=6,
        estimator=EstimatorConfig(kind=EstimatorKind.GSHARD, jitter_epsilon=0.0),
        balance=BalanceConfig(alpha=alpha, scope="global", n_expert=n_expert, n_shards=2),
    )


def check_end_to_end(seeds: int = 20) -> CheckResult:
    """Depth-1, n=3, k=1 GShard model: every parameter against frozen-mask central differences."""
    spec = _tiny_gshard_spec()
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(3000 + s)
        params = init_params(spec, rng, router_std=1.0, head_std=0.5)
        for _, t in params.named_tensors():
            t.values = t.values + rng.normal(0.0, 0.3, size=t.shape)
        x = rng.normal(size=(5, 4))
        y = rng.normal(size=(5, 2))
        out = model_forward(x, spec, params, None, training=True)
        masks = [topk_indicator(z.values, spec.layers[0].top_k) for z in out.logits]
        loss = ad.add(task_loss(out.outputs, y, "regression"), out.balance_total)
        grads = ad.backward(loss)
        named = params.named_tensors()
        analytic = np.concatenate([grads[t].reshape(-1) for _, t in named])
        numeric = []
        for _, t in named:
            base = t.values.copy()

            def scalar(theta, t=t):
                t.values = theta
                o = model_forward(x, spec, params, None, training=True, frozen_masks=masks)
                return ad.add(task_loss(o.outputs, y, "regression"), o.balance_total).item()

            numeric.append(fd_gradient(scalar, base, FD_STEP).reshape(-1))
            t.values = base
        worst = max(worst, relative_error(analytic, np.concatenate(numeric)))
    return CheckResult("end_to_end:gshard_depth1", worst < TOL_END_TO_END, worst, TOL_END_TO_END, seeds)


def check_gshard_proxy(seeds: int = 20) -> CheckResult:
    """Router-weight gradient of a GShard layer equals the frozen-TopK finite difference."""
    worst = 0.0
    cases = 0
    cfg = EstimatorConfig(kind=EstimatorKind.GSHARD, jitter_epsilon=0.0)
    for s in range(seeds):
        for n, k in ((3, 1), (4, 2)):
            rng = np.random.default_rng(4000 + s)
            d = 3
            experts = [ExpertParams.init(d, 5, rng, 0.8) for _ in range(n)]
            x = rng.normal(size=(4, d))
            R = rng.normal(size=(n, d))
            A = rng.normal(size=(2, d))
            target = rng.normal(size=(4, 2))

            def loss_of(Rt: Tensor, mask=None):
                z = ad.matmul(Tensor(x), ad.transpose(Rt))
                y, _ = gshard_forward(x, z, k, experts, None, training=True, cfg=cfg, frozen_mask=mask)
                return ad.mse_loss(ad.matmul(y, Tensor(A.T)), Tensor(target)), z

            Rt = Tensor(R, requires_grad=True)
            loss, z = loss_of(Rt)
            mask = topk_indicator(z.values, k)
            analytic = ad.backward(loss)[Rt]
            numeric = fd_gradient(lambda th: loss_of(Tensor(th), mask)[0].item(), R, FD_STEP)
            worst = max(worst, relative_error(analytic, numeric))
            cases += 1
    return CheckResult("gshard_proxy_law", worst < TOL_GSHARD, worst, TOL_GSHARD, cases)


# ---------------------------------------------------------------- estimator formulas


def estimator_instances(kind: EstimatorKind, n: int, count: int, seed: int, linear: bool = False, temperature: float | None = None) -> Iterator[tuple]:
    """Random instances whose MaskedSoftmax support has at least two experts and a stable mask.

    Thresholds alternate between a partial support (r = 0.5) and the full one.
    """
    rng = np.random.default_rng(seed)
    made = 0
    while made < count:
        r = 0.5 if made % 2 == 0 else 1e3
        cfg = EstimatorConfig(kind=kind, r_thresh=r, temperature=temperature)
        x, z, experts, f = random_instance(rng, n, d_model=3, nonlinear=not linear)
        _, support = gate_probs(z, cfg.r_thresh, cfg.temperature)
        if n > 1 and support.sum() < 2:
            continue
        if not support_is_stable(z, r):
            continue
        made += 1
        yield x, z, experts, f, cfg


def check_duality(kind: EstimatorKind, ns=(2, 3, 4), instances: int = 50) -> CheckResult:
    worst = 0.0
    cases = 0
    for n in ns:
        for x, z, experts, f, cfg in estimator_instances(kind, n, instances, seed=5000 + n):
            a = enumerate_estimator_expectation(x, z, cfg, experts, f)
            b = closed_form_estimator(x, z, cfg, experts, f)
            worst = max(worst, relative_error(a, b))
            cases += 1
    return CheckResult(f"duality:{kind.value}", worst < TOL_DUALITY, worst, TOL_DUALITY, cases)


def check_linear_exactness(instances: int = 20) -> CheckResult:
    """v2* at temperature 1 with a linear downstream reproduces the expected-loss gradient."""
    worst = 0.0
    cases = 0
    for n in (2, 3, 4):
        per_n = -(-instances // 3)
        for x, z, experts, f, cfg in estimator_instances(EstimatorKind.SPARSEMIXER_V2_STAR, n, per_n, 6000 + n, linear=True, temperature=1.0):
            if cases >= instances:
                break
            est = enumerate_estimator_expectation(x, z, cfg, experts, f)
            fd = fd_gradient(lambda zz: expected_loss("full", x, zz, experts, f, cfg), z, FD_STEP)
            worst = max(worst, relative_error(est, fd))
            cases += 1
    return CheckResult("linear_exactness:v2star", worst < TOL_LINEAR, worst, TOL_LINEAR, cases)


def check_baseline_identity(instances: int = 20) -> CheckResult:
    worst = 0.0
    cases = 0
    for n in (2, 3, 4):
        for x, z, experts, f, cfg in estimator_instances(EstimatorKind.SPARSEMIXER_V2_STAR, n, instances, 7000 + n, temperature=1.0):
            a = exact_gradient(x, z, experts, f, cfg, baseline=False)
            b = exact_gradient(x, z, experts, f, cfg, baseline=True)
            worst = max(worst, relative_error(a, b))
            cases += 1
    return CheckResult("baseline_subtraction", worst < TOL_BASELINE, worst, TOL_BASELINE, cases)


def check_topk_consistency(instances: int = 20) -> CheckResult:
    """K=1 sequence distribution equals the MaskedSoftmax; K rounds never repeat an expert."""
    worst = 0.0
    cases = 0
    rng = np.random.default_rng(8000)
    for _ in range(instances):
        n = int(rng.integers(2, 6))
        z = rng.normal(size=n)
        cfg = EstimatorConfig(kind=EstimatorKind.SPARSEMIXER_V2, r_thresh=float(rng.choice([0.5, 1e3])))
        p, _ = gate_probs(z, cfg.r_thresh, cfg.temperature)
        dist1 = topk_sequence_distribution(z, 1, cfg)
        got = np.zeros(n)
        for (d,), m in dist1.items():
            got[d] += m
        worst = max(worst, float(np.abs(got - p).max()))
        K = int(rng.integers(1, n + 1))
        for seq, m in topk_sequence_distribution(z, K, cfg).items():
            if len(set(seq)) != len(seq):
                worst = max(worst, 1.0)
        total = sum(topk_sequence_distribution(z, K, cfg).values())
        worst = max(worst, abs(total - 1.0))
        cases += 1
    return CheckResult("topk_consistency", worst < 1e-12, worst, 1e-12, cases)


# ---------------------------------------------------------------- balance


def check_balance(seeds: int = 20) -> CheckResult:
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(9000 + s)
        n, k, alpha = 8, 1, float(rng.uniform(0.001, 1.0))
        cfg = BalanceConfig(alpha=alpha)
        uniform = LoadStats(np.full(n, 10), 10 * n, k, np.full(n, 1.0 / n))
        worst = max(worst, abs(balance_loss(uniform, cfg).item() - alpha) / alpha)
        T = 4 * int(rng.integers(4, 16))
        experts = np.stack([rng.permutation(n)[:2] for _ in range(T)])
        z = rng.normal(size=(T, n))
        whole = accumulate_stats(experts, z, n)
        parts = [accumulate_stats(experts[a : a + T // 4], z[a : a + T // 4], n) for a in range(0, T, T // 4)]
        red = global_reduce(parts)
        worst = max(worst, float(np.abs(red.counts - whole.counts).max()))
        worst = max(worst, float(np.abs(red.mean_gate - whole.mean_gate).max()))
        worst = max(worst, abs(balance_loss(red, cfg).item() - balance_loss(whole, cfg).item()))
    return CheckResult("balance_equivalence", worst < TOL_BALANCE, worst, TOL_BALANCE, seeds)


# ---------------------------------------------------------------- driver


def all_checks(level: str = "fast") -> list[Callable[[], CheckResult]]:
    if level not in LEVELS:
        raise ValueError(f"level must be one of {sorted(LEVELS)}")
    opts = LEVELS[level]
    seeds = opts["seeds"]
    checks: list[Callable[[], CheckResult]] = [lambda name=name: check_primitive(name, seeds) for name in PRIMITIVES]
    checks += [
        lambda: check_expert_forward(seeds),
        lambda: check_end_to_end(opts["e2e_seeds"]),
        lambda: check_gshard_proxy(seeds),
        lambda: check_duality(EstimatorKind.SPARSEMIXER_V2, opts["duality_n"], opts["duality_instances"]),
        lambda: check_duality(EstimatorKind.SPARSEMIXER_V2_STAR, opts["duality_n"], opts["duality_instances"]),
        lambda: check_linear_exactness(opts["linear_instances"]),
        check_baseline_identity,
        check_topk_consistency,
        lambda: check_balance(seeds),
    ]
    return checks


def run_checks(level: str = "fast") -> list[CheckResult]:
    results = []
    for check in all_checks(level):
        t0 = time.perf_counter()
        try:
            res = check()
        except Exception as exc:  # a crashing check is a failing check
            res = CheckResult(getattr(check, "__name__", "check"), False, float("inf"), 0.0, 0, detail=f"{type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  {'max_err':>10}  {'tol':>8}  cases  seconds"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        line = f"{r.name:<{width}}  {status:<6}  {r.error:>10.3e}  {r.tolerance:>8.0e}  {r.cases:>5}  {r.seconds:>7.2f}"
        if r.detail:
            line += f"  {r.detail}"
        lines.append(line)
    return "\n".join(lines)
