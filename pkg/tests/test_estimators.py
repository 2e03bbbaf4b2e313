import numpy as np
import pytest

from sparse_routing import autodiff as ad
from sparse_routing.autodiff import Tensor
from sparse_routing.estimators import (
    EstimatorConfig,
    EstimatorKind,
    ForcedDraws,
    gshard_forward,
    inference,
    route_train,
    sparsemixer_topk_train,
    sparsemixer_v2_top1_train,
    sparsemixer_v2star_top1_train,
)
from sparse_routing.routing import make_rng, masked_softmax

V2 = EstimatorConfig(kind=EstimatorKind.SPARSEMIXER_V2)
V2S = EstimatorConfig(kind=EstimatorKind.SPARSEMIXER_V2_STAR)
GS = EstimatorConfig(kind=EstimatorKind.GSHARD)


def identity_experts(n):
    return [lambda rows: rows for _ in range(n)]


def scaled_experts(scales):
    """Expert i multiplies its input by a learnable scalar a_i (the probe for dy/dh)."""
    params = [Tensor(np.array(float(s)), requires_grad=True) for s in scales]
    return params, [lambda rows, a=a: ad.mul(rows, a) for a in params]


def test_defaults_per_kind():
    assert (V2.temperature, V2.bernoulli_p, V2.backward_coef) == (1.0, 0.25, 1.0)
    assert (V2S.temperature, V2S.bernoulli_p, V2S.backward_coef) == (2.0, 0.625, 2.0)
    assert GS.temperature == 1.0


def test_gshard_k_equals_n_is_dense_mixture(rng):
    n, d = 4, 3
    mats = [rng.normal(size=(d, d)) for _ in range(n)]
    experts = [lambda rows, M=M: ad.matmul(rows, Tensor(M)) for M in mats]
    x, z = rng.normal(size=(5, d)), rng.normal(size=(5, n))
    y, trace = gshard_forward(x, z, n, experts, training=False, cfg=GS)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    dense = sum(p[:, [i]] * (x @ mats[i]) for i in range(n))
    assert np.allclose(y.values, dense, atol=1e-13)
    assert np.all(np.sort(trace.experts, axis=1) == np.arange(n))


def test_gshard_two_expert_example():
    x = np.array([1.0, -2.0, 0.5])
    y, trace = gshard_forward(x, np.array([5.0, -5.0]), 1, identity_experts(2), training=False, cfg=GS)
    w = 1 / (1 + np.exp(-10.0))
    assert w == pytest.approx(0.9999546, abs=1e-7)
    assert np.allclose(y.values, w * x)
    assert trace.experts.tolist() == [[0]]


def test_gshard_jitter_only_in_training(rng):
    x, z = rng.normal(size=(6, 2)), rng.normal(size=(6, 3))
    a, _ = gshard_forward(x, z, 1, identity_experts(3), rng=make_rng(0), training=False, cfg=GS)
    b, _ = gshard_forward(x, z, 1, identity_experts(3), rng=None, training=False, cfg=GS)
    c, _ = gshard_forward(x, z, 1, identity_experts(3), rng=make_rng(0), training=True, cfg=GS)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_gshard_renormalize_flag(rng):
    x, z = rng.normal(size=(4, 2)), rng.normal(size=(4, 3))
    cfg = GS.with_(renormalize=True)
    y, tr = gshard_forward(x, z, 2, identity_experts(3), training=False, cfg=cfg)
    assert np.allclose(tr.gates.sum(axis=1), 1.0)
    assert np.allclose(y.values, x)


@pytest.mark.parametrize("cfg", [V2, V2S])
def test_forward_scale_law(cfg):
    x = np.array([1.0, 2.0])
    z = np.array([1.0, 0.9, 0.8])
    cfg = cfg.with_(r_thresh=1e3)
    p = masked_softmax(z, cfg.r_thresh, cfg.temperature).probs.values
    for D in range(3):
        for B in (0, 1):
            y, tr = sparsemixer_topk_train(x, z, 1, cfg, identity_experts(3), forced=ForcedDraws.single(D, B))
            s = 1.0 if (D == 0 or B == 1) else 1 / 3
            assert tr.scales[0, 0] == pytest.approx(s)
            assert np.allclose(y.values, s * p[D] * x, atol=1e-15)


@pytest.mark.parametrize("cfg, coef", [(V2, 1.0), (V2S, 2.0)])
def test_backward_coefficient_law(cfg, coef):
    x = np.array([0.5, -1.5])
    z = np.array([0.3, 0.2, 0.25])
    cfg = cfg.with_(r_thresh=1e3)
    p = masked_softmax(z, cfg.r_thresh, cfg.temperature).probs.values
    for D in range(3):
        for B in (0, 1):
            params, experts = scaled_experts([1.0, 1.0, 1.0])
            y, _ = sparsemixer_topk_train(x, z, 1, cfg, experts, forced=ForcedDraws.single(D, B))
            g = ad.backward(ad.reduce_sum(y))[params[D]]
            assert g == pytest.approx(coef * p[D] * x.sum(), rel=1e-12)


def test_top1_wrappers_check_kind():
    with pytest.raises(ValueError):
        sparsemixer_v2_top1_train(np.ones(2), np.zeros(2), V2S, identity_experts(2))
    with pytest.raises(ValueError):
        sparsemixer_v2star_top1_train(np.ones(2), np.zeros(2), V2, identity_experts(2))
    y, tr = sparsemixer_v2_top1_train(np.ones(2), np.array([3.0, 0.0]), V2, identity_experts(2), rng=make_rng(0))
    assert tr.decision(0).expert == 0 and tr.decision(0).is_argmax


def test_topk_distinct_and_exhaustive(rng):
    T, n = 40, 5
    z = rng.normal(size=(T, n))
    cfg = V2.with_(r_thresh=1e3)
    _, tr = sparsemixer_topk_train(rng.normal(size=(T, 2)), z, n, cfg, identity_experts(n), rng=make_rng(3))
    assert np.all(np.sort(tr.experts, axis=1) == np.arange(n))
    _, tr = sparsemixer_topk_train(rng.normal(size=(T, 2)), z, 3, V2, identity_experts(n), rng=make_rng(4))
    assert all(len(set(row)) == 3 for row in tr.experts.tolist())


def test_topk_two_of_two():
    _, tr = sparsemixer_topk_train(np.ones((3, 2)), np.zeros((3, 2)), 2, V2, identity_experts(2), rng=make_rng(1))
    assert all(sorted(r) == [0, 1] for r in tr.experts.tolist())


def test_round_two_probabilities_use_masked_logits(rng):
    z = rng.normal(size=4)
    cfg = V2S.with_(r_thresh=1e3)
    _, tr = sparsemixer_topk_train(np.ones(2), z, 2, cfg, identity_experts(4), rng=make_rng(7))
    first = tr.experts[0, 0]
    zm = z.copy()
    zm[first] = -np.inf
    e = np.exp(zm / 2.0)
    assert tr.gates[0, 1] == pytest.approx(e[tr.experts[0, 1]] / e.sum(), rel=1e-14)
    assert tr.round_logits[1, 0, first] == -np.inf


def test_forced_equals_sampled_conditioned_on_draws(rng):
    x, z = rng.normal(size=(8, 3)), rng.normal(size=(8, 4))
    for cfg in (V2, V2S):
        y, tr = sparsemixer_topk_train(x, z, 2, cfg, identity_experts(4), rng=make_rng(11))
        yf, trf = sparsemixer_topk_train(x, z, 2, cfg, identity_experts(4), forced=ForcedDraws(tr.experts, tr.bernoulli))
        assert np.array_equal(y.values, yf.values)
        assert np.array_equal(tr.scales, trf.scales)


def test_inference_modes(rng):
    x = rng.normal(size=(3, 2))
    z = np.array([[5.0, 0.0, -1.0]] * 3)
    cfg = V2.with_(r_thresh=0.0)
    det, _ = inference(x, z, 1, cfg, identity_experts(3), mode="deterministic")
    smp, _ = inference(x, z, 1, cfg, identity_experts(3), rng=make_rng(0), mode="sampled")
    assert np.array_equal(det.values, smp.values)
    g1, _ = inference(x, z, 2, GS, identity_experts(3))
    g2, _ = inference(x, z, 2, GS, identity_experts(3))
    assert np.array_equal(g1.values, g2.values)
    with pytest.raises(ValueError, match="deterministic"):
        inference(x, z, 1, GS, identity_experts(3), rng=make_rng(0), mode="sampled")


def test_sampled_inference_expectation():
    T = 200_000
    x = np.tile([1.0, 2.0], (T, 1))
    z = np.tile([0.4, 0.1, 0.0], (T, 1))
    scales = np.array([1.0, -2.0, 3.0])
    experts = [lambda rows, c=c: ad.mul(rows, c) for c in scales]
    cfg = V2.with_(r_thresh=1e3)
    y, _ = inference(x, z, 1, cfg, experts, rng=make_rng(2), mode="sampled")
    p = masked_softmax(z[0], 1e3).probs.values
    expected = float((p**2 * scales).sum()) * np.array([1.0, 2.0])
    per_token = y.values
    se = per_token.std(axis=0) / np.sqrt(T)
    assert np.all(np.abs(per_token.mean(axis=0) - expected) < 4 * se)


def test_route_train_dispatches_by_kind(rng):
    x, z = rng.normal(size=(4, 2)), rng.normal(size=(4, 3))
    _, tr = route_train(x, z, 1, GS, identity_experts(3), rng=make_rng(0))
    assert tr.kind is EstimatorKind.GSHARD and np.all(tr.bernoulli == -1)
    _, tr = route_train(x, z, 1, V2, identity_experts(3), rng=make_rng(0))
    assert np.all(np.isin(tr.bernoulli, (0, 1)))
