import struct

import numpy as np
import pytest

from sparse_routing import autodiff as ad
from sparse_routing.autodiff import Tensor
from sparse_routing.estimators import EstimatorConfig, EstimatorKind
from sparse_routing.model import (
    CHECKPOINT_MAGIC,
    ExpertParams,
    ToyModelSpec,
    expert_forward,
    init_params,
    load_checkpoint,
    model_forward,
    moe_block_forward,
    save_checkpoint,
    task_loss,
)
from sparse_routing.oracle import fd_gradient, relative_error
from sparse_routing.routing import make_rng

KINDS = list(EstimatorKind)


def spec_for(kind, **kw):
    kw.setdefault("d_model", 6)
    kw.setdefault("d_inner", 5)
    return ToyModelSpec.build(estimator=EstimatorConfig(kind=kind), **kw)


def test_expert_zero_input(rng):
    w = ExpertParams.init(4, 6, rng, 1.0)
    assert np.array_equal(expert_forward(Tensor(np.zeros(4)), w).values, np.zeros(4))


def test_expert_scaled_identity():
    a, b = 0.7, -1.3
    I = np.eye(3)
    w = ExpertParams(Tensor(a * I), Tensor(a * I), Tensor(b * I))
    x = np.array([0.5, -2.0, 1.0])
    ax = a * x
    expected = b * (ax / (1 + np.exp(-ax))) * ax
    assert np.allclose(expert_forward(Tensor(x), w).values, expected, atol=1e-15)


def test_expert_gradient(rng):
    w = ExpertParams.init(3, 4, rng, 0.8)
    x = rng.normal(size=(2, 3))
    c = rng.normal(size=(2, 3))
    grads = ad.backward(ad.reduce_sum(ad.mul(expert_forward(Tensor(x), w), Tensor(c))))
    for t in w.tensors():
        base = t.values.copy()

        def f(v, t=t):
            t.values = v
            return float((expert_forward(Tensor(x), w).values * c).sum())

        fd = fd_gradient(f, base)
        t.values = base
        assert relative_error(grads[t], fd) < 1e-6


@pytest.mark.parametrize("kind", KINDS)
def test_single_expert_block_is_plain_swiglu(kind, rng):
    spec = spec_for(kind, depth=1, n_expert=1, top_k=1)
    params = init_params(spec, rng, router_std=1.0)
    for e in params.blocks[0].experts:
        for t in e.tensors():
            t.values = rng.normal(size=t.shape)
    x = rng.normal(size=(5, 6))
    bp = params.blocks[0]
    out = moe_block_forward(x, spec.layers[0], bp, make_rng(0), training=True)
    h = ad.layer_norm(Tensor(x), bp.ln_gain, bp.ln_bias)
    plain = x + expert_forward(h, bp.experts[0]).values
    assert np.allclose(out.y.values, plain, atol=1e-13)
    assert np.all(out.trace.experts == 0) and np.allclose(out.trace.gates, 1.0)


@pytest.mark.parametrize("kind", KINDS)
def test_block_is_deterministic(kind, rng):
    spec = spec_for(kind, depth=1)
    params = init_params(spec, make_rng(0, 0))
    x = rng.normal(size=(7, 6))
    a = moe_block_forward(x, spec.layers[0], params.blocks[0], make_rng(3, 2), training=True)
    b = moe_block_forward(x, spec.layers[0], params.blocks[0], make_rng(3, 2), training=True)
    assert np.array_equal(a.y.values, b.y.values)
    assert np.array_equal(a.trace.experts, b.trace.experts)
    assert np.array_equal(a.trace.bernoulli, b.trace.bernoulli)


def test_gshard_k_equals_n_block_is_dense(rng):
    spec = spec_for(EstimatorKind.GSHARD, depth=1, n_expert=3, top_k=3)
    params = init_params(spec, rng, router_std=1.0)
    bp = params.blocks[0]
    x = rng.normal(size=(4, 6))
    out = moe_block_forward(x, spec.layers[0], bp, None, training=False)
    h = ad.layer_norm(Tensor(x), bp.ln_gain, bp.ln_bias)
    p = ad.softmax(ad.matmul(h, ad.transpose(bp.router.weight))).values
    dense = x + sum(p[:, [i]] * expert_forward(h, e).values for i, e in enumerate(bp.experts))
    assert np.allclose(out.y.values, dense, atol=1e-13)


def test_depth_one_is_block_plus_head(rng):
    spec = spec_for(EstimatorKind.SPARSEMIXER_V2, depth=1)
    params = init_params(spec, rng)
    x = rng.normal(size=(5, 6))
    out = model_forward(x, spec, params, make_rng(1), training=True)
    blk = moe_block_forward(x, spec.layers[0], params.blocks[0], make_rng(1), training=True)
    head = blk.y.values @ params.head_w.values.T + params.head_b.values
    assert np.allclose(out.outputs.values, head)


@pytest.mark.parametrize("kind", KINDS)
def test_loss_finite_and_additive(kind):
    spec = ToyModelSpec.build(estimator=EstimatorConfig(kind=kind))
    for seed in range(10):
        params = init_params(spec, make_rng(seed, 0))
        r = np.random.default_rng(seed)
        x, y = r.normal(size=(16, 16)), r.normal(size=(16, 4))
        out = model_forward(x, spec, params, make_rng(seed, 2), training=True)
        tl = task_loss(out.outputs, y, "regression")
        total = ad.add(tl, out.balance_total).item()
        assert np.isfinite(total)
        assert total == pytest.approx(tl.item() + sum(b.item() for b in out.balance_losses), rel=1e-14)
        for tr in out.traces:
            assert tr.experts.shape == (16, 2)
            assert all(len(set(row)) == 2 for row in tr.experts.tolist())


def test_checkpoint_round_trip(tmp_path, rng):
    spec = spec_for(EstimatorKind.SPARSEMIXER_V2_STAR, depth=2, n_expert=3)
    params = init_params(spec, rng)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, spec, params, seed=2**64 - 1, extra={"note": "x"})
    spec2, params2, header = load_checkpoint(path)
    assert spec2 == spec
    assert header["seed"] == 2**64 - 1 and header["estimator"] == "sparsemixer_v2_star"
    for (n1, t1), (n2, t2) in zip(params.named_tensors(), params2.named_tensors()):
        assert n1 == n2 and np.array_equal(t1.values, t2.values)
    raw = path.read_bytes()
    assert raw[:8] == CHECKPOINT_MAGIC
    (hlen,) = struct.unpack("<Q", raw[8:16])
    n_values = sum(t.values.size for t in params.tensors())
    assert len(raw) == 16 + hlen + 8 * n_values


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_model_rejects_wrong_width(rng):
    spec = spec_for(EstimatorKind.GSHARD, depth=1)
    with pytest.raises(ad.ShapeError):
        model_forward(np.zeros((2, 5)), spec, init_params(spec, rng), None, training=False)
