import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparse_routing import autodiff as ad
from sparse_routing.autodiff import Tensor
from sparse_routing.oracle import fd_gradient, relative_error, support_is_stable
from sparse_routing.routing import (
    RouterParams,
    make_rng,
    masked_softmax,
    router_logits,
    sample_categorical,
    support_mask,
    topk_indicator,
)

logits = arrays(np.float64, st.integers(1, 8), elements=st.floats(-10, 10, allow_nan=False))


def test_router_zero_input_and_identity():
    R = RouterParams(Tensor(np.eye(4)))
    assert np.array_equal(router_logits(Tensor(np.zeros(4)), R).values, np.zeros(4))
    x = np.array([1.0, -2.0, 0.5, 3.0])
    assert np.array_equal(router_logits(Tensor(x), R).values, x)


def test_router_against_loop(rng):
    W = rng.normal(size=(5, 3))
    x = rng.normal(size=3)
    naive = [sum(W[i, j] * x[j] for j in range(3)) for i in range(5)]
    assert np.allclose(router_logits(Tensor(x), RouterParams(Tensor(W))).values, naive)


def test_topk_examples():
    assert topk_indicator(np.array([3.0, 1.0, 2.0]), 2).tolist() == [True, False, True]
    assert topk_indicator(np.zeros(4), 2).tolist() == [True, True, False, False]


@given(z=logits, data=st.data())
def test_topk_matches_sort_oracle(z, data):
    k = data.draw(st.integers(1, len(z)))
    mask = topk_indicator(z, k)
    order = sorted(range(len(z)), key=lambda i: (-z[i], i))[:k]
    assert set(np.flatnonzero(mask)) == set(order)
    assert topk_indicator(z, len(z)).all()


def test_masked_softmax_hand_example():
    d = masked_softmax(np.array([1.0, 0.5, -0.5]), 0.5, 1.0)
    assert d.support.tolist() == [True, True, False]
    e = np.exp(0.5)
    assert np.allclose(d.probs.values, [e / (e + 1), 1 / (e + 1), 0.0], atol=1e-15)
    assert d.probs.values[0] == pytest.approx(0.6225, abs=5e-5)


def test_masked_softmax_uniform_and_zero_threshold():
    assert np.allclose(masked_softmax(np.full(5, 0.7), 0.3).probs.values, 0.2)
    p = masked_softmax(np.array([0.1, 2.0, -1.0]), 0.0).probs.values
    assert p.tolist() == [0.0, 1.0, 0.0]


@given(z=logits, r=st.floats(0, 3))
def test_masked_softmax_invariants(z, r):
    d = masked_softmax(z, r)
    p = d.probs.values
    assert np.all(p[~d.support] == 0.0)
    assert abs(p[d.support].sum() - 1.0) < 1e-12
    assert d.support[np.argmax(z)]
    assert np.all(support_mask(z, r * 2 + 0.1) >= d.support)


@pytest.mark.parametrize("tau", [1.0, 2.0])
def test_masked_softmax_gradient_with_fixed_mask(rng, tau):
    for _ in range(20):
        z = rng.normal(size=5)
        if not support_is_stable(z, 0.5):
            continue
        w = rng.normal(size=5)
        zt = Tensor(z, requires_grad=True)
        g = ad.backward(ad.reduce_sum(ad.mul(masked_softmax(zt, 0.5, tau).probs, Tensor(w))))[zt]
        fd = fd_gradient(lambda v: float(masked_softmax(v, 0.5, tau).probs.values @ w), z)
        assert relative_error(g, fd) < 1e-6


def test_sample_one_hot_and_frequency():
    rng = make_rng(0, 0)
    d = masked_softmax(np.array([0.0, 5.0, 1.0]), 0.0)
    assert all(sample_categorical(d, rng) == 1 for _ in range(50))
    d = masked_softmax(np.zeros(2), 0.1)
    batch = masked_softmax(np.zeros((100_000, 2)), 0.1)
    draws = sample_categorical(batch, make_rng(1, 0))
    assert abs(np.mean(draws == 0) - 0.5) < 0.01
    assert sample_categorical(d, make_rng(5)) in (0, 1)


def test_sampling_is_deterministic():
    d = masked_softmax(np.zeros((50, 4)), 1.0)
    a = sample_categorical(d, make_rng(9, 2))
    b = sample_categorical(d, make_rng(9, 2))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, sample_categorical(d, make_rng(9, 3)))
