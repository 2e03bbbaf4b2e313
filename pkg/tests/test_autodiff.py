import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparse_routing import autodiff as ad
from sparse_routing.autodiff import Tensor
from sparse_routing.oracle import fd_gradient, relative_error

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_detach_preserves_values_and_blocks_gradient(rng):
    x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    d = ad.detach(x)
    assert np.array_equal(d.values, x.values)
    assert np.array_equal(ad.detach(d).values, x.values)
    g = ad.backward(ad.reduce_sum(d))
    assert np.array_equal(g[x], np.zeros((3, 2)))


def test_straight_through_construction(rng):
    x = Tensor(rng.normal(size=4), requires_grad=True)
    y = ad.add(x, ad.detach(ad.sub(ad.mul(x, 2.0), x)))
    assert np.allclose(y.values, 2 * x.values)
    assert np.array_equal(ad.backward(ad.reduce_sum(y))[x], np.ones(4))


def test_square_gradient():
    x = Tensor(np.array(3.0), requires_grad=True)
    assert ad.backward(ad.mul(x, x))[x] == pytest.approx(6.0)


def test_softmax_sum_has_zero_gradient(rng):
    z = Tensor(rng.normal(size=6), requires_grad=True)
    g = ad.backward(ad.reduce_sum(ad.softmax(z)))[z]
    assert np.abs(g).max() < 1e-15


def test_cross_entropy_gradient_matches_closed_form_and_fd(rng):
    logits = rng.normal(size=(1, 5))
    label = np.array([2])
    z = Tensor(logits, requires_grad=True)
    g = ad.backward(ad.cross_entropy(z, label))[z]
    p = np.exp(logits) / np.exp(logits).sum()
    onehot = np.eye(5)[[2]]
    assert np.allclose(g, p - onehot, atol=1e-14)
    fd = fd_gradient(lambda v: ad.cross_entropy(Tensor(v), label).item(), logits)
    assert relative_error(g, fd) < 1e-6


@given(c=finite)
def test_softmax_uniform_for_equal_logits(c):
    p = ad.softmax(Tensor(np.full(3, c))).values
    assert np.allclose(p, 1 / 3, atol=1e-15)


@given(z=arrays(np.float64, 5, elements=finite), c=finite)
def test_softmax_shift_invariance(z, c):
    assert np.allclose(ad.softmax(Tensor(z)).values, ad.softmax(Tensor(z + c)).values, atol=1e-13)


def test_silu_at_zero():
    x = Tensor(np.array(0.0), requires_grad=True)
    y = ad.silu(x)
    assert y.item() == 0.0
    assert ad.backward(y)[x] == pytest.approx(0.5)


def test_softmax_neg_inf_gives_exact_zero():
    z = Tensor(np.array([1.0, -np.inf, 0.0]), requires_grad=True)
    p = ad.softmax(z)
    assert p.values[1] == 0.0
    g = ad.backward(ad.reduce_sum(ad.mul(p, Tensor(np.array([1.0, 2.0, 3.0])))))[z]
    assert g[1] == 0.0 and np.all(np.isfinite(g))


def test_softmax_rejects_all_neg_inf_row():
    with pytest.raises(ValueError):
        ad.softmax(Tensor(np.full(3, -np.inf)))


def test_shared_input_accumulates():
    rng = np.random.default_rng(0)
    a = rng.normal(size=4)
    x = Tensor(a, requires_grad=True)
    loss = ad.reduce_sum(ad.add(ad.mul(x, x), ad.exp(x)))
    g = ad.backward(loss)[x]
    x1, x2 = Tensor(a, requires_grad=True), Tensor(a, requires_grad=True)
    g1 = ad.backward(ad.reduce_sum(ad.mul(x1, x1)))[x1]
    g2 = ad.backward(ad.reduce_sum(ad.exp(x2)))[x2]
    assert np.allclose(g, g1 + g2, atol=1e-14)


def test_unreachable_parameter_gets_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    other = Tensor(np.ones(2), requires_grad=True)
    g = ad.backward(ad.reduce_sum(x))
    assert np.array_equal(g[other], np.zeros(2))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(ad.mul(x, 2.0))
    g = ad.backward(ad.mul(x, 2.0), seed=np.array([1.0, 0.0, 1.0]))
    assert np.array_equal(g[x], [2.0, 0.0, 2.0])


def test_shape_mismatch_is_error():
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_log_rejects_nonpositive():
    with pytest.raises(ValueError):
        ad.log(Tensor(np.array([1.0, 0.0])))


def test_layer_norm_normalizes(rng):
    y = ad.layer_norm(Tensor(rng.normal(3, 2, size=(4, 8)))).values
    assert np.allclose(y.mean(axis=1), 0, atol=1e-12)
    assert np.allclose(y.var(axis=1), 1, atol=1e-4)


@settings(max_examples=25, deadline=None)
@given(a=arrays(np.float64, (3, 4), elements=finite), b=arrays(np.float64, (4, 2), elements=finite))
def test_matmul_gradient_property(a, b):
    A, B = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    g = ad.backward(ad.reduce_sum(ad.matmul(A, B)))
    assert np.allclose(g[A], np.ones((3, 2)) @ b.T)
    assert np.allclose(g[B], a.T @ np.ones((3, 2)))
