from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kflayers import autodiff as ad
from kflayers.autodiff import Tensor
from kflayers.errors import ContractError, NumericError, ShapeError

# input samplers that keep each primitive away from kinks and poles
POSITIVE = lambda r, s: r.uniform(0.3, 2.0, s)
ANY = lambda r, s: r.normal(size=s)
AWAY_FROM_ZERO = lambda r, s: r.choice([-1, 1], size=s) * r.uniform(0.3, 2.0, s)

UNARY = {
    "exp": ANY, "log": POSITIVE, "softplus": ANY, "tanh": ANY, "square": ANY,
    "reciprocal": AWAY_FROM_ZERO, "neg": ANY, "relu": AWAY_FROM_ZERO, "expm1": ANY,
    "sqrt": POSITIVE,
}
BINARY = {"add": (ANY, ANY), "sub": (ANY, ANY), "mul": (ANY, ANY), "div": (ANY, AWAY_FROM_ZERO)}
SHAPE_PAIRS = [((3,), (3,)), ((2, 3), (3,)), ((2, 1), (1, 4)), ((4,), ()), ((2, 3, 2), (3, 1))]


def _grad_error(f, params):
    return ad.finite_difference_check(f, params, epsilon=1e-6)


@pytest.mark.parametrize("op", sorted(UNARY))
def test_unary_gradients_match_finite_differences(op):
    r = np.random.default_rng(hash(op) % 2**32)
    worst = 0.0
    for trial in range(100):
        shape = tuple(r.integers(1, 4, size=r.integers(0, 3)))
        x = ad.parameter(UNARY[op](r, shape))
        w = r.normal(size=shape)
        worst = max(worst, _grad_error(lambda: (ad.elementwise(op, x) * w).sum(), [x]))
    assert worst < 1e-4


@pytest.mark.parametrize("op", sorted(BINARY))
def test_binary_gradients_match_finite_differences_with_broadcasting(op):
    r = np.random.default_rng(hash(op) % 2**32)
    sa, sb = BINARY[op]
    worst = 0.0
    for trial in range(100):
        shape_a, shape_b = SHAPE_PAIRS[trial % len(SHAPE_PAIRS)]
        a = ad.parameter(sa(r, shape_a))
        b = ad.parameter(sb(r, shape_b))
        out_shape = np.broadcast_shapes(shape_a, shape_b)
        w = r.normal(size=out_shape)
        worst = max(worst, _grad_error(lambda: (ad.elementwise(op, a, b) * w).sum(), [a, b]))
    assert worst < 1e-4


def test_matmul_gradient_trials():
    r = np.random.default_rng(7)
    worst = 0.0
    for trial in range(100):
        m, k, n = r.integers(1, 4, size=3)
        lead = () if trial % 2 else (2,)
        a = ad.parameter(r.normal(size=lead + (m, k)))
        b = ad.parameter(r.normal(size=(k, n)))
        w = r.normal(size=lead + (m, n))
        worst = max(worst, _grad_error(lambda: ((a @ b) * w).sum(), [a, b]))
    assert worst < 1e-4


@pytest.mark.parametrize("op", ["sum", "mean", "max"])
def test_reduce_gradient_trials(op):
    r = np.random.default_rng(3)
    worst = 0.0
    for trial in range(100):
        x = ad.parameter(r.normal(size=(3, 4)))
        axis = [None, 0, 1, -1][trial % 4]
        out = ad.reduce(op, x, axis=axis)
        w = r.normal(size=out.shape)
        worst = max(worst, _grad_error(lambda: (ad.reduce(op, x, axis=axis) * w).sum(), [x]))
    assert worst < 1e-4


def test_shape_op_gradients():
    r = np.random.default_rng(5)
    x = ad.parameter(r.normal(size=(2, 3, 4)))
    y = ad.parameter(r.normal(size=(2, 3, 1)))
    w = r.normal(size=(3, 2, 5))

    def f():
        z = ad.swapaxes(ad.concat([x, y], axis=-1), 0, 1)
        picked = ad.getitem(ad.reshape(x, (6, 4)), np.array([0, 2, 2]))
        return (z * w).sum() + (picked * picked).sum()

    assert _grad_error(f, [x, y]) < 1e-6


def test_log_softmax_gradient():
    r = np.random.default_rng(9)
    x = ad.parameter(r.normal(size=(4, 3)))
    w = r.normal(size=(4, 3))
    assert _grad_error(lambda: (ad.log_softmax(x) * w).sum(), [x]) < 1e-6
    np.testing.assert_allclose(ad.softmax(x).data.sum(axis=-1), 1.0)


# -- operation examples --------------------------------------------------------------

def test_softplus_of_minus_seven():
    # oracle: 64-bit scalar evaluation of log(1 + e^-7)
    expected = math.log1p(math.exp(-7.0))
    assert ad.softplus(Tensor(np.array(-7.0))).item() == pytest.approx(expected, rel=1e-15)
    assert expected == pytest.approx(0.00091146645, rel=1e-8)


def test_softplus_is_stable_for_large_inputs():
    x = Tensor(np.array([-800.0, 0.0, 800.0]))
    out = ad.softplus(x).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.0, np.log(2.0), 800.0])


def test_additive_and_multiplicative_identities(rng):
    x = Tensor(rng.normal(size=(3, 2)))
    np.testing.assert_array_equal(ad.add(x, 0).data, x.data)
    np.testing.assert_array_equal(ad.mul(x, 1).data, x.data)


def test_matmul_examples(rng):
    v = rng.normal(size=(3, 1))
    np.testing.assert_array_equal((Tensor(np.eye(3)) @ Tensor(v)).data, v)
    out = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])) @ Tensor(np.ones((2, 1)))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])
    z = Tensor(np.zeros((2, 3))) @ Tensor(rng.normal(size=(3, 4)))
    np.testing.assert_array_equal(z.data, np.zeros((2, 4)))


def test_matmul_dimension_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_broadcast_mismatch_is_a_shape_error():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_reduce_examples():
    assert ad.reduce("sum", Tensor(np.array([1.0, 2.0, 3.0]))).item() == 6
    assert ad.reduce("mean", Tensor(np.array([2.0, 4.0]))).item() == 3
    assert ad.reduce("max", Tensor(np.array([1.0, 5.0, 2.0]))).item() == 5


def test_reduce_invalid_axis():
    with pytest.raises(ShapeError):
        ad.reduce("sum", Tensor(np.ones((2, 2))), axis=2)


def test_max_subgradient_goes_to_first_argmax():
    x = ad.parameter(np.array([1.0, 5.0, 5.0, 2.0]))
    ad.backward(ad.reduce("max", x))
    np.testing.assert_array_equal(x.grad, [0, 1, 0, 0])


def test_backward_examples():
    p = ad.parameter(np.array([1.0, 2.0]))
    ad.backward(ad.square(p).sum())
    np.testing.assert_array_equal(p.grad, [2.0, 4.0])

    q = ad.parameter(np.array([1.0, 2.0]))
    c = Tensor(np.array(3.0))
    loss = c * 2 + ad.mul(q, 0).sum() * 0
    ad.backward(loss)
    np.testing.assert_array_equal(q.grad, [0.0, 0.0])

    a = ad.parameter(np.array([1.0, -2.0, 3.0]))
    b = ad.parameter(np.array([0.5, 4.0, -1.0]))
    ad.backward((a * b).sum())
    np.testing.assert_array_equal(a.grad, b.data)
    np.testing.assert_array_equal(b.grad, a.data)


def test_backward_needs_scalar():
    with pytest.raises(ContractError):
        ad.backward(ad.parameter(np.ones(2)) * 2)


def test_leaf_gradients_accumulate_across_uses():
    p = ad.parameter(np.array([1.0, 2.0]))
    ad.backward((p * 3 + p * p).sum())
    np.testing.assert_array_equal(p.grad, [5.0, 7.0])
    ad.backward(p.sum())
    np.testing.assert_array_equal(p.grad, [6.0, 8.0])


def test_gradient_shape_equals_value_shape(rng):
    p = ad.parameter(rng.normal(size=(2, 1, 3)))
    ad.backward((p * Tensor(rng.normal(size=(4, 3)))).sum())
    assert p.grad.shape == p.shape


def test_no_grad_records_nothing():
    p = ad.parameter(np.ones(2))
    with ad.no_grad():
        y = p * 2
    assert not y.requires_grad


def test_finite_difference_check_examples(rng):
    x = ad.parameter(rng.normal(size=5))
    c = rng.normal(size=5)
    assert ad.finite_difference_check(lambda: (ad.square(x - c) * 3).sum(), [x], 1e-5) < 1e-6
    assert ad.finite_difference_check(lambda: Tensor(np.array(4.0)) + x.sum() * 0, [x]) == 0.0


def test_finite_difference_check_rejects_bad_inputs():
    x = ad.parameter(np.array([0.0]))
    with pytest.raises(ContractError):
        ad.finite_difference_check(lambda: x.sum(), [x], 0.0)
    with pytest.raises(NumericError):
        ad.finite_difference_check(lambda: ad.log(x).sum(), [x], 1e-5)


def test_nonfinite_detection():
    assert Tensor(np.array([1.0, np.nan])).has_nonfinite()
    assert not Tensor(np.array([1.0, 2.0])).has_nonfinite()


# -- properties ----------------------------------------------------------------------

@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_broadcast_gradient_equals_explicit_tiling(m, n, seed):
    r = np.random.default_rng(seed)
    row = ad.parameter(r.normal(size=(n,)))
    tiled = ad.parameter(np.tile(row.data, (m, 1)))
    w = r.normal(size=(m, n))
    ad.backward((ad.mul(Tensor(np.ones((m, n))), row) * w).sum())
    ad.backward((tiled * w).sum())
    np.testing.assert_allclose(row.grad, tiled.grad.sum(axis=0), rtol=1e-12, atol=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_tape_replay_is_deterministic(seed):
    def run():
        r = np.random.default_rng(seed)
        x = ad.parameter(r.normal(size=(3, 4)))
        w = ad.parameter(r.normal(size=(4, 2)))
        loss = ad.softplus(ad.tanh(x @ w)).mean() + ad.reduce("max", x)
        ad.backward(loss)
        return loss.data, x.grad, w.grad

    for u, v in zip(run(), run()):
        assert np.array_equal(u, v)
