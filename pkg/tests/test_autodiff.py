import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from iccr import autodiff as ad
from iccr import checks
from iccr.autodiff import Tape, Tensor, backward


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def grads_of(fn, *values):
    ts = [leaf(v) for v in values]
    with Tape() as tape:
        out = fn(*ts)
    g = backward(out, tape, ts)
    return [g[t] for t in ts]


@pytest.mark.parametrize("name", sorted(checks._primitive_cases(np.random.default_rng(0))))
def test_primitive_vjp_matches_finite_differences(name):
    fn, x = checks._primitive_cases(np.random.default_rng(0))[name]
    assert ad.grad_check(fn, x) < checks.GRAD_TOL


def test_matmul_gradients_by_hand():
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    B = np.array([[0.5, -1.0], [2.0, 1.0]])
    gA, gB = grads_of(lambda a, b: ad.sum_(a @ b), A, B)
    ones = np.ones((2, 2))
    np.testing.assert_allclose(gA, ones @ B.T)
    np.testing.assert_allclose(gB, A.T @ ones)


def test_matmul_inner_dimension_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_broadcast_add_unbroadcasts_gradient():
    (gb,) = grads_of(lambda b: ad.sum_(Tensor(np.ones((4, 3))) + b), np.zeros(3))
    np.testing.assert_array_equal(gb, np.full(3, 4.0))


def test_gradient_accumulates_over_reuse():
    (g,) = grads_of(lambda x: ad.sum_(x * x + x), np.array([1.0, -2.0]))
    np.testing.assert_allclose(g, [3.0, -3.0])


def test_causal_softmax_masks_and_normalises(rng):
    out = ad.softmax_causal(Tensor(rng.normal(size=(3, 5, 5)))).data
    assert np.all(np.triu(out, k=1) == 0.0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-15)


def test_causal_softmax_requires_square():
    with pytest.raises(ad.ShapeError):
        ad.softmax_causal(Tensor(np.zeros((2, 3))))


def test_layer_norm_output_is_standardised(rng):
    x = rng.normal(3.0, 5.0, size=(4, 16))
    out = ad.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    v = x.var(axis=-1)
    np.testing.assert_allclose(out.var(axis=-1), v / (v + ad.LN_EPS), rtol=1e-12)


def test_gelu_known_values():
    out = ad.gelu(Tensor(np.array([0.0, 1.0, -1.0]))).data
    c = math.sqrt(2 / math.pi)
    ref = [0.0, 0.5 * (1 + math.tanh(c * 1.044715)), -0.5 * (1 - math.tanh(c * 1.044715))]
    np.testing.assert_allclose(out, ref, rtol=1e-15)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_output_raises_immediately():
    x = leaf([1e308])
    with Tape():
        with pytest.raises(ad.NumericError, match="mul"):
            ad.mul(x, Tensor([1e10]))


def test_backward_rejects_non_scalar():
    x = leaf(np.ones(3))
    with Tape() as tape:
        y = x * x
    with pytest.raises(ValueError, match="scalar"):
        backward(y, tape)


def test_backward_rejects_loss_from_another_tape():
    x = leaf(np.ones(2))
    with Tape():
        y = ad.sum_(x * x)
    with Tape() as other:
        ad.sum_(x)
    with pytest.raises(ValueError, match="not recorded"):
        backward(y, other)


def test_unreachable_params_get_zero_gradient():
    x, unused = leaf(np.ones(2)), leaf(np.ones(3))
    with Tape() as tape:
        y = ad.sum_(x)
    g = backward(y, tape, [x, unused])
    np.testing.assert_array_equal(g[unused], np.zeros(3))


def test_backward_without_params_returns_reached_leaves():
    x, c = leaf(np.ones(2)), Tensor(np.ones(2))
    with Tape() as tape:
        y = ad.sum_(x * c)
    g = backward(y, tape)
    assert list(g) == [x]


def test_nothing_recorded_without_grad_inputs():
    with Tape() as tape:
        ad.tanh(Tensor(np.ones(3)))
    assert len(tape) == 0


def test_nested_tapes_record_on_innermost():
    x = leaf(np.ones(2))
    with Tape() as outer:
        with Tape() as inner:
            ad.sum_(x)
    assert len(inner) == 1 and len(outer) == 0


def test_grad_check_flags_a_wrong_vjp():
    def bad_square(t):
        return ad._emit("bad", t.data**2, (t,), lambda g: (g * t.data,))  # should be 2 t
    assert ad.grad_check(lambda t: ad.sum_(bad_square(t)), np.array([1.0, 2.0])) > 0.1


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-3, 3, allow_nan=False)))
def test_linearity_of_sum_gradient(x):
    (g,) = grads_of(lambda t: ad.sum_(ad.scale(t, 2.5)), x)
    np.testing.assert_array_equal(g, np.full(x.shape, 2.5))


@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-4, 4, allow_nan=False)))
def test_tanh_gradient_identity(x):
    (g,) = grads_of(lambda t: ad.sum_(ad.tanh(t)), x)
    np.testing.assert_allclose(g, 1.0 - np.tanh(x) ** 2, rtol=1e-14, atol=1e-300)


@given(st.integers(2, 6), st.integers(0, 2**31))
def test_causal_softmax_rows_stochastic(T, seed):
    logits = np.random.default_rng(seed).normal(0, 5, size=(T, T))
    out = ad.softmax_causal(Tensor(logits)).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-14)
    assert np.all(out[np.triu_indices(T, 1)] == 0.0)
