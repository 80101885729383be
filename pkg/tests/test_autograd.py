import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cognilab.autograd import (AutogradError, Tape, Tensor, cross_entropy_loss, finite_difference_check,
                               softmax_rows)

finite = st.floats(-20, 20, allow_nan=False)


def test_softmax_examples():
    np.testing.assert_allclose(softmax_rows([0.0, 0.0]), [0.5, 0.5])
    np.testing.assert_allclose(softmax_rows([1000.0, 0.0]), [1.0, 0.0], atol=1e-300)
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(softmax_rows([1.0, 2.0, 3.0]), e / e.sum(), rtol=1e-14)


@given(arrays(np.float64, (3, 5), elements=finite))
def test_softmax_rows_are_distributions(x):
    p = softmax_rows(x)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(softmax_rows(x + 7.5), p, atol=1e-12)


def test_cross_entropy_uniform_is_log_vocab():
    assert cross_entropy_loss(np.zeros((2, 3, 4)), np.zeros((2, 3), int)) == pytest.approx(math.log(4), abs=1e-14)


@given(arrays(np.float64, (4, 6), elements=finite), st.lists(st.integers(0, 5), min_size=4, max_size=4))
def test_cross_entropy_matches_naive(logits, targets):
    naive = np.mean([-math.log(math.exp(r[t]) / sum(math.exp(v) for v in r)) for r, t in zip(logits, targets)])
    assert cross_entropy_loss(logits, np.array(targets)) == pytest.approx(naive, rel=1e-9, abs=1e-9)


def test_backward_simple_examples():
    t = Tape()
    x = t.watch(Tensor(np.array(3.0)))
    t.backward(t.sum(t.mul(x, x)))
    assert x.grad == pytest.approx(6.0)

    t = Tape()
    x = t.watch(Tensor(np.array([1.0, 2.0])))
    y = t.watch(Tensor(np.array([3.0, 4.0])))
    t.backward(t.sum(t.add(x, y)))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])
    np.testing.assert_array_equal(y.grad, [1.0, 1.0])


def test_second_backward_accumulates():
    x = Tensor(np.array([2.0, -1.0]))
    for _ in range(2):
        t = Tape()
        t.watch(x)
        t.backward(t.sum(t.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * np.array([4.0, -2.0]))


def test_layer_norm_gradient():
    rng = np.random.default_rng(0)
    g = Tensor(rng.normal(size=6))
    b = Tensor(rng.normal(size=6))
    w = rng.normal(size=(3, 6))

    def f(tape, x):
        return tape.sum(tape.mul(tape.layer_norm(x, g, b), tape.const(w)))

    assert finite_difference_check(f, rng.normal(size=(3, 6)), h=1e-6) < 1e-6


@pytest.mark.parametrize("op", ["gelu", "softmax", "matmul", "transpose", "select"])
def test_op_gradients(op):
    rng = np.random.default_rng(1)
    w = rng.normal(size=(3, 4))
    m = rng.normal(size=(4, 2))

    def f(tape, x):
        if op == "gelu":
            y = tape.gelu(x)
        elif op == "softmax":
            y = tape.softmax(x)
        elif op == "matmul":
            return tape.sum(tape.matmul(x, tape.const(m)))
        elif op == "transpose":
            return tape.sum(tape.mul(tape.transpose(x, (1, 0)), tape.const(w.T)))
        else:
            return tape.sum(tape.mul(tape.select(tape.reshape(x, (3, 4)), 1), tape.const(w[1])))
        return tape.sum(tape.mul(y, tape.const(w)))

    assert finite_difference_check(f, rng.normal(size=(3, 4))) < 1e-7


def test_weighted_nll_gradient():
    rng = np.random.default_rng(2)
    targets = rng.integers(0, 5, size=(2, 3))
    weights = rng.random((2, 3))
    assert finite_difference_check(lambda t, x: t.weighted_nll(x, targets, weights),
                                   rng.normal(size=(2, 3, 5))) < 1e-7


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_raises():
    t = Tape()
    with pytest.raises(AutogradError):
        t.mul(Tensor(np.array([np.inf])), Tensor(np.array([0.0])))


def test_fd_check_rejects_bad_step():
    with pytest.raises(AutogradError):
        finite_difference_check(lambda t, x: t.sum(x), np.ones(2), h=0.0)
