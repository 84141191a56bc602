import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trust_ssm.autodiff import (DimensionError, Tape, TapeError, Tensor, backward, finite_difference_check,
                                linear_recurrence, log_softmax, no_grad, softmax_xent, stack)


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def check_grad(f, params, eps=1e-6):
    """Compare tape gradients with central differences (rtol 1e-5, atol 1e-8)."""
    for p in params:
        p.grad = None
    backward(f())
    for p in params:
        got = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        num = np.zeros(p.shape)
        flat, nflat = p.data.reshape(-1), num.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = f().item()
                flat[i] = orig - eps
                lo = f().item()
                flat[i] = orig
                nflat[i] = (hi - lo) / (2 * eps)
        np.testing.assert_allclose(got, num, rtol=1e-5, atol=1e-8)


def naive_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.data())
def test_matmul_matches_triple_loop(n, k, m, data):
    a = data.draw(arrays(np.float64, (n, k), elements=finite))
    b = data.draw(arrays(np.float64, (k, m), elements=finite))
    np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, naive_matmul(a, b), rtol=1e-12, atol=1e-12)


def test_matmul_inner_mismatch():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))


def test_broadcast_mismatch():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_batched_matmul_gradient(rng):
    a = leaf(rng.normal(size=(2, 3, 4)))
    b = leaf(rng.normal(size=(4, 5)))
    check_grad(lambda: ((a @ b) ** 2).sum(), [a, b])


UNARY = {
    "exp": lambda x: x.exp(),
    "log": lambda x: (x * x + 1.0).log(),
    "sigmoid": lambda x: x.sigmoid(),
    "silu": lambda x: x.silu(),
    "softplus": lambda x: x.softplus(),
    "pow": lambda x: (x * x + 0.5) ** 1.5,
    "div": lambda x: 1.0 / (x * x + 1.0),
    "neg_sub": lambda x: 2.0 - (-x),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(arrays(np.float64, (3, 2), elements=st.floats(-2, 2)))
def test_unary_gradients(name, values):
    x = leaf(values)
    w = Tensor(np.arange(1.0, 7.0).reshape(3, 2))
    check_grad(lambda: (UNARY[name](x) * w).sum(), [x])


@given(st.sampled_from([((3, 1), (1, 4)), ((2, 3, 4), (4,)), ((1, 4), (3, 1)), ((5,), ())]))
def test_broadcast_gradients_reduce_to_input_shape(shapes):
    rng = np.random.default_rng(0)
    a, b = leaf(rng.normal(size=shapes[0])), leaf(rng.normal(size=shapes[1]))
    f = lambda: ((a * b + a - b) ** 2).sum()  # noqa: E731
    check_grad(f, [a, b])
    assert a.grad.shape == a.shape and b.grad.shape == b.shape


def test_reductions_reshape_transpose_index(rng):
    x = leaf(rng.normal(size=(2, 3, 4)))
    idx = np.array([2, 0, 1])
    w = Tensor(rng.normal(size=(4, 6)))

    def f():
        y = x.transpose(1, 0, 2).reshape(3, 8).mean(axis=1, keepdims=True) * x[1, :, :2].sum()
        z = x.take(idx, axis=1)[:, ::2] @ w
        return y.sum() + (z ** 2).mean() + x[np.array([0, 0, 1])].sum()

    check_grad(f, [x])


def test_stack_and_log_softmax(rng):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(2, 3, 4)))
    check_grad(lambda: (log_softmax(stack([a, b]), axis=-1) * w).sum(), [a, b])


def test_stack_shape_mismatch():
    with pytest.raises(DimensionError):
        stack([Tensor(np.ones(2)), Tensor(np.ones(3))])


def test_softmax_xent_value_and_gradient(rng):
    z = leaf(rng.normal(size=(5, 4)))
    y = np.array([0, 3, 1, 1, 2])
    logits = z.data
    ref = np.mean(np.log(np.exp(logits).sum(1)) - logits[np.arange(5), y])
    assert softmax_xent(z, y).item() == pytest.approx(ref, rel=1e-12)
    check_grad(lambda: softmax_xent(z, y), [z])


def test_softmax_xent_errors():
    z = Tensor(np.zeros((2, 3)))
    with pytest.raises(IndexError):
        softmax_xent(z, [0, 3])
    with pytest.raises(DimensionError):
        softmax_xent(Tensor(np.zeros(3)), [0])
    with pytest.raises(DimensionError):
        softmax_xent(z, [0, 1, 2])


def test_softplus_is_stable_for_large_inputs():
    x = Tensor(np.array([-800.0, 0.0, 50.0, 800.0]))
    out = x.softplus().data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.0, np.log(2.0), 50.0, 800.0], rtol=1e-15, atol=1e-300)


@given(st.integers(1, 12), st.integers(1, 3))
def test_linear_recurrence_matches_loop(T, d):
    rng = np.random.default_rng(T * 10 + d)
    a, b = rng.uniform(-1, 1, size=(T, d)), rng.normal(size=(T, d))
    h, ref = np.zeros(d), []
    for t in range(T):
        h = a[t] * h + b[t]
        ref.append(h)
    out = linear_recurrence(Tensor(a), Tensor(b), axis=0).data
    np.testing.assert_allclose(out, np.array(ref), rtol=1e-13, atol=1e-13)


def test_linear_recurrence_gradient(rng):
    a, b = leaf(rng.uniform(-0.9, 0.9, size=(4, 6, 2))), leaf(rng.normal(size=(4, 6, 2)))
    w = Tensor(rng.normal(size=(4, 6, 2)))
    check_grad(lambda: (linear_recurrence(a, b, axis=1) * w).sum(), [a, b])


def test_five_point_stencil_option(rng):
    x = leaf(rng.normal(size=4))
    assert finite_difference_check(lambda: (x.exp() * x).sum(), [x], eps=1e-3, order=4) < 1e-9
    with pytest.raises(ValueError):
        finite_difference_check(lambda: x.sum(), [x], order=3)


def test_tape_is_single_use():
    x = leaf([1.0, 2.0])
    loss = (x * x).sum()
    backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])
    with pytest.raises(TapeError):
        backward(loss)


def test_backward_needs_scalar_and_a_tape():
    x = leaf([1.0, 2.0])
    with pytest.raises(TapeError):
        backward(x * 2.0)
    with pytest.raises(TapeError):
        backward(Tensor(3.0))
    with no_grad():
        y = (x * x).sum()
    with pytest.raises(TapeError):
        backward(y)


def test_explicit_tape_scoping():
    x = leaf(3.0)
    with Tape() as tape:
        y = x * x
    assert len(tape) == 1
    backward(y)
    assert x.grad == pytest.approx(6.0)


def test_grad_of_unused_leaf_is_untouched():
    x, y = leaf(1.0), leaf(2.0)
    backward(x * 3.0)
    assert x.grad == pytest.approx(3.0) and y.grad is None


def test_threads_have_independent_tapes():
    results = {}

    def work(k):
        x = leaf(float(k))
        for _ in range(50):
            loss = (x * x * float(k)).sum()
            backward(loss)
        results[k] = x.grad

    threads = [threading.Thread(target=work, args=(k,)) for k in range(1, 5)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert {k: float(v) for k, v in results.items()} == {k: 2.0 * k * k for k in range(1, 5)}


def test_finite_difference_rejects_non_finite():
    x = leaf([0.0])
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
        finite_difference_check(lambda: (x * 1e308 * 1e308).sum(), [x], eps=1.0)
