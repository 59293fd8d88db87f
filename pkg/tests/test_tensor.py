"""Tensor ops, tape backward, and the finite-difference harness."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from progfusion import tensor as T
from progfusion.errors import ContractError, NumericError, ShapeError


def test_matmul_identity():
    a = T.Tensor([[1.5, -2.0], [0.25, 7.0]])
    eye = T.Tensor(np.eye(2))
    assert np.array_equal(T.matmul(eye, a).data, a.data)


def test_matmul_hand_oracle():
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = T.Tensor([[5.0], [6.0]])
    out = T.matmul(a, b)
    assert np.array_equal(out.data, [[17.0], [39.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        T.matmul(T.zeros((2, 3)), T.zeros((4, 5)))
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


def test_softmax_symmetric_row():
    out = T.softmax_rows(T.Tensor([[0.0, 0.0]]))
    assert np.allclose(out.data, [[0.5, 0.5]], atol=1e-15)


def test_softmax_closed_form():
    out = T.softmax_rows(T.Tensor([[0.0, np.log(3.0)]]))
    assert np.allclose(out.data, [[0.25, 0.75]], atol=1e-12)


def test_softmax_large_entries_no_overflow():
    with np.errstate(over="raise"):
        out = T.softmax_rows(T.Tensor([[1000.0, 1000.0]]))
    assert np.allclose(out.data, [[0.5, 0.5]])


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        T.softmax_rows(T.Tensor([[np.nan, 0.0]]))


def test_backward_quadratic():
    x = T.Tensor([[3.0]], requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(T.mul(x, x))
        grads = T.backward(loss, tape)
    assert grads[x].item() == pytest.approx(6.0)
    assert x.grad.shape == x.data.shape


def test_backward_matmul_pattern():
    # d/dA sum(A @ B) has rows equal to B's row sums
    rng = np.random.default_rng(7)
    a = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = T.Tensor(rng.standard_normal((4, 2)))
    with T.Tape() as tape:
        loss = T.sum_all(T.matmul(a, b))
        grads = T.backward(loss, tape)
    expected = np.ones((3, 2)) @ b.data.T
    assert np.allclose(grads[a], expected, atol=1e-12)
    err = T.finite_difference_check(lambda t: T.sum_all(T.matmul(t, b)), a, 1e-5)
    assert err < 1e-9


def test_backward_unreachable_leaf_gets_zero():
    x = T.Tensor([[1.0, 2.0]], requires_grad=True)
    y = T.Tensor([[5.0]], requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(T.mul(x, x))
        _ = T.mul(y, y)  # on tape but not feeding the loss
        grads = T.backward(loss, tape)
    assert np.array_equal(grads[y], np.zeros_like(y.data))


def test_backward_rejects_nonscalar_loss():
    x = T.Tensor([[1.0, 2.0]], requires_grad=True)
    with T.Tape() as tape:
        out = T.mul(x, x)
        with pytest.raises(ContractError):
            T.backward(out, tape)


def test_backward_deterministic_bitwise():
    rng = np.random.default_rng(3)
    x = T.Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    w = T.Tensor(rng.standard_normal((4, 4)), requires_grad=True)

    def run():
        with T.Tape() as tape:
            h = T.gelu(T.matmul(x, w))
            loss = T.mean(T.mul(T.softmax_rows(h), h))
            return {k: v.copy() for k, v in T.backward(loss, tape).items()}

    g1, g2 = run(), run()
    for k in g1:
        assert np.array_equal(g1[k], g2[k])


def test_fd_check_quadratic_tight():
    x = T.Tensor([[3.0]], requires_grad=True)
    err = T.finite_difference_check(lambda t: T.sum_all(T.mul(t, t)), x, 1e-5)
    assert err < 1e-8


def test_fd_check_rejects_zero_eps():
    x = T.Tensor([[1.0]])
    with pytest.raises(ContractError):
        T.finite_difference_check(lambda t: T.sum_all(t), x, 0.0)


def test_fd_check_rejects_nonscalar_f():
    x = T.Tensor([[1.0, 2.0]])
    with pytest.raises(ContractError):
        T.finite_difference_check(lambda t: T.mul(t, t), x, 1e-5)


def test_every_op_gradient_check():
    errs = T.op_gradient_checks(seed=0)
    assert len(errs) >= 20
    for name, err in errs.items():
        assert err < 1e-6, f"{name}: {err:.3e}"


def test_add_bias_row_broadcast():
    x = T.Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    b = T.Tensor([[10.0, 20.0]], requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(T.add(x, b))
        grads = T.backward(loss, tape)
    assert np.array_equal(grads[b], [[2.0, 2.0]])
    with pytest.raises(ShapeError):
        T.add(x, T.zeros((3, 3)))


def test_concat_rows_splits_gradient():
    a = T.Tensor([[1.0, 1.0]], requires_grad=True)
    b = T.Tensor([[2.0, 2.0], [3.0, 3.0]], requires_grad=True)
    with T.Tape() as tape:
        cat = T.concat_rows(a, b)
        loss = T.sum_all(T.mul(cat, T.Tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])))
        grads = T.backward(loss, tape)
    assert np.array_equal(grads[a], [[1.0, 2.0]])
    assert np.array_equal(grads[b], [[3.0, 4.0], [5.0, 6.0]])


def test_reshape_roundtrip_and_size_error():
    x = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(T.mul(T.reshape(x, (3, 2)), T.Tensor(np.ones((3, 2)))))
        grads = T.backward(loss, tape)
    assert grads[x].shape == (2, 3)
    with pytest.raises(ShapeError):
        T.reshape(x, (4, 2))


def test_bce_matches_hand_value():
    p = T.Tensor([[0.8], [0.3]])
    out = T.binary_cross_entropy(p, [[1.0], [0.0]])
    expected = -(np.log(0.8) + np.log(0.7)) / 2
    assert out.item() == pytest.approx(expected, rel=1e-12)


def test_dtype_f32_selectable():
    x = T.Tensor([[1.0]], dtype=T.DTYPES["f32"])
    assert x.dtype == np.float32
    assert T.Tensor([[1.0]]).dtype == np.float64


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-100, 100))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_sum_to_one_and_shift_invariant(row, shift):
    x = T.Tensor([row])
    out = T.softmax_rows(x).data
    assert abs(out.sum() - 1.0) < 1e-12
    shifted = T.softmax_rows(T.Tensor([[v + shift for v in row]])).data
    assert np.allclose(out, shifted, atol=1e-9)


@given(
    st.integers(1, 6), st.integers(1, 6), st.integers(1, 6),
    st.integers(0, 2**32 - 1),
)
@settings(max_examples=30, deadline=None)
def test_matmul_matches_numpy(p, q, r, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((p, q)), rng.standard_normal((q, r))
    assert np.allclose(T.matmul(T.Tensor(a), T.Tensor(b)).data, a @ b, atol=1e-12)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_layernorm_rows_are_standardized(m, n, seed):
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.standard_normal((m, n)) * 3 + 1)
    out = T.layernorm_rows(x, T.Tensor(np.ones(n)), T.Tensor(np.zeros(n))).data
    assert np.allclose(out.mean(axis=1), 0.0, atol=1e-9)
    if n > 1:
        v = x.data.var(axis=1)
        assert np.allclose(out.var(axis=1), v / (v + 1e-5), rtol=1e-9)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_l2_normalize_unit_rows(m, n, seed):
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.standard_normal((m, n)) + 0.5)
    norms = np.linalg.norm(T.l2_normalize_rows(x).data, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-9)


def test_tapes_nest_and_detach():
    x = T.Tensor([[2.0]], requires_grad=True)
    with T.Tape() as outer:
        y = T.mul(x, x)
        with T.Tape() as inner:
            z = T.mul(y, y)
            T.backward(T.sum_all(z), inner)
        assert len(outer.entries) == 1
    assert x.detach().requires_grad is False
    assert T.active_tape() is None
