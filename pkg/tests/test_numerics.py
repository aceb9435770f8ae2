import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpmoe.numerics import (ShapeError, center_columns, frobenius_inner, log_softmax, matmul,
                            softmax)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def test_matmul_identity_and_hand_case():
    M = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(matmul(np.eye(2), M), M)
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[1], [1]]), np.array([[3.0], [7.0]]))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
    np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\) x \(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        matmul(np.ones(3), np.ones((3, 1)))


def test_matmul_associative():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b, c = (rng.standard_normal(s) for s in ((4, 6), (6, 5), (5, 3)))
        left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
        assert np.linalg.norm(left - right) <= 1e-9 * np.linalg.norm(left)


def test_softmax_examples():
    np.testing.assert_allclose(softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(softmax([2.5, 2.5 + math.log(2)]), [1 / 3, 2 / 3], atol=1e-15)
    big = softmax([1000.0, 1001.0])
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, softmax([0.0, 1.0]), atol=1e-15)


def test_softmax_rejects_empty_and_nonfinite():
    with pytest.raises(ValueError):
        softmax([])
    with pytest.raises(ValueError):
        softmax([0.0, np.nan])
    with pytest.raises(ValueError):
        softmax([0.0, np.inf])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_sums_to_one_and_is_shift_invariant(v, c):
    p = softmax(v)
    assert abs(p.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(softmax(np.asarray(v) + c), p, rtol=0, atol=1e-12)


def test_softmax_batched_rows():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((5, 4))
    P = softmax(X, axis=1)
    for i in range(5):
        np.testing.assert_array_equal(P[i], softmax(X[i]))


def test_log_softmax_consistent():
    v = np.array([0.3, -2.0, 5.0])
    np.testing.assert_allclose(np.exp(log_softmax(v)), softmax(v), atol=1e-15)


def test_center_columns():
    Z = np.column_stack([np.full(5, 3.0), np.arange(5.0)])
    C = center_columns(Z)
    assert np.array_equal(C[:, 0], np.zeros(5))
    np.testing.assert_allclose(center_columns(C), C, atol=1e-12)
    rng = np.random.default_rng(3)
    R = center_columns(rng.standard_normal((8, 3)) + 4.0)
    assert R.shape == (8, 3)
    assert np.all(np.abs(R.mean(axis=0)) < 1e-12)
    with pytest.raises(ShapeError):
        center_columns(np.ones((1, 3)))


def test_frobenius_inner():
    M = np.arange(4.0).reshape(2, 2)
    assert frobenius_inner(M, np.zeros((2, 2))) == 0.0
    assert frobenius_inner(np.eye(2), np.eye(2)) == 2.0
    rng = np.random.default_rng(4)
    U, V = rng.standard_normal((6, 5)), rng.standard_normal((6, 5))
    ref = sum(U[i, j] * V[i, j] for i in range(6) for j in range(5))
    assert abs(frobenius_inner(U, V) - ref) < 1e-12
    with pytest.raises(ShapeError):
        frobenius_inner(np.ones((2, 2)), np.ones((2, 3)))
