import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from weakstrong.errors import DimensionError, NumericError, ParameterError
from weakstrong.numerics import (
    Rng,
    add,
    as_tensor,
    col_mean,
    log_softmax,
    matmul,
    mul,
    rng_normal,
    row_max,
    row_sum,
    safe_log,
    scale,
    softmax,
    sub,
    transpose,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def triple_loop(a, b):
    out = [[0.0] * len(b[0]) for _ in a]
    for i in range(len(a)):
        for j in range(len(b[0])):
            out[i][j] = sum(a[i][k] * b[k][j] for k in range(len(b)))
    return np.array(out)


def test_matmul_examples():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(np.eye(2), m), m)
    assert np.array_equal(matmul(m, np.ones((2, 1))), [[3.0], [7.0]])
    r = Rng(5)
    a, b = r.standard_normal((5, 7)), r.standard_normal((7, 3))
    np.testing.assert_allclose(matmul(a, b), triple_loop(a.tolist(), b.tolist()), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


@pytest.mark.parametrize("op", [add, sub, mul])
def test_elementwise_shape_mismatch(op):
    with pytest.raises(DimensionError):
        op(np.zeros((2, 2)), np.zeros((2, 3)))


def test_elementwise_and_reductions():
    a = np.array([[1.0, -2.0], [3.0, 4.0]])
    b = np.array([[0.5, 0.5], [1.0, -1.0]])
    assert np.array_equal(add(a, b), a + b)
    assert np.array_equal(sub(a, b), a - b)
    assert np.array_equal(mul(a, b), a * b)
    assert np.array_equal(scale(a, 2.0), 2 * a)
    assert np.array_equal(row_sum(a), [[-1.0], [7.0]])
    assert np.array_equal(col_mean(a), [[2.0, 1.0]])
    assert np.array_equal(row_max(a), [[1.0], [4.0]])
    with pytest.raises(DimensionError):
        col_mean(np.zeros((0, 2)))


def test_as_tensor_rejects_bad_input():
    with pytest.raises(DimensionError):
        as_tensor([1.0, 2.0])
    with pytest.raises(NumericError):
        as_tensor([[1.0, np.nan]])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_results_raise():
    with pytest.raises(NumericError):
        scale(np.array([[1e308]]), 10.0)


def test_stable_log_and_softmax():
    assert np.isfinite(safe_log(np.array([0.0]))).all()
    np.testing.assert_allclose(softmax(np.array([[0.0, np.log(3.0)]])), [[0.25, 0.75]], atol=1e-15)
    np.testing.assert_array_equal(softmax(np.array([[1000.0, 1000.0]])), [[0.5, 0.5]])
    np.testing.assert_allclose(np.exp(log_softmax(np.array([[-800.0, 0.0, 800.0]]))).sum(), 1.0)


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=finite))
def test_identity_and_double_transpose(m):
    assert np.array_equal(matmul(np.eye(m.shape[0]), m), m)
    assert np.array_equal(transpose(transpose(m)), m)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=finite))
def test_ops_are_pure(m):
    before = m.copy()
    out = add(m, m)
    assert out is not m
    scale(m, 3.0)
    transpose(m)
    assert np.array_equal(m, before)


def test_rng_normal_examples():
    assert np.array_equal(rng_normal(Rng(1), 3, 4, mean=2.5, std=0.0), np.full((3, 4), 2.5))
    draws = rng_normal(Rng(42), 100, 100)
    assert abs(draws.mean()) < 0.05
    assert abs(draws.std() - 1.0) < 0.05
    assert np.array_equal(rng_normal(Rng(42), 10, 10), rng_normal(Rng(42), 10, 10))
    with pytest.raises(ParameterError):
        rng_normal(Rng(0), 2, 2, std=-1.0)


def test_rng_streams():
    assert not np.array_equal(Rng(7).uniform(5), Rng(8).uniform(5))
    r = Rng(7)
    assert np.array_equal(r.spawn(3).uniform(5), Rng(7).spawn(3).uniform(5))
    assert not np.array_equal(r.spawn(3).uniform(5), r.spawn(4).uniform(5))
    with pytest.raises(ParameterError):
        Rng(-1)


@settings(max_examples=30)
@given(st.integers(0, 2**32), st.integers(0, 50))
def test_spawned_streams_are_reproducible(seed, index):
    assert np.array_equal(Rng(seed).spawn(index).standard_normal(4), Rng(seed).spawn(index).standard_normal(4))
