import subprocess
import sys

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mor1e.numeric import (
    cosine_similarity,
    derive_seed,
    finite_diff_gradient,
    make_rng,
    matvec,
    outer,
    softmax,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_matvec_examples():
    assert np.array_equal(matvec(np.eye(3), [1, 2, 3]), [1, 2, 3])
    assert np.array_equal(matvec(np.zeros((2, 3)), [4, 5, 6]), [0, 0])
    assert np.array_equal(matvec([[1, 2], [3, 4]], [1, 1]), [3, 7])


def test_matvec_dimension_error_names_both_dims():
    with pytest.raises(ValueError, match="3 columns.*dim 2"):
        matvec(np.ones((2, 3)), [1.0, 2.0])


def test_outer_examples():
    assert np.array_equal(outer([1, 0], [0, 1]), [[0, 1], [0, 0]])
    assert not outer([3, 4], [0, 0]).any()
    assert np.array_equal(outer([2, 3], [4, 5]), [[8, 10], [12, 15]])


def test_softmax_examples():
    assert np.allclose(softmax([0, 0, 0, 0]), 0.25, atol=0, rtol=0)
    p = softmax([3.0, 53.0])
    assert abs(p[1] - 1.0) < 1e-12 and p[0] < 1e-12
    # frozen from a 50-digit mpmath evaluation
    expected = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219]
    mpmath.mp.dps = 50
    e = [mpmath.e**i for i in (1, 2, 3)]
    assert np.allclose(expected, [float(x / sum(e)) for x in e], rtol=0, atol=1e-17)
    assert np.max(np.abs(softmax([1.0, 2.0, 3.0]) - expected)) < 1e-15


def test_cosine_examples():
    v = np.array([0.3, -2.0, 5.0])
    assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 1], [1, 0]) == pytest.approx(1 / np.sqrt(2), abs=1e-15)
    with pytest.raises(ValueError, match="zero-norm"):
        cosine_similarity([0, 0], [1, 0])


def test_finite_diff_examples():
    g = finite_diff_gradient(lambda x: float(np.sum(x**2)), [1.0, 2.0], 1e-5)
    assert np.max(np.abs(g - [2, 4])) < 1e-8
    assert np.max(np.abs(finite_diff_gradient(lambda x: 3.0, [1.0, -1.0, 2.0]))) < 1e-10
    x = np.array([0.3, -0.1, 0.7])
    p = softmax(x)
    jac_row = p[0] * (np.eye(3)[0] - p)  # d p0 / d x
    fd = finite_diff_gradient(lambda z: softmax(z)[0], x, 1e-5)
    assert np.max(np.abs(fd - jac_row)) < 1e-7


def test_finite_diff_rejects_non_finite():
    with pytest.raises(ValueError, match="non-finite"):
        finite_diff_gradient(lambda x: float("nan"), [1.0])
    with pytest.raises(ValueError):
        finite_diff_gradient(lambda x: 0.0, [1.0], h=0)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_matvec_linear(rows, cols, data):
    a = data.draw(arrays(np.float64, (rows, cols), elements=st.floats(-10, 10)))
    x = data.draw(arrays(np.float64, cols, elements=st.floats(-10, 10)))
    y = data.draw(arrays(np.float64, cols, elements=st.floats(-10, 10)))
    al, be = data.draw(st.floats(-5, 5)), data.draw(st.floats(-5, 5))
    lhs = matvec(a, al * x + be * y)
    rhs = al * matvec(a, x) + be * matvec(a, y)
    assert np.max(np.abs(lhs - rhs)) < 1e-10 * max(1.0, np.max(np.abs(a)) * 100 * cols)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_outer_applied_is_scaled_u(m, n, data):
    u = data.draw(arrays(np.float64, m, elements=st.floats(-10, 10)))
    v = data.draw(arrays(np.float64, n, elements=st.floats(-10, 10)))
    x = data.draw(arrays(np.float64, n, elements=st.floats(-10, 10)))
    lhs = matvec(outer(u, v), x)
    assert np.allclose(lhs, np.dot(v, x) * u, rtol=1e-12, atol=1e-12 * (1 + np.abs(lhs).max()) * n)
    assert np.linalg.matrix_rank(outer(u, v)) <= 1


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=finite), st.floats(-100, 100))
def test_softmax_is_probability_vector_and_shift_invariant(z, c):
    p = softmax(z)
    assert np.all(p >= 0) and np.all(p <= 1)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.allclose(softmax(z + c), p, rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(0.1, 10)), arrays(np.float64, 4, elements=st.floats(-10, 10)),
       st.floats(0.01, 100), st.floats(0.01, 100))
def test_cosine_scale_invariant(a, b, alpha, beta):
    if np.linalg.norm(b) == 0:
        return
    c = cosine_similarity(a, b)
    assert -1 <= c <= 1
    assert abs(cosine_similarity(alpha * a, beta * b) - c) < 1e-12


def test_rng_golden_values():
    assert make_rng(42).random(3).tolist() == [0.08607763073528474, 0.14155732377913233, 0.27009303504774695]
    assert make_rng(7).integers(0, 2**32, 3).tolist() == [1153793966, 2013555774, 4182739653]
    assert derive_seed(0, "data") == 11614811347330167572


def test_rng_stream_identical_across_processes():
    code = "from mor1e.numeric import make_rng; print(make_rng(99).standard_normal(5).tobytes().hex())"
    runs = {subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
            for _ in range(2)}
    assert len(runs) == 1
    assert runs.pop().strip() == make_rng(99).standard_normal(5).tobytes().hex()


def test_derive_seed_labels_are_independent():
    assert derive_seed(1, "a") != derive_seed(1, "b")
    assert derive_seed(1, "a") == derive_seed(1, "a")
