import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tthlab.errors import DegenerateInputError, DimensionError, NumericError
from tthlab.numerics import (
    avg_pool,
    avg_pool_backward,
    cosine,
    finite_diff_grad,
    grad_check,
    l2_normalize,
    l2_normalize_backward,
    matmul,
    tanh_backward,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestNormalize:
    def test_unit_rows(self, rng):
        v = rng.normal(size=(7, 5))
        np.testing.assert_allclose(np.linalg.norm(l2_normalize(v), axis=1), 1.0, atol=1e-12)

    def test_zero_vector_rejected(self):
        with pytest.raises(DegenerateInputError):
            l2_normalize(np.zeros(3))

    def test_known_value(self):
        np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8])

    @given(arrays(np.float64, 6, elements=finite).filter(lambda a: np.linalg.norm(a) > 1e-3),
           st.floats(0.01, 100))
    def test_scale_invariant(self, v, s):
        np.testing.assert_allclose(l2_normalize(v * s), l2_normalize(v), atol=1e-12)

    def test_backward_matches_finite_differences(self, rng):
        u = rng.normal(size=6)
        up = rng.normal(size=6)
        num = finite_diff_grad(lambda x: float(up @ l2_normalize(x)), u)
        assert grad_check(l2_normalize_backward(u, up), num).passed

    def test_backward_orthogonal_to_input(self, rng):
        u = rng.normal(size=(4, 6))
        g = l2_normalize_backward(u, rng.normal(size=(4, 6)))
        np.testing.assert_allclose(np.sum(g * u, axis=1), 0.0, atol=1e-12)

    def test_backward_zero_rejected(self):
        with pytest.raises(NumericError):
            l2_normalize_backward(np.zeros(3), np.ones(3))


class TestCosine:
    def test_parallel_and_opposite(self):
        assert cosine([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
        assert cosine([1, 0], [-3, 0]) == pytest.approx(-1.0)

    def test_orthogonal(self):
        assert cosine([1, 0, 0], [0, 5, 0]) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            cosine([1, 2], [1, 2, 3])

    def test_zero(self):
        with pytest.raises(DegenerateInputError):
            cosine([0, 0], [1, 1])

    @given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite))
    def test_bounded_and_symmetric(self, a, b):
        if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
            return
        c = cosine(a, b)
        assert -1.0 <= c <= 1.0
        assert c == pytest.approx(cosine(b, a), abs=1e-12)


class TestMatmul:
    def test_inner_dim_checked(self):
        with pytest.raises(DimensionError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_agrees_with_numpy(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(matmul(a, b), a @ b)


class TestPooling:
    def test_hand_example(self):
        x = np.arange(16, dtype=float).reshape(4, 4, 1)
        expected = np.array([[2.5, 4.5], [10.5, 12.5]])[..., None]
        np.testing.assert_array_equal(avg_pool(x, 2), expected)

    def test_indivisible(self):
        with pytest.raises(DimensionError):
            avg_pool(np.zeros((5, 4, 3)), 2)

    @settings(max_examples=30)
    @given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 2, 4]), st.integers(0, 2 ** 31))
    def test_backward_is_adjoint(self, bh, bw, f, seed):
        # <pool(x), y> == <x, pool_backward(y)> for every x, y
        r = np.random.default_rng(seed)
        x = r.normal(size=(bh * f, bw * f, 3))
        y = r.normal(size=(bh, bw, 3))
        lhs = np.sum(avg_pool(x, f) * y)
        rhs = np.sum(x * avg_pool_backward(y, f))
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)

    def test_batch_axes(self, rng):
        x = rng.normal(size=(2, 3, 8, 8, 3))
        np.testing.assert_allclose(avg_pool(x, 4)[1, 2], avg_pool(x[1, 2], 4))


class TestGradCheck:
    def test_tanh_backward(self, rng):
        z = rng.normal(size=5)
        up = rng.normal(size=5)
        num = finite_diff_grad(lambda t: float(up @ np.tanh(t)), z)
        assert grad_check(tanh_backward(np.tanh(z), up), num).passed

    def test_quadratic_oracle(self):
        x = np.array([1.0, -2.0, 0.5])
        np.testing.assert_allclose(finite_diff_grad(lambda v: float(v @ v), x), 2 * x, rtol=1e-8)

    def test_detects_wrong_gradient(self):
        report = grad_check(np.array([1.0, 2.0]), np.array([1.0, 2.1]))
        assert not report.passed and report.probe_count == 2

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            grad_check(np.ones(2), np.ones(3))

    def test_nonpositive_step(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda v: 0.0, np.ones(2), h=0.0)
