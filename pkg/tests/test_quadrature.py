import math

import numpy as np
import pytest

from aiiw import quadrature


def test_constant_exact():
    assert quadrature.adaptive_simpson(lambda t: np.full(t.shape, 3.0), 1.0, 4.0) == 9.0


@pytest.mark.parametrize("coef", [(1.0, -2.0, 0.5, 3.0), (0.0, 0.0, 0.0, -7.0), (2.0, 1.0, 1.0, 1.0)])
def test_cubic_exact(coef):
    a, b = -1.3, 2.7
    poly = np.polynomial.Polynomial(coef)
    exact = poly.integ()(b) - poly.integ()(a)
    assert abs(quadrature.adaptive_simpson(poly, a, b, tol=1e-3) - exact) < 1e-12


def test_exponential():
    assert abs(quadrature.adaptive_simpson(np.exp, 0.0, 1.0, tol=1e-8) - (math.e - 1)) < 1e-8


def test_vector_valued():
    got = quadrature.adaptive_simpson(lambda t: np.c_[np.sin(t), np.cos(t)], 0.0, math.pi, tol=1e-10)
    np.testing.assert_allclose(got, [2.0, 0.0], atol=1e-9)


def test_depth_limit():
    with pytest.raises(quadrature.QuadratureError, match="depth"):
        quadrature.adaptive_simpson(lambda t: np.sqrt(np.abs(t - 0.3)), 0.0, 1.0, tol=1e-15, max_depth=5)


def test_batch_pieces_independent():
    a, b = np.array([0.0, 1.0, 2.0]), np.array([1.0, 3.0, 2.5])
    got = quadrature.adaptive_simpson_batch(lambda t, p: np.exp(t * (p + 1)), a, b, 1e-10)[:, 0]
    exact = [(math.exp(k * hi) - math.exp(k * lo)) / k for k, lo, hi in zip((1, 2, 3), a, b)]
    np.testing.assert_allclose(got, exact, rtol=1e-9)


def test_trapezoid_linear_exact():
    assert quadrature.fixed_trapezoid(lambda t: 2 * t + 1, 0.0, 3.0, resolution=2) == pytest.approx(12.0, abs=1e-14)


def test_trapezoid_two_points():
    assert quadrature.fixed_trapezoid(lambda t: t * t, 0.0, 1.0, resolution=2) == 0.5


def test_trapezoid_converges_to_adaptive():
    f = lambda t: np.exp(-t) * np.sin(3 * t)  # noqa: E731
    fine = quadrature.fixed_trapezoid(f, 0.0, 2.0, resolution=100_000)
    adaptive = quadrature.adaptive_simpson(f, 0.0, 2.0, tol=1e-10)
    assert abs(fine - adaptive) < 1e-6


def test_trapezoid_needs_grid():
    with pytest.raises(ValueError):
        quadrature.fixed_trapezoid(np.exp, 0.0, 1.0)
    with pytest.raises(ValueError):
        quadrature.fixed_trapezoid(np.exp, 0.0, 1.0, resolution=1)


def test_trapezoid_batch_matches_single():
    f = lambda t, p: np.cos(t) + p  # noqa: E731
    got = quadrature.fixed_trapezoid_batch(f, [0.0, 1.0], [1.0, 2.5], 0.01)[:, 0]
    for k, (lo, hi) in enumerate([(0.0, 1.0), (1.0, 2.5)]):
        ref = quadrature.fixed_trapezoid(lambda t: np.cos(t) + k, lo, hi, delta=0.01)
        assert got[k] == pytest.approx(ref, abs=1e-14)
