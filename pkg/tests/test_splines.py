import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.interpolate import BSpline

from aiiw import splines


def test_dimension_for_three_knots():
    assert splines.make_basis((76, 654, 1232), 3).dim == 5


def test_degree_zero_indicator():
    spec = splines.make_basis((0, 1), 0)
    assert spec.dim == 1
    np.testing.assert_array_equal(spec(np.array([0.0, 0.3, 1.0])), [[1.0], [1.0], [1.0]])
    np.testing.assert_array_equal(splines.gram_matrix(spec), [[1.0]])


def test_linear_hats():
    spec = splines.make_basis((0, 0.5, 1), 1)
    assert spec.dim == 3
    np.testing.assert_allclose(spec(0.25), [0.5, 0.5, 0.0], atol=1e-15)


def test_hat_gram():
    spec = splines.make_basis((0, 1), 1)
    np.testing.assert_allclose(splines.gram_matrix(spec), [[1 / 3, 1 / 6], [1 / 6, 1 / 3]], rtol=0, atol=1e-15)


def test_bad_knots():
    with pytest.raises(splines.SplineError):
        splines.make_basis((0, 2, 1))
    with pytest.raises(splines.SplineError):
        splines.make_basis((1,))


def test_clamped_left_end():
    spec = splines.make_basis((76, 654, 1232))
    b = spec(76.0)
    assert b[0] == 1.0 and np.all(b[1:] == 0.0)


def test_no_extrapolation():
    spec = splines.make_basis((76, 654, 1232))
    with pytest.raises(splines.SplineError):
        spec(75.9)


knot_lists = st.lists(st.floats(-50, 50, allow_nan=False), min_size=2, max_size=6, unique=True).map(sorted).filter(
    lambda k: min(np.diff(k)) > 1e-3)


@settings(max_examples=60, deadline=None)
@given(knot_lists, st.integers(0, 4))
def test_partition_of_unity_and_gram(knots, degree):
    spec = splines.make_basis(knots, degree)
    t = np.linspace(knots[0], knots[-1], 101)
    np.testing.assert_allclose(spec(t).sum(axis=1), 1.0, rtol=0, atol=1e-12)
    v = splines.gram_matrix(spec)
    assert np.min(np.linalg.eigvalsh(v)) > 0
    one = np.ones(spec.dim)
    assert one @ v @ one == pytest.approx(knots[-1] - knots[0], rel=0, abs=1e-10 * max(1.0, knots[-1] - knots[0]))


@settings(max_examples=30, deadline=None)
@given(knot_lists, st.integers(1, 3), st.integers(0, 2 ** 31))
def test_matches_scipy_bspline(knots, degree, seed):
    spec = splines.make_basis(knots, degree)
    beta = np.random.default_rng(seed).normal(size=spec.dim)
    ref = BSpline(spec.knot_vector, beta, degree, extrapolate=False)
    t = np.linspace(knots[0], knots[-1], 57)[:-1]
    np.testing.assert_allclose(splines.mean_curve(spec, beta, t), ref(t), rtol=0, atol=1e-12)


def test_gram_matches_adaptive_quadrature():
    rng = np.random.default_rng(0)
    for _ in range(5):
        knots = np.sort(rng.uniform(0, 10, 4))
        spec = splines.make_basis(knots, 3)
        v = splines.gram_matrix(spec)
        for i in range(spec.dim):
            for j in range(i, spec.dim):
                ref = sum(integrate.quad(lambda t: spec(t)[i] * spec(t)[j], a, b, epsabs=1e-14, epsrel=1e-14)[0]
                          for a, b in zip(knots[:-1], knots[1:]))
                assert v[i, j] == pytest.approx(ref, abs=1e-10)


def test_mean_curve_constant_and_zero():
    spec = splines.make_basis((0, 3, 7, 10))
    t = np.linspace(0, 10, 21)
    np.testing.assert_allclose(splines.mean_curve(spec, np.full(spec.dim, 2.5), t), 2.5, atol=1e-12)
    np.testing.assert_array_equal(splines.mean_curve(spec, np.zeros(spec.dim), t), 0.0)
    with pytest.raises(splines.SplineError):
        splines.mean_curve(spec, np.zeros(spec.dim + 1), 1.0)


def test_continuity_at_knot():
    spec = splines.make_basis((76, 654, 1232))
    beta = np.random.default_rng(1).normal(size=spec.dim)
    left = splines.mean_curve(spec, beta, 654 - 1e-9)
    right = splines.mean_curve(spec, beta, 654 + 1e-9)
    assert abs(left - right) < 1e-10


def test_basis_integral():
    spec = splines.make_basis((0, 2, 5))
    ref = [integrate.quad(lambda t: spec(t)[j], 0, 5, points=[2], epsabs=1e-13)[0] for j in range(spec.dim)]
    np.testing.assert_allclose(splines.basis_integral(spec), ref, atol=1e-12)


def test_locate_multi_interval():
    specs = [splines.make_basis((0, 10)), splines.make_basis((20, 30))]
    assert splines.locate(specs, 5) == 0 and splines.locate(specs, 25) == 1
    with pytest.raises(splines.SplineError):
        splines.locate(specs, 15)
