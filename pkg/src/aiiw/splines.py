"""Clamped B-spline basis for the marginal mean model ``mu(t) = B(t)' beta``."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class SplineError(ValueError):
    pass


@dataclass(frozen=True)
class SplineBasis:
    """B-spline basis on ``[knots[0], knots[-1]]`` with clamped ends.

    ``knots`` are the distinct breakpoints including both interval ends;
    the full knot vector repeats each end ``degree + 1`` times.
    """

    knots: tuple[float, ...]
    degree: int = 3

    @property
    def interval(self) -> tuple[float, float]:
        return self.knots[0], self.knots[-1]

    @property
    def dim(self) -> int:
        return len(self.knots) - 2 + self.degree + 1

    @property
    def knot_vector(self) -> np.ndarray:
        k = np.asarray(self.knots)
        return np.r_[[k[0]] * self.degree, k, [k[-1]] * self.degree]

    def __call__(self, t) -> np.ndarray:
        return evaluate_basis(self, t)


def make_basis(knots, degree: int = 3) -> SplineBasis:
    knots = tuple(float(k) for k in knots)
    if len(knots) < 2:
        raise SplineError("need at least two knots (the interval ends)")
    if any(b <= a for a, b in zip(knots, knots[1:])):
        raise SplineError(f"knots must be strictly increasing: {knots}")
    if degree < 0:
        raise SplineError("degree must be non-negative")
    return SplineBasis(knots, int(degree))


def evaluate_basis(spec: SplineBasis, t) -> np.ndarray:
    """Cox-de Boor values; returns shape ``(d,)`` for scalar ``t`` else ``(m, d)``."""
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, float))
    lo, hi = spec.interval
    if np.any((t < lo) | (t > hi)) or np.any(np.isnan(t)):
        bad = t[(t < lo) | (t > hi) | np.isnan(t)][0]
        raise SplineError(f"t={bad!r} outside the basis interval [{lo}, {hi}]")
    tv = spec.knot_vector
    p = spec.degree
    breaks = np.asarray(spec.knots)
    # span index into the knot vector; right end belongs to the last span
    span = np.searchsorted(breaks, t, side="right") - 1
    span = np.clip(span, 0, len(breaks) - 2) + p

    m = t.size
    n = np.zeros((m, p + 1))
    n[:, 0] = 1.0
    left = np.zeros((m, p + 1))
    right = np.zeros((m, p + 1))
    rows = np.arange(m)
    for j in range(1, p + 1):
        left[:, j] = t - tv[span + 1 - j]
        right[:, j] = tv[span + j] - t
        saved = np.zeros(m)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            temp = n[:, r] / denom
            n[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        n[:, j] = saved
    out = np.zeros((m, spec.dim))
    first = span - p
    for r in range(p + 1):
        out[rows, first + r] = n[:, r]
    return out[0] if scalar else out


def gram_matrix(spec: SplineBasis) -> np.ndarray:
    """``V = int B(t) B(t)' dt`` by Gauss-Legendre, exact for the piecewise
    polynomial integrand of degree ``2 * degree``."""
    n_nodes = math.ceil((2 * spec.degree + 2) / 2)
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    breaks = np.asarray(spec.knots)
    v = np.zeros((spec.dim, spec.dim))
    for a, b in zip(breaks[:-1], breaks[1:]):
        half = 0.5 * (b - a)
        nodes = a + half * (x + 1.0)
        basis = evaluate_basis(spec, nodes)
        v += (basis * (w * half)[:, None]).T @ basis
    return 0.5 * (v + v.T)


def basis_integral(spec: SplineBasis) -> np.ndarray:
    """``int B(t) dt`` over the interval."""
    n_nodes = spec.degree // 2 + 1
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    breaks = np.asarray(spec.knots)
    total = np.zeros(spec.dim)
    for a, b in zip(breaks[:-1], breaks[1:]):
        half = 0.5 * (b - a)
        total += (w * half) @ evaluate_basis(spec, a + half * (x + 1.0))
    return total


def mean_curve(spec: SplineBasis, beta, t):
    beta = np.asarray(beta, float)
    if beta.shape != (spec.dim,):
        raise SplineError(f"beta has length {beta.size}, basis dimension is {spec.dim}")
    return evaluate_basis(spec, t) @ beta


def locate(specs: list[SplineBasis], t: float) -> int:
    """Index of the first interval containing ``t``."""
    for m, spec in enumerate(specs):
        lo, hi = spec.interval
        if lo <= t <= hi:
            return m
    raise SplineError(f"time {t} lies outside every modelled interval")
