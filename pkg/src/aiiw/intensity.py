"""Stratified Andersen-Gill model for assessment times.

The intensity of the k-th post-baseline assessment is
``lambda_0k(t) * exp(gamma' Z)`` while a subject is at risk for it.  ``gamma``
maximises the Breslow-ties partial likelihood; the baseline intensities are
kernel-smoothed Breslow increments.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import kernels
from .formula import IntensityFormula, intensity_matrix

log = logging.getLogger(__name__)


class NonIdentifiableError(ValueError):
    """The information matrix is singular (e.g. collinear covariates)."""


class ConvergenceError(RuntimeError):
    pass


class BandwidthError(ValueError):
    pass


@dataclass
class _Stratum:
    rows: np.ndarray          # indices into the design
    times: np.ndarray         # distinct event times
    counts: np.ndarray        # events at each time
    risk: np.ndarray          # (n_times, n_rows) 0/1 at-risk indicator
    event_rows: np.ndarray    # design indices of event rows


@dataclass
class IntensityDesign:
    """Counting-process rows ``(entry, exit]`` with event flags, strata and Z."""

    entry: np.ndarray
    exit: np.ndarray
    event: np.ndarray
    stratum: np.ndarray
    z: np.ndarray
    covariate_names: list[str] = field(default_factory=list)
    levels: dict = field(default_factory=dict)
    _strata: dict = field(default=None, repr=False)

    def __post_init__(self):
        self.entry = np.asarray(self.entry, float)
        self.exit = np.asarray(self.exit, float)
        self.event = np.asarray(self.event, bool)
        self.stratum = np.asarray(self.stratum, int)
        self.z = np.asarray(self.z, float).reshape(len(self.entry), -1)
        if np.any(self.entry >= self.exit):
            r = int(np.argmax(self.entry >= self.exit))
            raise ValueError(f"row {r}: entry {self.entry[r]} must be before exit {self.exit[r]}")

    @classmethod
    def from_counting_process(cls, cp: pd.DataFrame, formula: IntensityFormula | None = None,
                              levels: dict | None = None) -> "IntensityDesign":
        formula = formula or IntensityFormula.parse()
        z, names, levels = intensity_matrix(formula, cp, levels)
        stratum = cp["visit_number"].to_numpy(int) if formula.strata else np.ones(len(cp), int)
        return cls(cp["prev_time"].to_numpy(float), cp["time"].to_numpy(float),
                   cp["event"].to_numpy(bool), stratum, z, names, levels)

    @property
    def n_covariates(self) -> int:
        return self.z.shape[1]

    def strata(self) -> dict[int, _Stratum]:
        if self._strata is None:
            out = {}
            for k in np.unique(self.stratum):
                rows = np.flatnonzero(self.stratum == k)
                ev = rows[self.event[rows]]
                times, counts = np.unique(self.exit[ev], return_counts=True)
                risk = ((self.entry[rows][None, :] < times[:, None])
                        & (times[:, None] <= self.exit[rows][None, :])).astype(float)
                out[int(k)] = _Stratum(rows, times, counts.astype(float), risk, ev)
            self._strata = out
        return self._strata


def partial_loglik(gamma, design: IntensityDesign):
    """Breslow-ties log partial likelihood with exact gradient and hessian."""
    gamma = np.asarray(gamma, float).reshape(-1)
    p = design.n_covariates
    if gamma.size != p:
        raise ValueError(f"gamma has length {gamma.size}, design has {p} covariates")
    if not design.event.any():
        raise ValueError("design has no event rows")
    value = 0.0
    grad = np.zeros(p)
    hess = np.zeros((p, p))
    for st in design.strata().values():
        if st.times.size == 0:
            continue
        z = design.z[st.rows]
        eta = z @ gamma
        shift = eta.max() if eta.size else 0.0
        w = np.exp(eta - shift)
        s0 = st.risk @ w
        value += float(np.sum(design.z[st.event_rows] @ gamma)) - float(st.counts @ (np.log(s0) + shift))
        if p:
            s1 = st.risk @ (w[:, None] * z)
            zbar = s1 / s0[:, None]
            grad += design.z[st.event_rows].sum(axis=0) - st.counts @ zbar
            s2 = np.einsum("tr,r,ri,rj->tij", st.risk, w, z, z)
            hess -= np.einsum("t,tij->ij", st.counts, s2 / s0[:, None, None]
                              - zbar[:, :, None] * zbar[:, None, :])
    return value, grad, hess


def breslow_increments(gamma, design: IntensityDesign) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Per-stratum jump times and sizes ``d / sum_risk exp(gamma' Z)``."""
    gamma = np.asarray(gamma, float).reshape(-1)
    out = {}
    for k, st in design.strata().items():
        if st.times.size == 0:
            out[k] = (np.empty(0), np.empty(0))
            continue
        w = np.exp(design.z[st.rows] @ gamma) if design.n_covariates else np.ones(st.rows.size)
        out[k] = (st.times.copy(), st.counts / (st.risk @ w))
    return out


def smooth_baseline(times, jumps, kernel: str, bandwidth: float, t) -> np.ndarray:
    """Kernel-smoothed baseline intensity ``sum_j K((t - t_j)/b) dL_j / b``."""
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    t = np.asarray(t, float)
    if np.size(times) == 0:
        return np.zeros_like(t)
    u = (t[..., None] - np.asarray(times)) / bandwidth
    return kernels.evaluate(kernel, u) @ np.asarray(jumps) / bandwidth


@dataclass
class IntensityFit:
    gamma: np.ndarray
    covariance: np.ndarray
    loglik: float
    increments: dict[int, tuple[np.ndarray, np.ndarray]]
    kernel: str
    bandwidth: float
    formula: IntensityFormula
    covariate_names: list[str]
    levels: dict
    iterations: int = 0
    bandwidth_selected: bool = False

    @property
    def strata(self) -> list[int]:
        return sorted(self.increments)

    def cumulative_baseline(self, t, k: int):
        times, jumps = self._stratum(k)
        t = np.asarray(t, float)
        return np.concatenate([[0.0], np.cumsum(jumps)])[np.searchsorted(times, t, side="right")]

    def baseline(self, t, k: int):
        times, jumps = self._stratum(k)
        return smooth_baseline(times, jumps, self.kernel, self.bandwidth, t)

    def evaluate(self, t, z, k: int):
        """``lambda_0k(t) exp(gamma' z)``."""
        z = np.asarray(z, float)
        return self.baseline(t, k) * np.exp(z @ self.gamma if self.gamma.size else 0.0)

    def _stratum(self, k: int):
        try:
            return self.increments[int(k)]
        except KeyError:
            raise KeyError(f"unknown stratum {k}; fitted strata are {self.strata}") from None

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma.tolist(),
            "covariance": self.covariance.tolist(),
            "loglik": self.loglik,
            "increments": {str(k): [v[0].tolist(), v[1].tolist()] for k, v in self.increments.items()},
            "kernel": self.kernel,
            "bandwidth": self.bandwidth,
            "formula": str(self.formula),
            "covariate_names": self.covariate_names,
            "levels": self.levels,
            "iterations": self.iterations,
            "bandwidth_selected": self.bandwidth_selected,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IntensityFit":
        p = len(d["gamma"])
        return cls(
            np.asarray(d["gamma"], float), np.asarray(d["covariance"], float).reshape(p, p),
            d["loglik"],
            {int(k): (np.asarray(v[0], float), np.asarray(v[1], float)) for k, v in d["increments"].items()},
            d["kernel"], d["bandwidth"], IntensityFormula.parse(d["formula"]),
            list(d["covariate_names"]), dict(d["levels"]), d.get("iterations", 0),
            d.get("bandwidth_selected", False),
        )


def _check_identifiable(hess: np.ndarray, names: list[str]) -> None:
    if hess.size == 0:
        return
    info = -hess
    eig = np.linalg.eigvalsh(info)
    if not np.all(np.isfinite(eig)) or eig.min() <= 1e-10 * max(1.0, abs(eig.max())):
        raise NonIdentifiableError(
            f"singular information matrix for covariates {names}: check for collinear or "
            "constant columns"
        )


def newton_maximise(design: IntensityDesign, max_iter: int = 50, max_halvings: int = 30):
    p = design.n_covariates
    gamma = np.zeros(p)
    value, grad, hess = partial_loglik(gamma, design)
    _check_identifiable(hess, design.covariate_names)
    trace = [value]
    if p == 0:
        return gamma, value, grad, hess, 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(grad)) < 1e-8:
            return gamma, value, grad, hess, it - 1
        step = np.linalg.solve(-hess, grad)
        for _ in range(max_halvings + 1):
            cand = gamma + step
            c_val, c_grad, c_hess = partial_loglik(cand, design)
            if np.isfinite(c_val) and c_val >= value - 1e-12 * abs(value):
                break
            step = step / 2.0
        else:
            raise ConvergenceError(f"step halving failed at iteration {it}; loglik trace {trace}")
        rel = abs(c_val - value) / max(abs(value), 1.0)
        gamma, value, grad, hess = cand, c_val, c_grad, c_hess
        trace.append(value)
        if np.max(np.abs(grad)) < 1e-8 or rel < 1e-10:
            return gamma, value, grad, hess, it
    raise ConvergenceError(f"no convergence in {max_iter} iterations; loglik trace {trace}")


def fit_andersen_gill(cp: pd.DataFrame | IntensityDesign, formula: IntensityFormula | str | None = None,
                      kernel: str = "epanechnikov", bandwidth: float | None = None) -> IntensityFit:
    """Fit ``gamma`` by damped Newton and smooth the Breslow increments.

    ``bandwidth=None`` selects it with :func:`select_bandwidth`.
    """
    if isinstance(formula, str) or formula is None:
        formula = IntensityFormula.parse(formula)
    design = cp if isinstance(cp, IntensityDesign) else IntensityDesign.from_counting_process(cp, formula)
    gamma, value, _grad, hess, iters = newton_maximise(design)
    _check_identifiable(hess, design.covariate_names)
    cov = np.linalg.inv(-hess) if hess.size else np.zeros((0, 0))
    increments = breslow_increments(gamma, design)
    empty = [k for k, (t, _) in increments.items() if t.size == 0]
    if empty:
        warnings.warn(f"strata {empty} have no events; their baseline intensity is zero", stacklevel=2)
    selected = bandwidth is None
    if selected:
        bandwidth = bandwidth_from_increments(increments, int(design.event.sum()))
    elif not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    return IntensityFit(gamma, cov, value, increments, kernels.canonical_kernel(kernel), float(bandwidth),
                        formula, design.covariate_names, design.levels, iters, selected)


def evaluate_intensity(fit: IntensityFit, t, z, k: int):
    return fit.evaluate(t, z, k)


# ---------------------------------------------------------------------------
# bandwidth selection


def select_bandwidth(cp: pd.DataFrame | IntensityDesign, formula: IntensityFormula | None = None) -> float:
    """Direct plug-in bandwidth for smoothing the baseline increments."""
    design = cp if isinstance(cp, IntensityDesign) else IntensityDesign.from_counting_process(cp, formula)
    gamma = newton_maximise(design)[0]
    return bandwidth_from_increments(breslow_increments(gamma, design), int(design.event.sum()))


def bandwidth_from_increments(increments, n_events: int | None = None) -> float:
    times = np.concatenate([v[0] for v in increments.values()]) if increments else np.empty(0)
    sizes = np.concatenate([v[1] for v in increments.values()]) if increments else np.empty(0)
    n_events = times.size if n_events is None else n_events
    if n_events < 10:
        raise BandwidthError(f"only {n_events} events; at least 10 are needed, set the bandwidth manually")
    if times.size < 2 or np.ptp(times) == 0:
        raise BandwidthError("degenerate times: every event occurs at the same time")
    try:
        h = dpill(times, sizes)
        if not (np.isfinite(h) and h > 0):
            raise FloatingPointError
        return float(h)
    except (FloatingPointError, np.linalg.LinAlgError, ValueError):
        h = 1.06 * np.std(times, ddof=1) * times.size ** (-0.2)
        log.info("plug-in bandwidth failed; normal-reference fallback %.4g", h)
        if not h > 0:
            raise BandwidthError("degenerate times: fallback bandwidth is zero") from None
        return float(h)


def _poly_blocks(x, y, n_blocks, degree=4):
    """Blocked polynomial fits on equal-count blocks of sorted ``x``."""
    blocks = np.array_split(np.arange(x.size), n_blocks)
    rss = 0.0
    d2 = np.empty(x.size)
    d4 = np.empty(x.size)
    for idx in blocks:
        coef = np.polynomial.polynomial.polyfit(x[idx], y[idx], degree)
        fitted = np.polynomial.polynomial.polyval(x[idx], coef)
        rss += float(np.sum((y[idx] - fitted) ** 2))
        d2[idx] = np.polynomial.polynomial.polyval(x[idx], np.polynomial.polynomial.polyder(coef, 2))
        d4[idx] = np.polynomial.polynomial.polyval(x[idx], np.polynomial.polynomial.polyder(coef, 4))
    return rss, d2, d4


def _local_poly(x, y, at, h, degree, deriv=0):
    """Gaussian-weighted local polynomial estimate of the ``deriv``-th
    derivative at each point of ``at``; also returns the smoother rows."""
    diff = x[None, :] - at[:, None]
    w = np.exp(-0.5 * (diff / h) ** 2)
    powers = diff[:, :, None] ** np.arange(degree + 1)
    xtw = powers * w[:, :, None]
    gram = np.einsum("mnk,mnl->mkl", xtw, powers)
    rows = np.linalg.solve(gram, np.transpose(xtw, (0, 2, 1)))[:, deriv, :]
    return rows @ y * math.factorial(deriv), rows * math.factorial(deriv)


def dpill(x, y, blockmax: int = 5, divisor: int = 20, trim: float = 0.01, proptrun: float = 0.05) -> float:
    """Direct plug-in bandwidth for Gaussian local-linear regression.

    Follows the Ruppert-Sheather-Wand recipe: blocked quartic pilots chosen
    by Mallows' Cp, a local-cubic estimate of the curvature functional and a
    local-linear residual variance, computed exactly rather than on a grid.
    """
    order = np.argsort(x, kind="stable")
    x = np.asarray(x, float)[order]
    y = np.asarray(y, float)[order]
    lo_q, hi_q = np.quantile(x, [trim, 1.0 - trim])
    keep = (x >= lo_q) & (x <= hi_q)
    x, y = x[keep], y[keep]
    a, b = x.min(), x.max()
    if b <= a:
        raise ValueError("degenerate x range")
    if np.ptp(y) <= 1e-10 * np.max(np.abs(y)):
        # flat response: the curvature functional vanishes and h is unbounded
        raise ValueError("constant response")
    u = (x - a) / (b - a)  # work on [0, 1]; the bandwidth scales back linearly
    n = u.size
    n_max = max(min(n // divisor, blockmax), 1)
    rss_max = _poly_blocks(u, y, n_max)[0]
    if not rss_max > 0:
        raise ValueError("zero residual variance in blocked fits")
    cp = [(_poly_blocks(u, y, k)[0] / (rss_max / (n - 5 * n_max)) - (n - 10 * k)) for k in range(1, n_max + 1)]
    n_blocks = int(np.argmin(cp)) + 1
    rss, d2, d4 = _poly_blocks(u, y, n_blocks)
    sig2_q = rss / (n - 5 * n_blocks)
    th24 = float(np.mean(d2 * d4))
    if th24 == 0:
        raise ValueError("zero curvature functional")
    g = sig2_q / (abs(th24) * n)
    g = (3.0 * g / (8.0 * math.sqrt(math.pi))) ** (1 / 7) if th24 < 0 else \
        (15.0 * g / (16.0 * math.sqrt(math.pi))) ** (1 / 7)
    mdd, _ = _local_poly(u, y, u, g, 3, deriv=2)
    middle = (u >= proptrun) & (u <= 1.0 - proptrun)
    th22 = float(np.sum(mdd[middle] ** 2)) / n
    if not th22 > 0:
        raise ValueError("non-positive curvature estimate")
    c3k = (0.5 + 2.0 * math.sqrt(2.0) - (4.0 / 3.0) * math.sqrt(3.0))
    c3k = (4.0 * c3k / math.sqrt(2.0 * math.pi)) ** (1 / 9)
    lam = c3k * ((sig2_q ** 2) / ((th22 * n) ** 2)) ** (1 / 9)
    fitted, smoother = _local_poly(u, y, u, lam, 1)
    rss_ll = float(np.sum((y - fitted) ** 2))
    dof = n - 2.0 * np.trace(smoother) + float(np.sum(smoother ** 2))
    sig2 = rss_ll / dof
    h = (sig2 / (2.0 * math.sqrt(math.pi) * th22 * n)) ** 0.2
    return float(h * (b - a))
