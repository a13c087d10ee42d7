"""Augmented inverse-intensity-weighted estimation under exponential tilting.

For an arm and a sensitivity parameter ``alpha`` the marginal mean
``mu(t) = B(t)' beta`` is estimated by

    beta = V^{-1} (1/n) sum_i (phi_i1 + phi_i2)

where ``phi_i1`` sums ``B(T)(Y - E_alpha[Y | past]) / rho`` over the
subject's assessments and ``phi_i2`` integrates ``B(t) E_alpha[Y | past(t)]``
over the modelled interval.  ``E_alpha`` is the outcome distribution at an
assessment tilted by ``exp(alpha * y)``.
"""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import interpolate, linalg

from . import data as trial_data
from . import quadrature, splines
from .formula import IntensityFormula, OutcomeDesignTransform, OutcomeFormula, intensity_matrix
from .intensity import IntensityFit, fit_andersen_gill
from .single_index import (FITTERS, MODES, ConditionalDistribution, FitOptions, OutcomeDesign,
                           SingleIndexFit, numerical_hessian)
from .single_index import objective as si_objective
from .single_index import parameters as si_parameters

log = logging.getLogger(__name__)

Z95 = 1.959963984540054


class EstimationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# tilting


@dataclass(frozen=True)
class TiltedMoments:
    e_alpha: float
    ye_alpha: float
    tilted_mean: float


def _shift(support: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    """``max_y alpha * y`` per alpha, the exponent subtracted before exp."""
    return np.maximum(alphas * support[0], alphas * support[-1])


def tilt(probs: np.ndarray, support: np.ndarray, alphas) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shifted tilting normaliser and tilted means for rows of ``probs``.

    Returns ``(log_e, mean, shift)`` with ``log E[e^{aY}] = log_e`` and
    ``mean = E[Y e^{aY}] / E[e^{aY}]``, each of shape (m, n_alpha).
    """
    alphas = np.atleast_1d(np.asarray(alphas, float))
    shift = _shift(support, alphas)
    ex = np.exp(np.outer(support, alphas) - shift)            # (L, A), entries <= 1
    e = probs @ ex
    ye = probs @ (support[:, None] * ex)
    return np.log(e) + shift, ye / e, shift


def tilted_moments(dist: ConditionalDistribution, alpha: float) -> TiltedMoments:
    support = np.asarray(dist.support, float)
    w = np.asarray(dist.weights, float)
    shift = float(_shift(support, np.array([alpha]))[0])
    ex = np.exp(alpha * support - shift)
    e = float(w @ ex)
    ye = float(w @ (support * ex))
    scale = math.exp(shift)
    return TiltedMoments(e * scale, ye * scale, ye / e)


def rho(lambda_val: float, dist: ConditionalDistribution, alpha: float, y: float) -> float:
    """``lambda * E[e^{alpha Y}] / e^{alpha y}`` with a common shift."""
    if lambda_val < 0:
        raise ValueError("intensity must be non-negative")
    support = np.asarray(dist.support, float)
    shift = float(_shift(support, np.array([alpha]))[0])
    e = float(np.asarray(dist.weights) @ np.exp(alpha * support - shift))
    return float(lambda_val * e / math.exp(alpha * y - shift))


# ---------------------------------------------------------------------------
# options


@dataclass
class QuadratureOptions:
    method: str = "adaptive"
    tol: float = 1e-6
    resolution: int = 1000
    delta: float | None = None
    index_grid: int | None = 2001

    def __post_init__(self):
        if self.method not in ("adaptive", "fixed"):
            raise ValueError(f"quadrature method must be 'adaptive' or 'fixed', got {self.method!r}")
        if self.index_grid is not None and self.index_grid < 4:
            raise ValueError("index_grid needs at least 4 points")


@dataclass
class JackknifeOptions:
    """Replicates warm-start the outcome model from the full-data fit.

    With ``newton`` they take Newton steps using the full-data PSIS Hessian
    and only fall back to Nelder-Mead (small simplex, stopping at size
    ``x_tol``) when those stall.
    """

    warm_start: bool = True
    newton: bool = True
    simplex_scale: float = 0.02
    x_tol: float = 1e-3
    max_failure_fraction: float = 0.05


@dataclass
class ModelOptions:
    intensity_formula: str | None = None
    intensity_kernel: str = "epanechnikov"
    bandwidth: float | None = None
    outcome_formula: str | None = None
    fitter: str = "fixed-coef"
    outcome: FitOptions = field(default_factory=FitOptions)
    knots: list[tuple[float, ...]] = field(default_factory=list)
    degree: int = 3
    quadrature: QuadratureOptions = field(default_factory=QuadratureOptions)
    rho_floor: float = 1e-10
    weight_cap_quantile: float | None = None
    jackknife: JackknifeOptions = field(default_factory=JackknifeOptions)

    def __post_init__(self):
        if self.fitter not in MODES:
            raise ValueError(f"unknown fitter {self.fitter!r}; choose from {MODES}")
        if not self.knots:
            raise ValueError("at least one knot sequence is required")
        if self.weight_cap_quantile is not None and not 0 < self.weight_cap_quantile <= 1:
            raise ValueError("weight_cap_quantile must be in (0, 1]")

    def specs(self) -> list[splines.SplineBasis]:
        return [splines.make_basis(k, self.degree) for k in self.knots]


# ---------------------------------------------------------------------------
# per-arm data layout


def canonical_order(cp: pd.DataFrame) -> pd.DataFrame:
    """Order subjects by their recorded content rather than their ids, so
    relabelling subjects cannot change any floating-point reduction."""
    if cp.empty:
        return cp.reset_index(drop=True)
    value_cols = [c for c in cp.columns if c != "id"]
    keys = {}
    for sid, rows in cp.groupby("id", sort=False):
        key = []
        for c in value_cols:
            for v in rows[c].tolist():
                if isinstance(v, (float, np.floating)) and math.isnan(v):
                    key.append((1, ""))
                elif isinstance(v, (int, float, np.integer, np.floating, bool, np.bool_)):
                    key.append((0, float(v)))
                else:
                    key.append((2, str(v)))
        keys[sid] = (len(rows), key)
    order = sorted(keys, key=lambda s: keys[s])
    rank = {sid: r for r, sid in enumerate(order)}
    pos = cp["id"].map(rank).to_numpy()
    idx = np.lexsort((np.arange(len(cp)), pos))
    return cp.iloc[idx].reset_index(drop=True)


@dataclass
class ArmLayout:
    """Event rows and between-assessment pieces of one arm, in subject order."""

    subjects: list
    event_subject: np.ndarray
    event_time: np.ndarray
    event_y: np.ndarray
    event_stratum: np.ndarray
    event_z: np.ndarray
    event_x: np.ndarray
    piece_subject: np.ndarray
    piece_start: np.ndarray
    piece_end: np.ndarray
    piece_x: np.ndarray
    time_slope: np.ndarray


def build_layout(cp: pd.DataFrame, intensity: IntensityFit, transform: OutcomeDesignTransform) -> ArmLayout:
    subjects = list(pd.unique(cp["id"]))
    code = {s: i for i, s in enumerate(subjects)}
    sub = cp["id"].map(code).to_numpy(int)
    ev = cp["event"].to_numpy(bool)
    events = cp[ev]
    z, _, _ = intensity_matrix(intensity.formula, events, intensity.levels)
    stratum = events["visit_number"].to_numpy(int) if intensity.formula.strata else np.ones(len(events), int)

    # one piece per counting-process row, starting at its predecessor; the
    # last piece of each subject runs on without end
    last = np.r_[sub[1:] != sub[:-1], True] if len(cp) else np.zeros(0, bool)
    starts = cp["prev_time"].to_numpy(float)
    ends = np.where(ev, cp["time"].to_numpy(float), np.inf)
    ends[last] = np.inf
    pseudo = cp.copy()
    pseudo["time"] = pseudo["prev_time"]
    pseudo["delta_time"] = 0.0
    extra = cp[last & ev].copy()
    if len(extra):
        extra["prev_outcome"] = extra["outcome"]
        extra["prev_time"] = extra["time"]
        extra["delta_time"] = 0.0
        ends[last & ev] = cp["time"].to_numpy(float)[last & ev]
    piece_rows = pd.concat([pseudo, extra], ignore_index=True)
    piece_sub = np.r_[sub, sub[last & ev]]
    piece_start = np.r_[starts, cp["time"].to_numpy(float)[last & ev]]
    piece_end = np.r_[ends, np.full(int((last & ev).sum()), np.inf)]
    order = np.lexsort((piece_start, piece_sub))
    return ArmLayout(
        subjects, sub[ev], events["time"].to_numpy(float), events["outcome"].to_numpy(float), stratum, z,
        transform.transform(events), piece_sub[order], piece_start[order], piece_end[order],
        transform.transform(piece_rows)[order], transform.time_slope(),
    )


# ---------------------------------------------------------------------------
# influence terms


def _event_intensity(fit: IntensityFit, layout: ArmLayout) -> np.ndarray:
    lam = np.zeros(layout.event_time.size)
    for k in np.unique(layout.event_stratum):
        rows = layout.event_stratum == k
        if int(k) in fit.increments:
            lam[rows] = fit.evaluate(layout.event_time[rows], layout.event_z[rows], int(k))
    return lam


def influence_term1(layout: ArmLayout, intensity: IntensityFit, outcome: SingleIndexFit,
                    spec: splines.SplineBasis, alphas, rho_floor: float = 1e-10,
                    weight_cap_quantile: float | None = None) -> np.ndarray:
    """Inverse-weighted residual term, shape (n_subjects, n_alpha, d)."""
    alphas = np.atleast_1d(np.asarray(alphas, float))
    n = len(layout.subjects)
    out = np.zeros((n, alphas.size, spec.dim))
    lo, hi = spec.interval
    inside = (layout.event_time >= lo) & (layout.event_time <= hi)
    if not inside.any():
        return out
    t = layout.event_time[inside]
    y = layout.event_y[inside]
    who = layout.event_subject[inside]
    probs = outcome.probabilities(layout.event_x[inside] @ outcome.theta)
    log_e, mean, _ = tilt(probs, outcome.support, alphas)
    lam = _event_intensity(intensity, layout)[inside]
    with np.errstate(divide="ignore"):
        log_rho = np.log(lam)[:, None] + log_e - np.outer(y, alphas)
    r = np.exp(log_rho)
    low = r < rho_floor
    if low.any():
        i, a = np.argwhere(low)[0]
        raise EstimationError(
            f"intensity-weight denominator {r[i, a]:.3g} below floor {rho_floor:g} for subject "
            f"{layout.subjects[who[i]]!r} at time {t[i]!r} (alpha={alphas[a]!r}); consider weight truncation")
    inv = 1.0 / r
    if weight_cap_quantile is not None:
        cap = np.quantile(inv, weight_cap_quantile, axis=0)
        inv = np.minimum(inv, cap)
    contrib = ((y[:, None] - mean) * inv)[:, :, None] * spec(t)[:, None, :]
    np.add.at(out, who, contrib)
    return out


def _pieces_in(layout: ArmLayout, spec: splines.SplineBasis):
    lo, hi = spec.interval
    a = np.maximum(layout.piece_start, lo)
    b = np.minimum(layout.piece_end, hi)
    keep = a < b
    a, b, idx = a[keep], b[keep], np.flatnonzero(keep)
    # the spline is only piecewise smooth: split at interior knots too
    for knot in spec.knots[1:-1]:
        cut = (a < knot) & (knot < b)
        if cut.any():
            tail_b, tail_idx = b[cut], idx[cut]
            b = np.where(cut, knot, b)
            a = np.r_[a, np.full(tail_b.size, knot)]
            b = np.r_[b, tail_b]
            idx = np.r_[idx, tail_idx]
    order = np.lexsort((a, layout.piece_subject[idx]))
    return a[order], b[order], idx[order]


def _tilted_mean_fn(outcome: SingleIndexFit, alphas: np.ndarray, s_lo, s_hi, grid: int | None):
    """``s -> E_alpha[Y | index s]``, exact or via a cubic spline in ``s``.

    The tilted mean depends on the past only through the scalar index, so a
    fine grid over the index range reached by the pieces replaces one kernel
    sum per quadrature node with one per grid point.
    """
    def exact(s):
        return tilt(outcome.probabilities(s), outcome.support, alphas)[1]

    if grid is None:
        return exact
    lo = float(min(np.min(s_lo), np.min(s_hi)))
    hi = float(max(np.max(s_lo), np.max(s_hi)))
    if hi - lo <= 0:
        return exact
    nodes = np.linspace(lo, hi, grid)
    spline = interpolate.CubicSpline(nodes, exact(nodes), axis=0)
    return lambda s: spline(np.clip(s, lo, hi))


def influence_term2(layout: ArmLayout, outcome: SingleIndexFit, spec: splines.SplineBasis, alphas,
                    quad: QuadratureOptions | None = None) -> np.ndarray:
    """Augmentation term ``int B(t) E_alpha[Y | past(t)] dt``, (n, n_alpha, d).

    Within a piece the past is frozen and only time terms move, so the index
    is linear in ``t`` and the integrand is smooth.
    """
    quad = quad or QuadratureOptions()
    alphas = np.atleast_1d(np.asarray(alphas, float))
    n, d, n_a = len(layout.subjects), spec.dim, alphas.size
    out = np.zeros((n, n_a, d))
    a, b, idx = _pieces_in(layout, spec)
    if not a.size:
        return out
    s0 = layout.piece_x[idx] @ outcome.theta + (a - layout.piece_start[idx]) * (layout.time_slope @ outcome.theta)
    slope = float(layout.time_slope @ outcome.theta)

    tilted_mean = _tilted_mean_fn(outcome, alphas, s0, s0 + (b - a) * slope, quad.index_grid)

    def integrand(t, piece):
        mean = tilted_mean(s0[piece] + (t - a[piece]) * slope)
        basis = spec(t)
        return (mean[:, :, None] * basis[:, None, :]).reshape(t.size, n_a * d)

    lo, hi = spec.interval
    if quad.method == "adaptive":
        vals = quadrature.adaptive_simpson_batch(integrand, a, b, quad.tol * (b - a) / (hi - lo))
    else:
        delta = quad.delta if quad.delta is not None else (hi - lo) / (quad.resolution - 1)
        vals = quadrature.fixed_trapezoid_batch(integrand, a, b, delta)
    np.add.at(out, layout.piece_subject[idx], vals.reshape(-1, n_a, d))
    return out


def estimate_beta(term1: np.ndarray, term2: np.ndarray, gram: np.ndarray) -> np.ndarray:
    """``(1/n) V^{-1} sum_i (term1_i + term2_i)`` for stacked (n, ..., d) terms."""
    phi = np.asarray(term1) + np.asarray(term2)
    n = phi.shape[0]
    if n < 1:
        raise EstimationError("no subjects")
    try:
        factor = linalg.cho_factor(gram)
    except linalg.LinAlgError as exc:
        raise EstimationError("Gram matrix is numerically singular") from exc
    total = phi.sum(axis=0) / n
    flat = total.reshape(-1, gram.shape[0]).T
    return linalg.cho_solve(factor, flat).T.reshape(total.shape)


def if_covariance(term1: np.ndarray, term2: np.ndarray, gram: np.ndarray) -> np.ndarray:
    """Sandwich ``V^{-1} S V^{-1} / n^2`` with ``S`` the centred outer-product
    sum of ``phi_i``; returns (n_alpha, d, d)."""
    phi = term1 + term2
    n = phi.shape[0]
    centred = phi - phi.mean(axis=0)
    s = np.einsum("iad,iae->ade", centred, centred)
    vinv = linalg.cho_solve(linalg.cho_factor(gram), np.eye(gram.shape[0]))
    return np.einsum("de,aef,fg->adg", vinv, s, vinv) / n ** 2


# ---------------------------------------------------------------------------
# per-arm model


def _fit_outcome(cp: pd.DataFrame, options: ModelOptions, fit_options: FitOptions) -> SingleIndexFit:
    events = cp[cp["event"].to_numpy(bool)]
    transform = OutcomeDesignTransform.fit(OutcomeFormula.parse(options.outcome_formula), events)
    design = OutcomeDesign.from_counting_process(events, transform)
    return FITTERS[options.fitter](design, fit_options, transform)


@dataclass
class ArmModel:
    label: str
    cp: pd.DataFrame
    options: ModelOptions
    intensity: IntensityFit
    outcome: SingleIndexFit
    alphas: np.ndarray
    term1: list[np.ndarray]
    term2: list[np.ndarray]
    betas: list[np.ndarray]

    @property
    def specs(self) -> list[splines.SplineBasis]:
        return self.options.specs()

    @property
    def grams(self) -> list[np.ndarray]:
        return [splines.gram_matrix(s) for s in self.specs]

    @property
    def subjects(self) -> list:
        return list(pd.unique(self.cp["id"]))

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    def alpha_index(self, alphas) -> list[int]:
        out = []
        for a in np.atleast_1d(alphas):
            hit = np.flatnonzero(self.alphas == float(a))
            if not hit.size:
                raise KeyError(f"alpha {a!r} not in the fitted grid {self.alphas.tolist()}")
            out.append(int(hit[0]))
        return out

    def influence_frame(self, alpha: float, interval: int = 0) -> pd.DataFrame:
        """One row per subject: id, term1, term2 (vectors)."""
        a = self.alpha_index([alpha])[0]
        return pd.DataFrame({"id": self.subjects, "term1": list(self.term1[interval][:, a]),
                             "term2": list(self.term2[interval][:, a])})

    def predict(self, times, alphas=None) -> pd.DataFrame:
        return predict_mean(self, times, alphas)


def compute_terms(cp, intensity, outcome, options: ModelOptions, alphas):
    layout = build_layout(cp, intensity, outcome.transform)
    t1, t2, betas = [], [], []
    for spec in options.specs():
        a = influence_term1(layout, intensity, outcome, spec, alphas, options.rho_floor,
                            options.weight_cap_quantile)
        b = influence_term2(layout, outcome, spec, alphas, options.quadrature)
        t1.append(a)
        t2.append(b)
        betas.append(estimate_beta(a, b, splines.gram_matrix(spec)))
    return t1, t2, betas


def fit_arm(cp: pd.DataFrame, options: ModelOptions, alphas, label: str = "arm",
            outcome_options: FitOptions | None = None) -> ArmModel:
    """Fit the intensity and outcome models and the AIIW coefficients."""
    alphas = np.asarray(alphas, float)
    if not alphas.size:
        raise ValueError("alpha list is empty")
    cp = canonical_order(cp)
    try:
        intensity = fit_andersen_gill(cp, IntensityFormula.parse(options.intensity_formula),
                                      options.intensity_kernel, options.bandwidth)
    except Exception as exc:
        raise EstimationError(f"arm {label!r}, intensity model: {exc}") from exc
    try:
        outcome = _fit_outcome(cp, options, outcome_options or options.outcome)
    except Exception as exc:
        raise EstimationError(f"arm {label!r}, outcome model: {exc}") from exc
    try:
        t1, t2, betas = compute_terms(cp, intensity, outcome, options, alphas)
    except Exception as exc:
        raise EstimationError(f"arm {label!r}, influence terms: {exc}") from exc
    return ArmModel(label, cp, options, intensity, outcome, alphas, t1, t2, betas)


def _time_rows(specs, times):
    times = np.atleast_1d(np.asarray(times, float))
    if not times.size:
        raise ValueError("no prediction times given")
    return times, [splines.locate(specs, float(t)) for t in times]


def predict_mean(model: ArmModel, times, alphas=None) -> pd.DataFrame:
    """Point estimates and IF variances on the (time x alpha) grid."""
    alphas = model.alphas if alphas is None else np.atleast_1d(np.asarray(alphas, float))
    aidx = model.alpha_index(alphas)
    specs, grams = model.specs, model.grams
    times, where = _time_rows(specs, times)
    covs = [if_covariance(model.term1[m], model.term2[m], grams[m]) for m in range(len(specs))]
    rows = []
    for t, m in zip(times, where):
        basis = specs[m](t)
        for a, k in zip(alphas, aidx):
            rows.append((t, a, float(basis @ model.betas[m][k]), float(basis @ covs[m][k] @ basis)))
    return pd.DataFrame(rows, columns=["time", "alpha", "mean", "var"])


def mean_curves(model: ArmModel, spacing: float = 1.0) -> pd.DataFrame:
    """Mean curves on a grid of at most ``spacing`` over every interval."""
    parts = []
    for m, spec in enumerate(model.specs):
        lo, hi = spec.interval
        grid = np.linspace(lo, hi, int(math.ceil((hi - lo) / spacing)) + 1)
        basis = spec(grid)
        for k, a in enumerate(model.alphas):
            parts.append(pd.DataFrame({"time": grid, "alpha": a, "mean": basis @ model.betas[m][k]}))
    return pd.concat(parts, ignore_index=True)


def restrict_alpha_range(curves: pd.DataFrame, mu_min: float, mu_max: float) -> list[float]:
    """Alphas whose whole curve lies in the closed band ``[mu_min, mu_max]``."""
    if not mu_min < mu_max:
        raise ValueError(f"mu_min ({mu_min}) must be below mu_max ({mu_max})")
    keep = []
    for a, grp in curves.groupby("alpha", sort=False):
        m = grp["mean"].to_numpy()
        if np.all((m >= mu_min) & (m <= mu_max)):
            keep.append(float(a))
    return keep


# ---------------------------------------------------------------------------
# jackknife


@dataclass
class JackknifeResult:
    """Leave-one-subject-out coefficient replicates, (n_ok, n_alpha, d) per interval."""

    betas: list[np.ndarray]
    dropped: list
    failures: dict

    @property
    def n(self) -> int:
        return self.betas[0].shape[0]

    def covariance(self) -> list[np.ndarray]:
        out = []
        for reps in self.betas:
            n = reps.shape[0]
            c = reps - reps.mean(axis=0)
            out.append(np.einsum("iad,iae->ade", c, c) * (n - 1) / n)
        return out


def jackknife_variance(replicates) -> float | np.ndarray:
    """``((n-1)/n) sum (theta_(-i) - mean)^2`` along the first axis."""
    r = np.asarray(replicates, float)
    n = r.shape[0]
    return (n - 1) / n * np.sum((r - r.mean(axis=0)) ** 2, axis=0)


def outcome_hessian(model: ArmModel) -> np.ndarray | None:
    """PSIS Hessian at the full-data optimum in the fitter's parameters."""
    if model.options.fitter not in ("fixed-coef", "fixed-bandwidth"):
        return None
    cached = getattr(model, "_hessian", None)
    if cached is None:
        design = OutcomeDesign.from_counting_process(model.cp, model.outcome.transform)
        fun = si_objective(design, model.options.fitter, model.outcome.kernel)
        cached = numerical_hessian(fun, si_parameters(model.outcome))
        model._hessian = cached
    return cached


def _replicate(model: ArmModel, subject) -> list[np.ndarray]:
    cp = model.cp[model.cp["id"] != subject]
    opts = model.options
    fit_opts = opts.outcome
    if opts.jackknife.warm_start:
        fit_opts = replace(fit_opts, theta0=model.outcome.theta, h0=model.outcome.h,
                           simplex_scale=opts.jackknife.simplex_scale, x_tol=opts.jackknife.x_tol,
                           newton_hessian=outcome_hessian(model) if opts.jackknife.newton else None)
    bandwidth = opts.bandwidth
    intensity = fit_andersen_gill(cp, IntensityFormula.parse(opts.intensity_formula), opts.intensity_kernel,
                                  bandwidth)
    outcome = _fit_outcome(cp, opts, fit_opts)
    return compute_terms(cp, intensity, outcome, opts, model.alphas)[2]


def jackknife(model: ArmModel, threads: int = 1, replicate=None) -> JackknifeResult:
    """Refit every stage without each subject in turn.

    Replicates run on a thread pool but are collected in subject order, so
    the result does not depend on ``threads``.  Failed replicates are dropped
    (with a warning) unless they exceed the configured fraction.
    """
    subjects = model.subjects
    n = len(subjects)
    if n < 3:
        raise EstimationError("the jackknife needs at least three subjects per arm")
    replicate = replicate or _replicate
    if replicate is _replicate and model.options.jackknife.warm_start and model.options.jackknife.newton:
        outcome_hessian(model)  # computed once, before any worker starts

    def run(s):
        try:
            return replicate(model, s), None
        except Exception as exc:  # noqa: BLE001 - recorded and reported below
            return None, f"{type(exc).__name__}: {exc}"

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, subjects))
    else:
        results = [run(s) for s in subjects]
    failures = {s: err for s, (_, err) in zip(subjects, results) if err is not None}
    limit = model.options.jackknife.max_failure_fraction
    if len(failures) > limit * n:
        raise EstimationError(f"{len(failures)} of {n} jackknife replicates failed in arm {model.label!r}: "
                              f"{failures}")
    if failures:
        warnings.warn(f"dropping {len(failures)} failed jackknife replicate(s) in arm {model.label!r}",
                      RuntimeWarning, stacklevel=2)
    ok = [r for r, err in results if err is None]
    betas = [np.stack([r[m] for r in ok]) for m in range(len(model.betas))]
    return JackknifeResult(betas, list(failures), failures)


def jackknife_table(model: ArmModel, result: JackknifeResult, times, alphas=None) -> pd.DataFrame:
    table = predict_mean(model, times, alphas)
    specs = model.specs
    covs = result.covariance()
    jk = []
    for t, a in zip(table["time"], table["alpha"]):
        m = splines.locate(specs, float(t))
        k = model.alpha_index([a])[0]
        basis = specs[m](t)
        jk.append(float(basis @ covs[m][k] @ basis))
    table["mean_jackknife_var"] = jk
    return table


# ---------------------------------------------------------------------------
# two arms


@dataclass
class FullModel:
    control: ArmModel
    treatment: ArmModel
    treatment_label: str
    control_label: str
    end_time: float | None = None
    max_visits: int | None = None

    def arms(self):
        return {"control": self.control, "treatment": self.treatment}


def prepare_frame(frame: trial_data.TrialFrame, end_time: float | None, terminal: str = "add",
                  max_visits: int | None = None) -> trial_data.TrialFrame:
    if terminal == "add":
        if end_time is None:
            raise ValueError("adding terminal observations needs an end time")
        return trial_data.add_terminal_observations(frame, end_time, max_visits)
    if terminal != "explicit":
        raise ValueError("terminal mode must be 'add' or 'explicit'")
    return frame


def fit_full(frame: trial_data.TrialFrame, treatment_label, options: ModelOptions, alphas,
             end_time: float | None = None, terminal: str = "add", max_visits: int | None = None) -> FullModel:
    """Split by arm, add terminal rows and fit each arm separately."""
    max_visits = max_visits or trial_data.infer_max_visits(frame)
    frame = prepare_frame(frame, end_time, terminal, max_visits)
    treatment, control = trial_data.split_by_arm(frame, treatment_label)
    labels = frame.arms()
    control_label = [lv for lv in labels if lv != str(treatment_label)][0]
    models = {}
    for name, part, label in (("control", control, control_label), ("treatment", treatment, str(treatment_label))):
        models[name] = fit_arm(trial_data.derive_counting_process(part), options, alphas, label)
    return FullModel(models["control"], models["treatment"], str(treatment_label), control_label, end_time,
                     max_visits)


def alpha_pairs(model: FullModel):
    return [(a0, a1) for a0 in model.control.alphas for a1 in model.treatment.alphas]


def treatment_effect(model: FullModel, times, pairs=None, jackknife_results=None) -> pd.DataFrame:
    """Treatment minus control means with variances summed across arms."""
    pairs = pairs if pairs is not None else alpha_pairs(model)
    a0s = sorted({float(p[0]) for p in pairs})
    a1s = sorted({float(p[1]) for p in pairs})
    c = predict_mean(model.control, times, a0s)
    t = predict_mean(model.treatment, times, a1s)
    if jackknife_results is not None:
        c["mean_jackknife_var"] = jackknife_table(model.control, jackknife_results["control"], times, a0s)[
            "mean_jackknife_var"]
        t["mean_jackknife_var"] = jackknife_table(model.treatment, jackknife_results["treatment"], times, a1s)[
            "mean_jackknife_var"]
    cl = {(r.time, r.alpha): r for r in c.itertuples(index=False)}
    tl = {(r.time, r.alpha): r for r in t.itertuples(index=False)}
    rows = []
    for time in np.atleast_1d(np.asarray(times, float)):
        for a0, a1 in pairs:
            rc, rt = cl[(time, float(a0))], tl[(time, float(a1))]
            row = [time, float(a0), float(a1), rt.mean - rc.mean, rt.var + rc.var]
            if jackknife_results is not None:
                row.append(rt.mean_jackknife_var + rc.mean_jackknife_var)
            rows.append(row)
    cols = ["time", "alpha_control", "alpha_treatment", "mean_effect", "var_effect"]
    if jackknife_results is not None:
        cols.append("mean_effect_jackknife_var")
    return pd.DataFrame(rows, columns=cols)


def wald_interval(estimate, variance):
    se = np.sqrt(np.maximum(variance, 0.0))
    return estimate - Z95 * se, estimate + Z95 * se
