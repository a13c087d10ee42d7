"""Single-index model for the outcome distribution at an assessment.

``P(Y <= z | past)`` is estimated by a Nadaraya-Watson average over training
outcomes with weights ``K((X_j - x)' theta / h)``.  ``(theta, h)`` minimise
PSIS, a leave-one-subject-out integrated squared error of the CDF evaluated
at every observed outcome.  The criterion only sees ``theta / h``, so one of
three constraints pins the scale: ``theta_1 = 1``, ``h = 1`` or
``||theta|| = 1``.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import optimize

from . import kernels
from .formula import OutcomeDesignTransform, OutcomeFormula

log = logging.getLogger(__name__)

MODES = ("fixed-coef", "fixed-bandwidth", "norm1")
BW_METHODS = ("bounded-quasi-newton", "golden-section", "grid")


class SingleIndexError(ValueError):
    pass


class CollinearityError(SingleIndexError):
    pass


@dataclass
class OutcomeDesign:
    """Event rows of one arm: predictors, outcomes and subject membership."""

    x: np.ndarray
    y: np.ndarray
    subject: np.ndarray
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.x = np.asarray(self.x, float)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        self.y = np.asarray(self.y, float)
        self.subject = np.asarray(self.subject)
        if not (len(self.x) == len(self.y) == len(self.subject)):
            raise SingleIndexError("x, y and subject lengths differ")
        if np.isnan(self.x).any() or np.isnan(self.y).any():
            raise SingleIndexError("outcome design contains missing values")
        self.support, self.level = np.unique(self.y, return_inverse=True)
        _, self.subject_code = np.unique(self.subject, return_inverse=True)

    @classmethod
    def from_counting_process(cls, cp: pd.DataFrame, transform: OutcomeDesignTransform) -> "OutcomeDesign":
        ev = cp[cp["event"].to_numpy(bool)]
        return cls(transform.transform(ev), ev["outcome"].to_numpy(float), ev["id"].to_numpy(), transform.column_names)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def n_subjects(self) -> int:
        return int(self.subject_code.max()) + 1 if self.n else 0


def _cumulative_indicator(level: np.ndarray, n_levels: int) -> np.ndarray:
    """``C[j, m] = I(Y_j <= y_m)`` for level codes."""
    return (level[:, None] <= np.arange(n_levels)[None, :]).astype(float)


class PSISEvaluator:
    """Vectorised PSIS for a fixed design.

    Rows are reordered by outcome level so each support point owns a
    contiguous block of columns; the leave-one-subject-out CDFs at every
    support point then come from a blocked row sum and a cumulative sum.
    Support points are weighted by multiplicity so the criterion sums over
    every observed outcome.
    """

    def __init__(self, design: OutcomeDesign, kernel: str = "gaussian"):
        if design.n_subjects < 2:
            raise SingleIndexError("PSIS needs at least two subjects for the leave-one-out fit")
        self.kernel = kernels.canonical_kernel(kernel)
        order = np.argsort(design.level, kind="stable")
        self.x = design.x[order]
        level = design.level[order]
        n_levels = design.support.size
        self.starts = np.searchsorted(level, np.arange(n_levels))
        self.cum = _cumulative_indicator(level, n_levels)
        self.mult = np.bincount(level, minlength=n_levels).astype(float)
        code = design.subject_code[order]
        self.other = (code[:, None] != code[None, :]).astype(float)
        self._buf = np.empty_like(self.other)
        self.evaluations = 0

    def __call__(self, theta, h: float) -> float:
        self.evaluations += 1
        if not h > 0:
            return math.inf
        s = self.x @ np.asarray(theta, float)
        w = self._buf
        np.subtract(s[:, None], s[None, :], out=w)
        if self.kernel == "gaussian":
            w *= w
            w *= -0.5 / (h * h)
            np.exp(w, out=w)
        else:
            w /= h
            w[...] = kernels.weights(self.kernel, w)
        w *= self.other
        total = w.sum(axis=1)
        f = np.cumsum(np.add.reduceat(w, self.starts, axis=1), axis=1)
        # empty neighbourhood: the estimate is taken as zero everywhere
        ok = total > 0
        f[ok] /= total[ok, None]
        f[ok, -1] = 1.0  # exact at the top of the support, where rounding would leave 1 - eps
        f[~ok] = 0.0
        f -= self.cum
        f *= f
        return float(f.sum(axis=0) @ self.mult)


def psis(theta, h: float, design: OutcomeDesign, kernel: str = "gaussian") -> float:
    """Pseudo sum of integrated squared error at ``(theta, h)``."""
    return PSISEvaluator(design, kernel)(theta, h)


# ---------------------------------------------------------------------------
# prediction


@dataclass
class ConditionalDistribution:
    support: np.ndarray
    weights: np.ndarray

    def cdf(self, z) -> np.ndarray:
        idx = np.searchsorted(self.support, np.asarray(z, float), side="right")
        return np.concatenate([[0.0], np.cumsum(self.weights)])[idx]

    def mean(self) -> float:
        return float(self.weights @ self.support)


@dataclass
class SingleIndexFit:
    theta: np.ndarray
    h: float
    kernel: str
    mode: str
    index: np.ndarray        # training X' theta
    y: np.ndarray
    subject: np.ndarray
    hstar: float | None = None
    diagnostics: dict = field(default_factory=dict)
    transform: OutcomeDesignTransform | None = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, float)
        self.index = np.asarray(self.index, float)
        self.y = np.asarray(self.y, float)
        self.support, self.level = np.unique(self.y, return_inverse=True)
        self._onehot = np.zeros((self.y.size, self.support.size))
        self._onehot[np.arange(self.y.size), self.level] = 1.0

    def index_of(self, x) -> np.ndarray:
        return np.asarray(x, float) @ self.theta

    def probabilities(self, s, chunk: int = 4096) -> np.ndarray:
        """NW probabilities over the support at index values ``s`` (m, L)."""
        s = np.atleast_1d(np.asarray(s, float))
        out = np.empty((s.size, self.support.size))
        for a in range(0, s.size, chunk):
            out[a:a + chunk] = self._probabilities(s[a:a + chunk])
        return out

    def _probabilities(self, s):
        w = kernels.weights(self.kernel, (self.index[None, :] - s[:, None]) / self.h)
        total = w.sum(axis=1)
        empty = ~(total > 0)
        if empty.any():
            w[empty] = self._fallback_weights(s[empty])
            total[empty] = w[empty].sum(axis=1)
        return (w @ self._onehot) / total[:, None]

    def _fallback_weights(self, s):
        """Compact kernels only: widen h, then use the nearest index values."""
        warnings.warn(f"{s.size} prediction point(s) have an empty kernel neighbourhood; "
                      "widening the bandwidth", RuntimeWarning, stacklevel=4)
        w = np.zeros((s.size, self.index.size))
        todo = np.arange(s.size)
        h = self.h
        for _ in range(10):
            h *= 2.0
            trial = kernels.weights(self.kernel, (self.index[None, :] - s[todo, None]) / h)
            ok = trial.sum(axis=1) > 0
            w[todo[ok]] = trial[ok]
            todo = todo[~ok]
            if not todo.size:
                return w
        k = min(5, self.index.size)
        for r in todo:
            nearest = np.argsort(np.abs(self.index - s[r]), kind="stable")[:k]
            w[r, nearest] = 1.0
        return w

    def conditional(self, x) -> ConditionalDistribution:
        return ConditionalDistribution(self.support.copy(), self.probabilities(self.index_of(x))[0])

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.tolist(), "h": self.h, "kernel": self.kernel, "mode": self.mode,
            "index": self.index.tolist(), "y": self.y.tolist(), "subject": [str(s) for s in self.subject],
            "hstar": self.hstar, "diagnostics": self.diagnostics,
            "transform": self.transform.to_dict() if self.transform else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SingleIndexFit":
        tr = OutcomeDesignTransform.from_dict(d["transform"]) if d.get("transform") else None
        return cls(np.asarray(d["theta"], float), d["h"], d["kernel"], d["mode"], np.asarray(d["index"], float),
                   np.asarray(d["y"], float), np.asarray(d["subject"], object), d.get("hstar"),
                   d.get("diagnostics", {}), tr)


def nw_conditional_cdf(fit: SingleIndexFit, x) -> ConditionalDistribution:
    return fit.conditional(x)


# ---------------------------------------------------------------------------
# initial direction


def _collinear_columns(x: np.ndarray, names: list[str]) -> list[str]:
    xc = x - x.mean(axis=0)
    scale = np.linalg.norm(xc, axis=0)
    bad = []
    kept = []
    for j in range(x.shape[1]):
        if scale[j] == 0:
            bad.append(names[j] if j < len(names) else f"x{j}")
            continue
        cols = xc[:, kept + [j]] / scale[kept + [j]]
        sv = np.linalg.svd(cols, compute_uv=False)
        if sv[-1] <= 1e-8 * sv[0]:
            bad.append(names[j] if j < len(names) else f"x{j}")
        else:
            kept.append(j)
    return bad


def init_direction(design: OutcomeDesign, bandwidth: float | None = None) -> np.ndarray:
    """Outer-product-of-gradients direction estimate.

    Local-linear gradients of ``E[Y | X]`` at each design point (Gaussian
    product kernel on standardised predictors); the leading eigenvector of
    their average outer product estimates the index direction.
    """
    n, p = design.x.shape
    if n < p + 2:
        raise SingleIndexError(f"need at least {p + 2} rows to initialise a {p}-dimensional direction, have {n}")
    bad = _collinear_columns(design.x, design.names)
    if bad:
        raise CollinearityError(f"collinear or constant predictor columns: {bad}")
    sd = design.x.std(axis=0, ddof=1)
    z = (design.x - design.x.mean(axis=0)) / sd
    h = bandwidth or 1.5 * n ** (-1.0 / (p + 4))
    grads = np.empty((n, p))
    for a in range(0, n, 256):
        centre = z[a:a + 256]
        diff = z[None, :, :] - centre[:, None, :]                       # (m, n, p)
        w = np.exp(-0.5 * np.sum(diff * diff, axis=2) / h ** 2)         # (m, n)
        design_m = np.concatenate([np.ones(diff.shape[:2] + (1,)), diff], axis=2)
        xtw = design_m * w[:, :, None]
        gram = np.einsum("mnk,mnl->mkl", xtw, design_m)
        gram += 1e-8 * np.eye(p + 1) * np.trace(gram, axis1=1, axis2=2)[:, None, None]
        rhs = np.einsum("mnk,n->mk", xtw, design.y)
        grads[a:a + 256] = np.linalg.solve(gram, rhs[:, :, None])[:, 1:, 0]
    grads /= sd  # back to the original predictor scale
    vals, vecs = np.linalg.eigh(grads.T @ grads / n)
    theta = vecs[:, -1]
    return _sign_fix(theta / np.linalg.norm(theta))


def _sign_fix(theta: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(theta) > 0)
    if nz.size and theta[nz[0]] < 0:
        return -theta
    return theta


# ---------------------------------------------------------------------------
# fitters


@dataclass
class FitOptions:
    kernel: str = "gaussian"
    abs_tol: float = 1e-7
    x_tol: float = 1e-5
    max_iter: int | None = None
    bw_method: str = "bounded-quasi-newton"
    bw_range: tuple[float, float] = (0.01, 1.5)
    theta0: np.ndarray | None = None
    h0: float = 1.0
    norm1_tol: float = 1e-6
    norm1_max_iter: int = 25
    simplex_scale: float | None = None
    newton_hessian: np.ndarray | None = None
    newton_tol: float = 1e-6

    def __post_init__(self):
        self.kernel = kernels.canonical_kernel(self.kernel)
        if self.bw_method not in BW_METHODS:
            raise SingleIndexError(f"unknown bw_method {self.bw_method!r}; choose from {BW_METHODS}")
        lo, hi = self.bw_range
        if not 0 < lo < hi:
            raise SingleIndexError(f"invalid bandwidth range {self.bw_range}")


def _finish(design, theta, h, mode, options, diagnostics, hstar=None, transform=None) -> SingleIndexFit:
    theta = np.asarray(theta, float)
    return SingleIndexFit(theta, float(h), options.kernel, mode, design.x @ theta, design.y.copy(),
                          design.subject.copy(), hstar, diagnostics, transform)


def _nelder_mead(fun, x0, options: FitOptions, n_points: int):
    """Nelder-Mead on PSIS scaled by the number of pairs, so ``abs_tol``
    means the same thing for every sample size.

    With ``options.newton_hessian`` set (warm starts near the optimum) the
    minimum is first sought by Newton steps; Nelder-Mead only takes over if
    those stall.
    """
    scale = float(n_points) ** 2
    x0 = np.asarray(x0, float)
    scaled = lambda v: fun(v) / scale  # noqa: E731
    if options.newton_hessian is not None:
        x, value, nit, ok = _newton(scaled, x0, options.newton_hessian, options.newton_tol)
        if ok:
            return optimize.OptimizeResult(x=x, fun=value, nit=nit, success=True,
                                           message="Newton iterations converged"), value * scale
        x0 = x
    simplex = None
    if options.simplex_scale is not None:
        step = options.simplex_scale * np.maximum(np.abs(x0), 0.1)
        simplex = np.vstack([x0] + [x0 + step[j] * np.eye(x0.size)[j] for j in range(x0.size)])
    res = optimize.minimize(scaled, x0, method="Nelder-Mead",
                            options={"fatol": options.abs_tol, "xatol": options.x_tol,
                                     "maxiter": options.max_iter or 400 * x0.size,
                                     "maxfev": (options.max_iter or 400 * x0.size) * 2,
                                     "initial_simplex": simplex})
    return res, res.fun * scale


def _steps(x):
    return 1e-5 * np.maximum(np.abs(x), 1.0)


def _gradient(fun, x):
    h = _steps(x)
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h[j]
        g[j] = (fun(x + e) - fun(x - e)) / (2 * h[j])
    return g


def numerical_hessian(fun, x, rel_step: float = 1e-3) -> np.ndarray:
    """Central-difference Hessian, symmetrised and made positive definite
    by flipping and flooring its eigenvalues."""
    x = np.asarray(x, float)
    h = rel_step * np.maximum(np.abs(x), 0.1)
    f0 = fun(x)
    p = x.size
    hess = np.empty((p, p))
    for j in range(p):
        ej = np.zeros(p)
        ej[j] = h[j]
        hess[j, j] = (fun(x + ej) - 2 * f0 + fun(x - ej)) / h[j] ** 2
        for k in range(j):
            ek = np.zeros(p)
            ek[k] = h[k]
            hess[j, k] = hess[k, j] = (fun(x + ej + ek) - fun(x + ej - ek) - fun(x - ej + ek)
                                       + fun(x - ej - ek)) / (4 * h[j] * h[k])
    vals, vecs = np.linalg.eigh(0.5 * (hess + hess.T))
    vals = np.maximum(np.abs(vals), 1e-8 * max(np.abs(vals).max(), 1e-300))
    return (vecs * vals) @ vecs.T


def _newton(fun, x0, hess, tol, max_iter: int = 25):
    """Newton iterations with a fixed Hessian and step halving."""
    x = np.asarray(x0, float).copy()
    fx = fun(x)
    inv = np.linalg.inv(hess)
    for it in range(1, max_iter + 1):
        step = inv @ _gradient(fun, x)
        t = 1.0
        for _ in range(20):
            cand = x - t * step
            fc = fun(cand)
            if fc <= fx:
                break
            t /= 2
        else:
            return x, fx, it, False
        moved = float(np.max(np.abs(t * step) / np.maximum(np.abs(x), 1.0)))
        x, fx = cand, fc
        if moved < tol:
            return x, fx, it, True
    return x, fx, max_iter, False


def objective(design: OutcomeDesign, mode: str, kernel: str = "gaussian"):
    """PSIS per pair in the parameterisation each fitter optimises:
    ``(theta_2.., log h)`` for fixed-coef, ``theta`` for fixed-bandwidth."""
    evaluator = PSISEvaluator(design, kernel)
    scale = float(design.n) ** 2
    if mode == "fixed-coef":
        return lambda v: evaluator(np.r_[1.0, v[:-1]], math.exp(v[-1])) / scale
    if mode == "fixed-bandwidth":
        return lambda v: evaluator(v, 1.0) / scale
    raise SingleIndexError(f"no unconstrained parameterisation for mode {mode!r}")


def parameters(fit: SingleIndexFit) -> np.ndarray:
    if fit.mode == "fixed-coef":
        return np.r_[fit.theta[1:], math.log(fit.h)]
    if fit.mode == "fixed-bandwidth":
        return fit.theta.copy()
    raise SingleIndexError(f"no unconstrained parameterisation for mode {fit.mode!r}")


def fit_fixed_coef(design: OutcomeDesign, options: FitOptions | None = None,
                   transform: OutcomeDesignTransform | None = None) -> SingleIndexFit:
    """``theta_1 = 1``; Nelder-Mead over the remaining coefficients and log h."""
    options = options or FitOptions()
    theta0 = np.asarray(options.theta0, float) if options.theta0 is not None else init_direction(design)
    if theta0[0] == 0:
        raise SingleIndexError("initial first coefficient is zero; use the norm1 or fixed-bandwidth mode")
    theta0 = theta0 / theta0[0]
    evaluator = PSISEvaluator(design, options.kernel)

    def fun(v):
        return evaluator(np.r_[1.0, v[:-1]], math.exp(v[-1]))

    start = np.r_[theta0[1:], math.log(options.h0)]
    start_value = fun(start)
    res, value = _nelder_mead(fun, start, options, design.n)
    if not np.isfinite(value):
        raise SingleIndexError(f"fixed-coef optimisation failed: {res.message}")
    if value > start_value:
        res.x, value = start, start_value
    theta = np.r_[1.0, res.x[:-1]]
    diag = {"iterations": int(res.nit), "evaluations": int(evaluator.evaluations), "psis": value,
            "psis_start": start_value, "converged": bool(res.success), "message": str(res.message)}
    return _finish(design, theta, math.exp(res.x[-1]), "fixed-coef", options, diag, transform=transform)


def fit_fixed_bandwidth(design: OutcomeDesign, options: FitOptions | None = None,
                        transform: OutcomeDesignTransform | None = None) -> SingleIndexFit:
    """``h = 1``; Nelder-Mead over every coefficient."""
    options = options or FitOptions()
    theta0 = np.asarray(options.theta0, float) if options.theta0 is not None else init_direction(design)
    evaluator = PSISEvaluator(design, options.kernel)

    def fun(v):
        return evaluator(v, 1.0)

    start_value = fun(theta0)
    res, value = _nelder_mead(fun, theta0, options, design.n)
    if not np.isfinite(value):
        raise SingleIndexError(f"fixed-bandwidth optimisation failed: {res.message}")
    theta = res.x
    if value > start_value:
        theta, value = theta0, start_value
    diag = {"iterations": int(res.nit), "evaluations": int(evaluator.evaluations), "psis": value,
            "psis_start": start_value, "converged": bool(res.success), "message": str(res.message)}
    return _finish(design, theta, 1.0, "fixed-bandwidth", options, diag, transform=transform)


def _golden(fun, lo, hi, tol=1e-5, max_iter=100):
    ratio = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - ratio * (b - a), a + ratio * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(max_iter):
        if b - a <= tol * (abs(a) + abs(b)):
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - ratio * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + ratio * (b - a)
            fd = fun(d)
    return (c, fc) if fc <= fd else (d, fd)


def _h_step(fun, current, options: FitOptions):
    lo, hi = options.bw_range
    if options.bw_method == "grid":
        grid = np.geomspace(lo, hi, 60)
        vals = [fun(g) for g in grid]
        k = int(np.argmin(vals))
        return float(grid[k]), float(vals[k])
    if options.bw_method == "golden-section":
        return _golden(fun, lo, hi)
    res = optimize.minimize(lambda v: fun(float(v[0])), [min(max(current, lo), hi)], method="L-BFGS-B",
                            bounds=[(lo, hi)], options={"ftol": 1e-12, "gtol": 1e-10})
    return float(res.x[0]), float(res.fun)


def fit_norm1(design: OutcomeDesign, options: FitOptions | None = None,
              transform: OutcomeDesignTransform | None = None) -> SingleIndexFit:
    """``||theta|| = 1``; alternate a bounded search for ``h* = h / sd(X' theta)``
    with projected-gradient steps for ``theta`` on the unit sphere."""
    options = options or FitOptions()
    theta = np.asarray(options.theta0, float) if options.theta0 is not None else init_direction(design)
    theta = theta / np.linalg.norm(theta)
    evaluator = PSISEvaluator(design, options.kernel)
    lo, hi = options.bw_range

    def sd_index(t):
        return float(np.std(design.x @ t, ddof=1))

    def value_at(t, hs):
        sd = sd_index(t)
        return evaluator(t, hs * sd) if sd > 0 else math.inf

    hstar = min(max(options.h0 / max(sd_index(theta), 1e-300), lo), hi)
    current = value_at(theta, hstar)
    trace = [{"step": "start", "psis": current, "hstar": hstar}]
    step_size = 0.1
    converged = False
    for it in range(1, options.norm1_max_iter + 1):
        before = current
        cand_h, cand_v = _h_step(lambda hs: value_at(theta, hs), hstar, options)
        if cand_v <= current:
            hstar, current = cand_h, cand_v
        trace.append({"step": "h", "psis": current, "hstar": hstar})

        grad = _sphere_gradient(lambda t: value_at(t, hstar), theta)
        gnorm = np.linalg.norm(grad)
        if gnorm > 0:
            s = step_size / gnorm
            for _ in range(30):
                cand = theta - s * grad
                cand /= np.linalg.norm(cand)
                v = value_at(cand, hstar)
                if v < current:
                    theta, current = cand, v
                    step_size = min(2.0 * s * gnorm, 1.0)
                    break
                s /= 2.0
        trace.append({"step": "theta", "psis": current, "hstar": hstar})
        if current > before:
            raise SingleIndexError(f"PSIS increased during alternating optimisation: {trace}")
        if abs(before - current) <= options.norm1_tol * max(abs(before), 1e-300):
            converged = True
            break
    theta = _sign_fix(theta)
    log.debug("norm1 trace: %s", trace)
    diag = {"iterations": it, "evaluations": int(evaluator.evaluations), "psis": current,
            "psis_start": trace[0]["psis"], "converged": converged, "trace": trace}
    return _finish(design, theta, hstar * sd_index(theta), "norm1", options, diag, hstar=hstar,
                   transform=transform)


def _sphere_gradient(fun, theta, eps=1e-6):
    """Central-difference gradient projected onto the tangent space."""
    g = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = eps
        g[j] = (fun(theta + e) - fun(theta - e)) / (2 * eps)
    return g - (g @ theta) * theta


FITTERS = {"fixed-coef": fit_fixed_coef, "fixed-bandwidth": fit_fixed_bandwidth, "norm1": fit_norm1}


def fit_single_index(cp: pd.DataFrame, formula: OutcomeFormula | str | None = None, mode: str = "fixed-coef",
                     options: FitOptions | None = None) -> SingleIndexFit:
    """Build the outcome design from counting-process rows and fit it."""
    if mode not in FITTERS:
        raise SingleIndexError(f"unknown fitter mode {mode!r}; choose from {MODES}")
    if isinstance(formula, str) or formula is None:
        formula = OutcomeFormula.parse(formula)
    events = cp[cp["event"].to_numpy(bool)]
    transform = OutcomeDesignTransform.fit(formula, events)
    design = OutcomeDesign.from_counting_process(events, transform)
    return FITTERS[mode](design, options, transform)
