"""Synthetic two-arm trials with a known sensitivity-parameter truth.

Each arm has a stratified assessment intensity ``lambda_0k(t) exp(gamma *
prev_outcome)`` with Gaussian-bump baselines, and outcomes at assessments are
truncated negative-binomial counts rescaled to a 0-6 score.  The unobserved
outcome at a time without assessment is the observed-outcome distribution
tilted by ``exp(alpha * y)`` (drawn by accept/reject when trajectories are
needed).  The observed-data law therefore does not depend on ``alpha``, and
the true mean is the population average of the tilted conditional mean,
which is summed exactly over the finite support.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy import special, stats

from . import splines
from .data import TrialFrame, add_terminal_observations

log = logging.getLogger(__name__)

PURPOSES = {"baseline": 0, "times": 1, "outcomes": 2, "unobserved": 3}


class BoundViolation(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class NegBinOutcome:
    """Count ~ NB(mean exp(eta), dispersion kappa) truncated to [0, max_count];
    outcome = count / scale.  ``eta = b0 + b_prev * prev + b_time * t / 365
    + b_delta * dt / 365``."""

    b0: float = 1.83
    b_prev: float = 0.25
    b_time: float = -0.05
    b_delta: float = 0.05
    kappa: float = 4.0
    max_count: int = 36
    scale: float = 6.0

    @property
    def support(self) -> np.ndarray:
        return np.arange(self.max_count + 1) / self.scale

    def eta(self, prev, t, dt):
        return self.b0 + self.b_prev * np.asarray(prev) + (self.b_time * np.asarray(t)
                                                           + self.b_delta * np.asarray(dt)) / 365.0

    def log_pmf(self, eta) -> np.ndarray:
        """Truncated log-pmf over the support, shape ``eta.shape + (K,)``."""
        eta = np.asarray(eta, float)
        k = np.arange(self.max_count + 1)
        mu = np.exp(eta)[..., None]
        kap = self.kappa
        lp = (special.gammaln(k + kap) - special.gammaln(kap) - special.gammaln(k + 1)
              + kap * np.log(kap / (kap + mu)) + k * np.log(mu / (kap + mu)))
        return lp - special.logsumexp(lp, axis=-1, keepdims=True)

    def tilted_mean(self, eta, alpha: float) -> np.ndarray:
        lp = self.log_pmf(eta) + alpha * self.support
        w = np.exp(lp - lp.max(axis=-1, keepdims=True))
        return (w @ self.support) / w.sum(axis=-1)


@dataclass
class ArmSpec:
    label: str
    baseline_mean: float = 1.9                   # mean baseline score
    centres: tuple = (116, 251, 346, 455, 883, 1082)
    spreads: tuple = (64, 133, 99, 116, 180, 186)
    continuation: tuple = (0.987, 0.955, 0.925, 0.875, 0.58, 0.855)
    gamma: float = -0.2
    outcome: NegBinOutcome = field(default_factory=NegBinOutcome)
    baseline_size: int = 200

    def masses(self) -> np.ndarray:
        """Bump masses giving roughly the stated per-visit continuation
        probabilities for a typical subject at risk from the previous centre."""
        mult = math.exp(self.gamma * self.baseline_mean)
        out = []
        prev_centre = 0.0
        for c, s, p in zip(self.centres, self.spreads, self.continuation):
            remaining = 1.0 - stats.norm.cdf((prev_centre - c) / s)
            out.append(-math.log(1.0 - p) / (mult * remaining))
            prev_centre = c
        return np.asarray(out)

    def baseline_sample(self) -> np.ndarray:
        """Deterministic empirical baseline distribution: mid-quantiles of the
        truncated NB with the requested mean."""
        o = self.outcome
        mu_count = self.baseline_mean * o.scale
        pmf = np.exp(o.log_pmf(math.log(mu_count)))
        cdf = np.cumsum(pmf)
        q = (np.arange(self.baseline_size) + 0.5) / self.baseline_size
        return np.minimum(np.searchsorted(cdf, q), o.max_count) / o.scale


def default_arms() -> dict[str, ArmSpec]:
    return {
        "control": ArmSpec("UC", baseline_mean=1.9),
        "treatment": ArmSpec("PA", baseline_mean=2.3, centres=(132, 252, 340, 457, 905, 1101),
                             outcome=NegBinOutcome(b0=1.80)),
    }


@dataclass
class SimConfig:
    n: int = 200
    end_time: float = 1406.0
    max_visits: int = 6
    seed: int = 20240601
    arms: dict = field(default_factory=default_arms)

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("n must be non-negative")
        if not self.end_time > 0:
            raise ValueError("end_time must be positive")
        for spec in self.arms.values():
            if not spec.outcome.kappa > 0:
                raise ValueError("negative-binomial dispersion must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        arms = {}
        for name, spec in (d.pop("arms", None) or {}).items():
            spec = dict(spec)
            outcome = NegBinOutcome(**spec.pop("outcome", {}))
            for key in ("centres", "spreads", "continuation"):
                if key in spec:
                    spec[key] = tuple(spec[key])
            arms[name] = ArmSpec(outcome=outcome, **spec)
        return cls(arms=arms or default_arms(), **d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def subject_rng(seed: int, arm: int, subject: int, purpose: str, rep: int = 0) -> np.random.Generator:
    """Independent stream for one (seed, replicate, arm, subject, purpose)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, rep, arm, subject,
                                                                        PURPOSES[purpose]])))


# ---------------------------------------------------------------------------
# thinning


def ogata_thinning(intensity, bound, start: float, horizon: float, rng, max_events: int | None = None,
                   on_event=None) -> list[float]:
    """Ogata's thinning on ``(start, horizon]``.

    ``bound(t)`` returns ``(rate, until)``: a rate dominating the intensity
    on ``[t, until)``.  Candidates come from rate-``rate`` exponentials and
    are kept with probability ``intensity(t) / rate``; ``on_event(t)`` is
    called after each acceptance so state-dependent intensities can update.
    """
    t = float(start)
    events: list[float] = []
    while t < horizon and (max_events is None or len(events) < max_events):
        rate, until = bound(t)
        until = min(until, horizon)
        if rate <= 0:
            if until >= horizon:
                break
            t = until
            continue
        cand = t + rng.exponential(1.0 / rate)
        if cand >= until:
            t = until
            continue
        lam = intensity(cand)
        if lam > rate * (1 + 1e-12):
            raise BoundViolation(f"intensity {lam} exceeds bound {rate} at t={cand}")
        t = cand
        if rng.random() * rate < lam:
            events.append(cand)
            if on_event is not None:
                on_event(cand)
    return events


def _bump(t, centre, spread, mass):
    return mass * np.exp(-0.5 * ((t - centre) / spread) ** 2) / (spread * math.sqrt(2 * math.pi))


def simulate_subject_history(spec: ArmSpec, masses, baseline: float, end_time: float, max_visits: int,
                             rng_times, rng_outcomes) -> tuple[list[float], list[float]]:
    """Assessment times and outcomes after baseline for one subject."""
    o = spec.outcome
    support = o.support
    times, ys = [], []
    prev_t, prev_y = 0.0, baseline
    for k in range(max_visits):
        c, s, m = spec.centres[k], spec.spreads[k], masses[k]
        mult = math.exp(spec.gamma * prev_y)
        peak = _bump(max(prev_t, c), c, s, m) * mult   # max of the bump on [prev_t, inf)

        got = ogata_thinning(lambda t: _bump(t, c, s, m) * mult, lambda t: (peak, math.inf), prev_t,
                             end_time, rng_times, max_events=1)
        if not got:
            break
        t = got[0]
        p = np.exp(o.log_pmf(o.eta(prev_y, t, t - prev_t)))
        y = float(support[min(int(np.searchsorted(np.cumsum(p), rng_outcomes.random() * p.sum(), side="right")),
                              o.max_count)])
        times.append(t)
        ys.append(y)
        prev_t, prev_y = t, y
    return times, ys


def simulate_arm(config: SimConfig, arm: str, rep: int = 0, n: int | None = None) -> TrialFrame:
    """One arm of one replicate, with terminal rows at ``end_time``."""
    spec = config.arms[arm]
    arm_code = sorted(config.arms).index(arm)
    n = config.n if n is None else n
    masses = spec.masses()
    sample = spec.baseline_sample()
    rows = []
    for i in range(n):
        base = float(sample[subject_rng(config.seed, arm_code, i, "baseline", rep).integers(sample.size)])
        times, ys = simulate_subject_history(spec, masses, base, config.end_time, config.max_visits,
                                             subject_rng(config.seed, arm_code, i, "times", rep),
                                             subject_rng(config.seed, arm_code, i, "outcomes", rep))
        sid = f"{spec.label}{i + 1:04d}"
        rows.append((sid, spec.label, 0.0, base))
        rows += [(sid, spec.label, t, y) for t, y in zip(times, ys)]
    rec = pd.DataFrame(rows, columns=["id", "arm", "time", "outcome"])
    frame = TrialFrame(rec, [], None, config.max_visits)
    if n == 0:
        return frame
    return add_terminal_observations(frame, config.end_time, config.max_visits)


def simulate_trial(config: SimConfig, rep: int = 0) -> TrialFrame:
    parts = [simulate_arm(config, arm, rep).records for arm in sorted(config.arms)]
    rec = pd.concat(parts, ignore_index=True)
    return TrialFrame(rec, [], config.end_time, config.max_visits)


def draw_unobserved(spec: ArmSpec, prev_y: float, prev_t: float, t: float, alpha: float, rng,
                    max_tries: int = 100000) -> float:
    """Outcome at a time without assessment: an observed-outcome draw kept
    with probability ``exp(alpha * (y - y_top))``."""
    o = spec.outcome
    p = np.exp(o.log_pmf(o.eta(prev_y, t, t - prev_t)))
    cdf = np.cumsum(p)
    top = o.support[-1] if alpha >= 0 else o.support[0]
    for _ in range(max_tries):
        y = o.support[min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), o.max_count)]
        if rng.random() < math.exp(alpha * (y - top)):
            return float(y)
    raise RuntimeError("accept/reject tilting did not accept a draw")


# ---------------------------------------------------------------------------
# truth


@dataclass
class TrueBeta:
    alpha: float
    beta: list[np.ndarray]
    se: list[np.ndarray]

    def mean(self, specs, t: float) -> float:
        m = splines.locate(specs, t)
        return float(specs[m](t) @ self.beta[m])


def _histories(config: SimConfig, arm: str, mc: int, seed_offset: int = 10_000_000):
    spec = config.arms[arm]
    arm_code = sorted(config.arms).index(arm)
    masses = spec.masses()
    sample = spec.baseline_sample()
    width = config.max_visits + 1
    times = np.full((mc, width), np.inf)
    ys = np.zeros((mc, width))
    times[:, 0] = 0.0
    for i in range(mc):
        sid = seed_offset + i
        base = float(sample[subject_rng(config.seed, arm_code, sid, "baseline").integers(sample.size)])
        t, y = simulate_subject_history(spec, masses, base, config.end_time, config.max_visits,
                                        subject_rng(config.seed, arm_code, sid, "times"),
                                        subject_rng(config.seed, arm_code, sid, "outcomes"))
        ys[i, 0] = base
        times[i, 1:len(t) + 1] = t
        ys[i, 1:len(y) + 1] = y
    return times, ys


def compute_true_beta(config: SimConfig, arm: str, alphas, specs, mc_reps: int = 100_000,
                      nodes_per_span: int = 16, chunk: int = 5000) -> list[TrueBeta]:
    """Monte-Carlo projection of the true mean onto each spline basis.

    Every MC subject contributes ``V^{-1} int B(t) m_i(t) dt`` where
    ``m_i(t)`` is the tilted conditional mean given its observed past at
    ``t``; the truth is their average and the reported standard error
    their standard deviation over ``sqrt(mc_reps)``.
    """
    alphas = np.atleast_1d(np.asarray(alphas, float))
    spec_arm = config.arms[arm]
    o = spec_arm.outcome
    times, ys = _histories(config, arm, mc_reps)
    x, w = np.polynomial.legendre.leggauss(nodes_per_span)
    out = {a: ([], []) for a in alphas}
    for spec in specs:
        nodes, weights = [], []
        for lo, hi in zip(spec.knots[:-1], spec.knots[1:]):
            half = 0.5 * (hi - lo)
            nodes.append(lo + half * (x + 1))
            weights.append(w * half)
        nodes, weights = np.concatenate(nodes), np.concatenate(weights)
        basis = spec(nodes)
        vinv = np.linalg.inv(splines.gram_matrix(spec))
        proj = vinv @ (basis * weights[:, None]).T          # (d, G)
        contrib = {a: np.empty((mc_reps, spec.dim)) for a in alphas}
        for a0 in range(0, mc_reps, chunk):
            tt, yy = times[a0:a0 + chunk], ys[a0:a0 + chunk]
            last = (tt[:, None, :] < nodes[None, :, None]).sum(axis=2) - 1   # (c, G)
            prev_t = np.take_along_axis(tt, last, axis=1)
            prev_y = np.take_along_axis(yy, last, axis=1)
            eta = o.eta(prev_y, nodes[None, :], nodes[None, :] - prev_t)
            lp = o.log_pmf(eta)
            for a in alphas:
                z = lp + a * o.support
                wts = np.exp(z - z.max(axis=-1, keepdims=True))
                m = (wts @ o.support) / wts.sum(axis=-1)
                contrib[a][a0:a0 + chunk] = m @ proj.T
        for a in alphas:
            c = contrib[a]
            out[a][0].append(c.mean(axis=0))
            out[a][1].append(c.std(axis=0, ddof=1) / math.sqrt(mc_reps))
    return [TrueBeta(float(a), out[a][0], out[a][1]) for a in alphas]
