import math

import numpy as np
import pandas as pd
import pytest
from scipy import integrate, stats

from aiiw import data, simulate, splines
from aiiw.simulate import ArmSpec, NegBinOutcome, SimConfig


# ---------------------------------------------------------------------------
# thinning


def test_homogeneous_poisson_counts():
    c, horizon, reps = 2.0, 5.0, 10_000
    rng = np.random.default_rng(1)
    counts = [len(simulate.ogata_thinning(lambda t: c, lambda t: (c, math.inf), 0.0, horizon, rng))
              for _ in range(reps)]
    se = math.sqrt(c * horizon / reps)
    assert abs(np.mean(counts) - c * horizon) < 3 * se


def test_null_intensity():
    rng = np.random.default_rng(0)
    assert simulate.ogata_thinning(lambda t: 0.0, lambda t: (1.0, math.inf), 0.0, 100.0, rng) == []
    assert simulate.ogata_thinning(lambda t: 0.0, lambda t: (0.0, math.inf), 0.0, 100.0, rng) == []


class StubRng:
    def __init__(self, gaps):
        self.gaps = list(gaps)

    def exponential(self, scale):
        return self.gaps.pop(0)

    def random(self):
        return 0.999999


def test_acceptance_one_reproduces_proposals():
    gaps = [0.3, 1.1, 0.25, 2.0, 5.0]
    got = simulate.ogata_thinning(lambda t: 1.5, lambda t: (1.5, math.inf), 0.0, 4.0, StubRng(gaps))
    assert got == list(np.cumsum(gaps)[:4])


def test_sin_squared_time_rescaling():
    a, b = 1.0, 2.0
    rng = np.random.default_rng(7)
    horizon = 5200.0
    events = np.array(simulate.ogata_thinning(lambda t: a + b * math.sin(t) ** 2, lambda t: (a + b, math.inf),
                                              0.0, horizon, rng))
    assert events.size >= 10_000
    cum = a * events + b * (events / 2 - np.sin(2 * events) / 4)
    gaps = np.diff(np.r_[0.0, cum])
    assert stats.kstest(gaps, "expon").pvalue > 0.01


def test_bound_violation():
    with pytest.raises(simulate.BoundViolation):
        simulate.ogata_thinning(lambda t: 2.0, lambda t: (1.0, math.inf), 0.0, 100.0, np.random.default_rng(0))


def test_piecewise_bound_and_max_events():
    rng = np.random.default_rng(3)
    bound = lambda t: (1.0, 10.0) if t < 10 else (0.0, math.inf)  # noqa: E731
    ev = simulate.ogata_thinning(lambda t: 1.0 if t < 10 else 0.0, bound, 0.0, 50.0, rng)
    assert ev and max(ev) < 10
    assert len(simulate.ogata_thinning(lambda t: 1.0, lambda t: (1.0, math.inf), 0.0, 1e6, rng, max_events=3)) == 3


# ---------------------------------------------------------------------------
# arms and trials


def test_empty_arm():
    frame = simulate.simulate_arm(SimConfig(n=0), "control")
    assert frame.records.empty


def test_deterministic():
    a = simulate.simulate_trial(SimConfig(n=15), rep=4)
    b = simulate.simulate_trial(SimConfig(n=15), rep=4)
    pd.testing.assert_frame_equal(a.records, b.records, check_exact=True)
    c = simulate.simulate_trial(SimConfig(n=15), rep=5)
    assert not a.records.equals(c.records)


def test_stream_independence():
    small = simulate.simulate_arm(SimConfig(n=5), "treatment").records
    large = simulate.simulate_arm(SimConfig(n=9), "treatment").records
    ids = small["id"].unique()
    pd.testing.assert_frame_equal(small, large[large["id"].isin(ids)].reset_index(drop=True), check_exact=True)


def test_frames_validate_and_respect_limits(small_trial):
    data.validate(small_trial)
    rec = small_trial.records
    for _, g in rec.groupby("id"):
        t = g["time"].to_numpy()
        assert t[0] == 0.0 and np.all(np.diff(t) > 0) and t[-1] <= 1406.0
        assert g["outcome"].notna().sum() <= 7
        assert g["outcome"].iloc[-1] != g["outcome"].iloc[-1] or len(g) == 7
    y = rec["outcome"].dropna().to_numpy()
    np.testing.assert_allclose(y * 6, np.round(y * 6), atol=1e-12)
    assert y.min() >= 0 and y.max() <= 6


def test_visit_counts_decrease():
    rec = simulate.simulate_trial(SimConfig(n=200)).records
    obs = rec[rec["outcome"].notna() & (rec["time"] > 0)]
    for _, g in obs.groupby("arm"):
        counts = g.groupby("id").cumcount().value_counts().sort_index().to_numpy()
        assert np.all(np.diff(counts) <= 0)
        means = g.assign(k=g.groupby("id").cumcount()).groupby("k")["time"].mean().to_numpy()
        assert np.all(np.diff(means) > 0)


@pytest.mark.parametrize("kw", [dict(n=-1), dict(end_time=0.0),
                                dict(arms={"control": ArmSpec("A", outcome=NegBinOutcome(kappa=0.0))})])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SimConfig(**kw)


def test_config_round_trip():
    cfg = SimConfig(n=7, seed=3)
    again = SimConfig.from_dict(cfg.to_dict())
    assert again == cfg and again.digest() == cfg.digest()


def test_negative_binomial_pmf_matches_scipy():
    o = NegBinOutcome()
    eta = 1.1
    mu = math.exp(eta)
    ref = stats.nbinom.pmf(np.arange(o.max_count + 1), o.kappa, o.kappa / (o.kappa + mu))
    np.testing.assert_allclose(np.exp(o.log_pmf(eta)), ref / ref.sum(), rtol=1e-12)


# ---------------------------------------------------------------------------
# truth


def test_unobserved_draws_follow_tilt():
    spec = simulate.default_arms()["control"]
    rng = np.random.default_rng(11)
    for alpha in (-0.6, 0.0, 0.6):
        draws = [simulate.draw_unobserved(spec, 2.0, 90.0, 180.0, alpha, rng) for _ in range(8000)]
        expect = float(spec.outcome.tilted_mean(spec.outcome.eta(2.0, 180.0, 90.0), alpha))
        assert abs(np.mean(draws) - expect) < 4 * np.std(draws) / math.sqrt(len(draws))


def test_constant_truth():
    cfg = SimConfig(arms={"control": ArmSpec("A", outcome=NegBinOutcome(max_count=0))})
    spec = splines.make_basis((76.0, 654.0, 1232.0))
    for tb in simulate.compute_true_beta(cfg, "control", [-0.5, 0.0, 0.5], [spec], mc_reps=50):
        np.testing.assert_allclose(tb.beta[0], 0.0, atol=1e-12)
    cfg = SimConfig(arms={"control": ArmSpec("A", outcome=NegBinOutcome(b0=-60.0))})
    for tb in simulate.compute_true_beta(cfg, "control", [0.0, 0.5], [spec], mc_reps=50):
        np.testing.assert_allclose(tb.beta[0], 0.0, atol=1e-12)


def reference_projection(cfg, arm, alpha, spec, mc):
    """Per-subject ``V^{-1} int B(t) m(t) dt`` with the tilted mean from
    scipy's negative binomial and adaptive quadrature between jumps."""
    o = cfg.arms[arm].outcome
    times, ys = simulate._histories(cfg, arm, mc)
    k = np.arange(o.max_count + 1)
    vinv = np.linalg.inv(splines.gram_matrix(spec))
    out = []
    for tt, yy in zip(times, ys):
        obs = tt[np.isfinite(tt)]

        def m(t):
            j = np.searchsorted(obs, t, side="left") - 1
            mu = math.exp(o.b0 + o.b_prev * yy[j] + (o.b_time * t + o.b_delta * (t - obs[j])) / 365)
            p = stats.nbinom.pmf(k, o.kappa, o.kappa / (o.kappa + mu)) * np.exp(alpha * k / o.scale)
            return float(p @ (k / o.scale) / p.sum())

        cuts = np.unique(np.r_[spec.knots, obs[(obs > spec.knots[0]) & (obs < spec.knots[-1])]])
        total = sum(integrate.quad_vec(lambda t: spec(t) * m(t), a, b, epsabs=1e-9)[0]
                    for a, b in zip(cuts[:-1], cuts[1:]))
        out.append(vinv @ total)
    return np.array(out)


def test_truth_projection_against_reference():
    cfg = SimConfig()
    spec = splines.make_basis((76.0, 654.0, 1232.0))
    mc = 80
    truths = simulate.compute_true_beta(cfg, "control", [0.0, 0.6], [spec], mc_reps=mc)
    for tb in truths:
        ref = reference_projection(cfg, "control", tb.alpha, spec, mc)
        se = ref.std(axis=0, ddof=1) / math.sqrt(mc)
        # only the quadrature of the jumps differs; it must be far below the MC error
        assert np.all(np.abs(tb.beta[0] - ref.mean(axis=0)) < 0.2 * se)
        np.testing.assert_allclose(tb.se[0], se, rtol=0.1)


def test_truth_increases_with_alpha():
    spec = splines.make_basis((76.0, 654.0, 1232.0))
    truths = simulate.compute_true_beta(SimConfig(), "control", [-0.6, -0.3, 0.0, 0.3, 0.6], [spec], mc_reps=2000)
    at6 = [tb.mean([spec], 180.0) for tb in truths]
    assert np.all(np.diff(at6) > 0)
    assert 1.0 < at6[0] and at6[-1] < 3.0
