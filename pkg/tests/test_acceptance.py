"""Primary acceptance criteria, one test each.

Every test records a PASS/FAIL line (shown in the terminal summary and on
stdout with ``-s``) before asserting.  The simulation-study criteria read
the replicate cache under ``results/study-cache`` and compute whatever is
missing, so a cold run takes hours on one core.
"""
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import yaml

from aiiw import bundle, cli, data, engine, intensity, quadrature, splines
from aiiw import single_index as si
from aiiw.engine import ModelOptions, QuadratureOptions
from aiiw.simulate import SimConfig, simulate_trial
from aiiw.single_index import ConditionalDistribution
from aiiw.study import StudyConfig, run_simulation_study

from conftest import ACCEPTANCE_LINES, LINEAR_FORMULA, observed_only, random_design
from test_single_index import make_single_index, naive_psis

CACHE = Path(__file__).resolve().parents[1] / "results" / "study-cache"
KNOTS = (76.0, 654.0, 1232.0)


def check(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def options(**kw):
    base = dict(bandwidth=30.0, outcome_formula=LINEAR_FORMULA, knots=[KNOTS])
    base.update(kw)
    return ModelOptions(**base)


@pytest.fixture(scope="module")
def arm(small_arm_cp):
    return engine.fit_arm(small_arm_cp, options(), [-0.3, 0.0, 0.3], "UC")


# ---------------------------------------------------------------------------


def test_alpha_zero_reduction(arm):
    rng = np.random.default_rng(2024)
    cp = arm.cp
    fit = arm.outcome
    kernel_w = lambda u: np.exp(-0.5 * u * u)  # noqa: E731  (the fitted kernel is gaussian)
    assert fit.kernel == "gaussian"
    worst_rho = worst_mean = 0.0
    probes = 1000
    for _ in range(probes):
        sid = arm.subjects[rng.integers(arm.n_subjects)]
        rows = cp[cp["id"] == sid]
        t = float(rng.uniform(1.0, 1406.0))
        past = rows[rows["prev_time"] < t].iloc[-1]
        row = pd.DataFrame({"prev_outcome": [past["prev_outcome"]], "time": [t],
                            "delta_time": [t - past["prev_time"]], "prev_time": [past["prev_time"]]})
        x = fit.transform.transform(row)[0]
        dist = fit.conditional(x)
        k = int(past["visit_number"])
        lam = float(arm.intensity.evaluate(np.array([t]), np.array([[past["prev_outcome"]]]), k)[0]) \
            if k in arm.intensity.increments else 0.0
        y = float(fit.support[rng.integers(fit.support.size)])
        worst_rho = max(worst_rho, abs(engine.rho(lam, dist, 0.0, y) - lam))
        w = kernel_w((fit.index - x @ fit.theta) / fit.h)
        nw = float(w @ fit.y / w.sum())
        worst_mean = max(worst_mean, abs(engine.tilted_moments(dist, 0.0).tilted_mean - nw),
                         abs(engine.tilt(dist.weights[None, :], dist.support, [0.0])[1][0, 0] - nw))
    check("alpha=0 reduction", worst_rho <= 1e-12 and worst_mean <= 1e-12,
          f"{probes} probes, max|rho-lambda|={worst_rho:.2e}, max|tilted mean - NW mean|={worst_mean:.2e} (tol 1e-12)")


def test_partial_likelihood_derivatives():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(500 + seed)
        d = random_design(rng, n_subjects=int(rng.integers(5, 15)), p=3)
        assert d.entry.size <= 50
        g = rng.normal(scale=0.5, size=3)
        _, grad, hess = intensity.partial_loglik(g, d)
        eps = 1e-5
        fd_g, fd_h = np.empty(3), np.empty((3, 3))
        for j in range(3):
            e = np.zeros(3)
            e[j] = eps
            vp, gp, _ = intensity.partial_loglik(g + e, d)
            vm, gm, _ = intensity.partial_loglik(g - e, d)
            fd_g[j] = (vp - vm) / (2 * eps)
            fd_h[:, j] = (gp - gm) / (2 * eps)
        worst = max(worst, np.max(np.abs(fd_g - grad)) / max(1.0, np.max(np.abs(grad))),
                    np.max(np.abs(fd_h - hess)) / max(1.0, np.max(np.abs(hess))))
    check("partial-likelihood derivatives", worst < 1e-6, f"20 designs, max relative error {worst:.2e} (tol 1e-6)")


def test_psis_oracle():
    d = make_single_index(20, 2, np.array([1.0, -0.5]), seed=11, discrete=True)
    theta, h = np.array([1.0, -0.4]), 0.6
    diff = abs(si.psis(theta, h, d) - naive_psis(theta, h, d.x, d.y, d.subject))
    scale = abs(si.psis(2 * theta, 2 * h, d) - si.psis(theta, h, d))
    check("PSIS oracle", diff <= 1e-10 and scale <= 1e-10,
          f"20 subjects, |fast-naive|={diff:.2e}, |PSIS(2theta,2h)-PSIS(theta,h)|={scale:.2e} (tol 1e-10)")


def test_quadrature_suite(small_arm_cp):
    worst_cubic = 0.0
    for coef in [(1.0, -2.0, 0.5, 3.0), (0.3, 0.0, -1.0, 0.25)]:
        poly = np.polynomial.Polynomial(coef)
        exact = poly.integ()(2.5) - poly.integ()(-1.0)
        worst_cubic = max(worst_cubic, abs(quadrature.adaptive_simpson(poly, -1.0, 2.5) - exact))
    keep = list(pd.unique(small_arm_cp["id"]))[:5]
    cp = small_arm_cp[small_arm_cp["id"].isin(keep)]
    model = engine.fit_arm(cp, options(quadrature=QuadratureOptions(index_grid=None, tol=1e-9)), [0.0, 0.6])
    layout = engine.build_layout(model.cp, model.intensity, model.outcome.transform)
    fine = engine.influence_term2(layout, model.outcome, model.specs[0], model.alphas,
                                  QuadratureOptions(method="fixed", resolution=100_000, index_grid=None))
    phi2 = float(np.max(np.abs(model.term2[0] - fine)))
    check("quadrature suite", worst_cubic < 1e-12 and phi2 < 1e-6,
          f"cubic error {worst_cubic:.2e} (tol 1e-12); phi2 adaptive vs trapezoid-1e5 on 5 subjects {phi2:.2e} (tol 1e-6)")


def test_spline_suite():
    rng = np.random.default_rng(8)
    pou = one = 0.0
    spd = True
    for _ in range(20):
        knots = np.sort(rng.uniform(0, 1000, int(rng.integers(2, 7))))
        spec = splines.make_basis(knots, int(rng.integers(0, 4)))
        t = np.linspace(knots[0], knots[-1], 1001)
        pou = max(pou, float(np.max(np.abs(spec(t).sum(axis=1) - 1))))
        v = splines.gram_matrix(spec)
        spd &= bool(np.min(np.linalg.eigvalsh(v)) > 0)
        one = max(one, abs(np.ones(spec.dim) @ v @ np.ones(spec.dim) - (knots[-1] - knots[0])) / (knots[-1] - knots[0]))
    hat = float(np.max(np.abs(splines.gram_matrix(splines.make_basis((0, 1), 1)) - [[1 / 3, 1 / 6], [1 / 6, 1 / 3]])))
    check("spline suite", pou <= 1e-12 and spd and one <= 1e-10 and hat <= 1e-15,
          f"partition of unity {pou:.1e}, Gram SPD {spd}, 1'V1 relative error {one:.1e}, hat Gram error {hat:.1e}")


def test_jackknife_identities(arm):
    y = np.random.default_rng(5).normal(size=arm.n_subjects)
    values = dict(zip(arm.subjects, y))
    shim = engine.jackknife(arm, replicate=lambda m, s: [np.array([[np.mean([v for k, v in values.items()
                                                                             if k != s])]])])
    mean_err = abs(shim.covariance()[0][0, 0, 0] - np.var(y, ddof=1) / y.size) / (np.var(y, ddof=1) / y.size)
    parallel = engine.jackknife(arm, threads=4)
    sequential = []
    opts = arm.options
    warm = replace(opts.outcome, theta0=arm.outcome.theta, h0=arm.outcome.h, simplex_scale=opts.jackknife.simplex_scale,
                   x_tol=opts.jackknife.x_tol, newton_hessian=engine.outcome_hessian(arm))
    for s in arm.subjects:
        sequential.append(engine.fit_arm(arm.cp[arm.cp["id"] != s], opts, arm.alphas, outcome_options=warm).betas[0])
    seq_err = float(np.max(np.abs(parallel.betas[0] - np.stack(sequential))))
    check("jackknife identities", mean_err <= 1e-12 and seq_err <= 1e-10,
          f"sample-mean shim relative error {mean_err:.1e} (tol 1e-12); parallel vs sequential refits "
          f"{seq_err:.1e} over {arm.n_subjects} subjects (tol 1e-10)")


def test_tilting_identities():
    m = engine.tilted_moments(ConditionalDistribution(np.array([0.0, 1.0]), np.array([0.5, 0.5])), math.log(2))
    two_point = abs(m.e_alpha - 1.5) + abs(m.tilted_mean - 2 / 3)
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(200):
        support = np.sort(rng.uniform(-2, 6, int(rng.integers(2, 10))))
        p = rng.dirichlet(np.ones(support.size))[None, :]
        a, step = rng.uniform(-2, 2), 1e-4
        _, mm, _ = engine.tilt(p, support, [a - step, a + step])
        w = p[0] * np.exp(a * (support - support.max()))
        w /= w.sum()
        var = w @ support ** 2 - (w @ support) ** 2
        worst = max(worst, abs((mm[0, 1] - mm[0, 0]) / (2 * step) - var))
    check("tilting identities", two_point <= 4e-16 and worst <= 1e-6,
          f"two-point error {two_point:.1e}; d mean/d alpha vs tilted variance max error {worst:.1e} (tol 1e-6)")


# ---------------------------------------------------------------------------
# simulation study


@pytest.fixture(scope="module")
def study():
    return run_simulation_study(StudyConfig(), CACHE)


def test_simulation_study_bias_and_coverage(study):
    t = study.arm_table
    cells = t[t["alpha"].isin([-0.3, 0.0, 0.3])]
    assert len(cells) == 2 * 2 * 3
    for r in cells.itertuples():
        print(f"  {r.arm:9s} t={r.time:5.0f} alpha={r.alpha:+.1f} truth={r.truth:.3f} bias={r.bias:+.4f} "
              f"cov_if={r.coverage_if:.2f} cov_jk={r.coverage_jackknife:.2f}")
    reps = int(cells["reps"].min())
    max_bias = float(cells["abs_bias"].max())
    jk_lo, jk_hi = float(cells["coverage_jackknife"].min()), float(cells["coverage_jackknife"].max())
    if_mean, jk_mean = float(cells["coverage_if"].mean()), float(cells["coverage_jackknife"].mean())
    ok = reps >= 100 and max_bias <= 0.05 and 0.89 <= jk_lo and jk_hi <= 0.99 and if_mean < jk_mean
    check("simulation study (arm means)", ok,
          f"{reps} reps ({len(study.failures)} failed), max|bias|={max_bias:.4f} (<=0.05), jackknife coverage "
          f"{jk_lo:.2f}-{jk_hi:.2f} (in [0.89,0.99]), mean coverage IF {if_mean:.3f} < jackknife {jk_mean:.3f}")


def test_misspecification_sensitivity(study):
    e = study.effect_table
    six = e[e["time"] == 180.0]
    wrong = six[(six["alpha_control"] == 0.0) & (six["alpha_treatment"] == 0.0)].iloc[0]
    right = six[(six["alpha_control"] == 0.6) & (six["alpha_treatment"] == 0.0)].iloc[0]
    ok = (wrong["abs_bias"] >= 0.3 and wrong["coverage_jackknife"] <= 0.3
          and right["abs_bias"] <= 0.05 and right["coverage_jackknife"] >= 0.89)
    check("misspecification sensitivity", ok,
          f"truth (0.6,0) at 6 months: analysed at (0,0) |bias|={wrong['abs_bias']:.3f} (>=0.3), coverage "
          f"{wrong['coverage_jackknife']:.2f} (<=0.3); at (0.6,0) |bias|={right['abs_bias']:.3f} (<=0.05), "
          f"coverage {right['coverage_jackknife']:.2f} (>=0.89)")


# ---------------------------------------------------------------------------
# end to end


@pytest.fixture(scope="module")
def trial_config(tmp_path_factory):
    d = tmp_path_factory.mktemp("accept")
    frame = observed_only(simulate_trial(SimConfig(n=15), rep=9))
    (d / "trial.csv").write_text(data.emit_long_table(frame), encoding="utf-8")
    cfg = {"data": "trial.csv", "treatment": "PA", "alphas": [-0.3, 0.0, 0.3], "end_time": 1406,
           "knots": [list(KNOTS)], "intensity": {"bandwidth": 30}, "seed": 1,
           "outcome": {"fitter": "fixed-coef", "kernel": "gaussian", "abs_tol": 1e-7, "formula": LINEAR_FORMULA}}
    (d / "analysis.yaml").write_text(yaml.safe_dump(cfg), encoding="utf-8")
    return d


def test_end_to_end_determinism(trial_config):
    d = trial_config
    outputs = []
    for run, threads in enumerate((1, 4)):
        model = d / f"model{run}.json"
        assert cli.main(["fit", "--config", str(d / "analysis.yaml"), "--threads", str(threads),
                         "--out", str(model)]) == 0
        assert cli.main(["jackknife", "--bundle", str(model), "--times", "180", "360", "--threads", str(threads),
                         "--out", str(d / f"jk{run}.csv"), "--effect-out", str(d / f"eff{run}.csv")]) == 0
        outputs.append([model.read_bytes(), (d / f"jk{run}.csv").read_bytes(), (d / f"eff{run}.csv").read_bytes()])
    same = outputs[0] == outputs[1]
    check("end-to-end determinism", same,
          "fit + jackknife run twice (threads 1 and 4): bundle, arm table and effect table "
          + ("byte-identical" if same else "differ"))


def test_cross_table_consistency(trial_config):
    path = trial_config / "consistency.json"
    assert cli.main(["fit", "--config", str(trial_config / "analysis.yaml"), "--out", str(path)]) == 0
    model, _ = bundle.read_bundle(path)
    times = [180.0, 360.0]
    eff = engine.treatment_effect(model, times, [(0.0, 0.0)])
    c = model.control.predict(times, [0.0])["mean"].to_numpy()
    t = model.treatment.predict(times, [0.0])["mean"].to_numpy()
    diff = eff["mean_effect"].to_numpy() - (t - c)
    check("cross-table consistency", bool(np.all(diff == 0.0)),
          f"effect(0,0) - (treatment mean - control mean) at 180/360 = {diff.tolist()} (exact zero required); "
          f"e.g. {t[0]:.3f} - {c[0]:.3f} = {eff['mean_effect'].iloc[0]:.3f}")
