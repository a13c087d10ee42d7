"""Monte-Carlo bias and coverage study on simulated trials.

Each replicate simulates both arms, fits the full pipeline at the analysis
alpha grid, runs the jackknife and records estimates and Wald-interval hits
against the Monte-Carlo truth.  Because the simulated observed-data law does
not depend on alpha, one set of fits serves every truth: the arm tables
compare each analysis alpha with the truth at the same alpha, and the
effect table compares chosen analysis pairs with one fixed true pair.

Per-replicate records are appended to a JSON-lines cache keyed by the study
digest, so an interrupted study resumes where it stopped.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import engine, splines
from .bundle import dumps
from .engine import JackknifeOptions, ModelOptions, QuadratureOptions, Z95
from .simulate import SimConfig, compute_true_beta, simulate_trial
from .single_index import FitOptions

log = logging.getLogger(__name__)


@dataclass
class StudyConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    reps: int = 100
    alphas: list[float] = field(default_factory=lambda: [-0.3, 0.0, 0.3, 0.6])
    times: list[float] = field(default_factory=lambda: [180.0, 360.0])
    knots: list[float] = field(default_factory=lambda: [76.0, 654.0, 1232.0])
    bandwidth: float = 30.0
    outcome_formula: str | None = "outcome ~ prev_outcome + scale(time) + scale(delta_time)"
    fitter: str = "fixed-coef"
    kernel: str = "gaussian"
    abs_tol: float = 1e-7
    mc_reps: int = 100_000
    effect_truth: tuple[float, float] = (0.6, 0.0)
    effect_pairs: list[tuple[float, float]] = field(default_factory=lambda: [(0.0, 0.0), (0.6, 0.0)])
    threads: int = 1

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        self.alphas = [float(a) for a in self.alphas]
        self.effect_truth = tuple(float(a) for a in self.effect_truth)
        self.effect_pairs = [tuple(float(a) for a in p) for p in self.effect_pairs]
        needed = {self.effect_truth[0], *(p[0] for p in self.effect_pairs)}
        needed |= {self.effect_truth[1], *(p[1] for p in self.effect_pairs)}
        missing = sorted(needed - set(self.alphas))
        if missing:
            raise ValueError(f"effect alphas {missing} are not in the analysis grid")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sim"] = self.sim.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        d = dict(d)
        sim = SimConfig.from_dict(d.pop("sim", {}) or {})
        return cls(sim=sim, **d)

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("reps")
        d.pop("threads")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def model_options(self) -> ModelOptions:
        return ModelOptions(
            bandwidth=self.bandwidth,
            outcome_formula=self.outcome_formula,
            fitter=self.fitter,
            outcome=FitOptions(kernel=self.kernel, abs_tol=self.abs_tol),
            knots=[tuple(self.knots)],
            quadrature=QuadratureOptions(),
            jackknife=JackknifeOptions(),
        )


def treatment_label(config: SimConfig) -> str:
    return config.arms["treatment"].label


def control_label(config: SimConfig) -> str:
    return config.arms["control"].label


def analyse_replicate(study: StudyConfig, rep: int) -> dict:
    """Fit, jackknife and summarise one simulated trial."""
    frame = simulate_trial(study.sim, rep)
    options = study.model_options()
    model = engine.fit_full(frame, treatment_label(study.sim), options, study.alphas,
                            end_time=study.sim.end_time, terminal="explicit", max_visits=study.sim.max_visits)
    jk = {name: engine.jackknife(arm, threads=study.threads) for name, arm in model.arms().items()}
    rows = []
    for name, arm in model.arms().items():
        table = engine.jackknife_table(arm, jk[name], study.times, study.alphas)
        for r in table.itertuples(index=False):
            rows.append({"arm": name, "time": r.time, "alpha": r.alpha, "estimate": r.mean, "if_var": r.var,
                         "jk_var": r.mean_jackknife_var})
    effects = engine.treatment_effect(model, study.times, study.effect_pairs, jk)
    eff = [{"time": r.time, "alpha_control": r.alpha_control, "alpha_treatment": r.alpha_treatment,
            "estimate": r.mean_effect, "if_var": r.var_effect, "jk_var": r.mean_effect_jackknife_var}
           for r in effects.itertuples(index=False)]
    return {"rep": rep, "arms": rows, "effects": eff,
            "dropped": {name: [str(s) for s in res.dropped] for name, res in jk.items()}}


def true_means(study: StudyConfig) -> pd.DataFrame:
    """Truth per (arm, time, alpha) with its Monte-Carlo standard error."""
    spec = splines.make_basis(tuple(study.knots), 3)
    rows = []
    for name in ("control", "treatment"):
        truths = compute_true_beta(study.sim, name, study.alphas, [spec], mc_reps=study.mc_reps)
        for tb in truths:
            for t in study.times:
                basis = spec(float(t))
                rows.append({"arm": name, "time": float(t), "alpha": tb.alpha, "truth": tb.mean([spec], float(t)),
                             "truth_se": float(np.sqrt(np.sum((basis * tb.se[0]) ** 2)))})
    return pd.DataFrame(rows)


def _cache_paths(cache_dir: Path, study: StudyConfig):
    key = study.digest()
    return cache_dir / f"study-{key}.jsonl", cache_dir / f"truth-{key}.csv"


def _load_records(path: Path) -> dict[int, dict]:
    out = {}
    if not path.exists():
        return out
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            out[int(rec["rep"])] = rec
    return out


@dataclass
class StudyResult:
    arm_table: pd.DataFrame
    effect_table: pd.DataFrame
    truth: pd.DataFrame
    records: list[dict]
    failures: dict[int, str]


def run_simulation_study(study: StudyConfig, cache_dir: str | Path | None = None, progress=None) -> StudyResult:
    """Run (or resume) the study and summarise it.

    Failed replicates are recorded with their error and left out of the
    summaries rather than stopping the study.
    """
    cache = Path(cache_dir) if cache_dir is not None else None
    records: dict[int, dict] = {}
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
        rec_path, truth_path = _cache_paths(cache, study)
        records = {r: v for r, v in _load_records(rec_path).items() if r < study.reps}
    if cache is not None and truth_path.exists():
        truth = pd.read_csv(truth_path, float_precision="round_trip")
    else:
        truth = true_means(study)
        if cache is not None:
            truth.to_csv(truth_path, index=False, float_format="%.17g")
    for rep in range(study.reps):
        if rep in records:
            continue
        try:
            rec = analyse_replicate(study, rep)
        except Exception as exc:  # noqa: BLE001 - a failed replicate is data, not a crash
            log.warning("replicate %d failed: %s", rep, exc)
            rec = {"rep": rep, "error": f"{type(exc).__name__}: {exc}"}
        records[rep] = rec
        if cache is not None:
            with rec_path.open("a", encoding="utf-8") as fh:
                fh.write(dumps(rec).replace("\n", "") + "\n")
        if progress is not None:
            progress(rep, rec)
    ordered = [records[r] for r in sorted(records)]
    failures = {r["rep"]: r["error"] for r in ordered if "error" in r}
    ok = [r for r in ordered if "error" not in r]
    return StudyResult(arm_summary(ok, truth, study), effect_summary(ok, truth, study), truth, ordered, failures)


def _snap(truth: pd.DataFrame, study: StudyConfig) -> pd.DataFrame:
    """Replace time and alpha in a re-read truth table by the exact grid
    values, so merges do not depend on how the floats were parsed."""
    out = truth.copy()
    for col, grid in (("time", study.times), ("alpha", study.alphas)):
        grid = np.asarray(grid, float)
        out[col] = grid[np.abs(out[col].to_numpy(float)[:, None] - grid[None, :]).argmin(axis=1)]
    return out


def _coverage(est, var, truth):
    se = np.sqrt(np.maximum(var, 0.0))
    return np.abs(est - truth) <= Z95 * se


def arm_summary(records: list[dict], truth: pd.DataFrame, study: StudyConfig) -> pd.DataFrame:
    """Per arm, time and alpha: truth, mean estimate, bias and the IF-Wald
    and jackknife-Wald coverage (the layout of the arm-level tables)."""
    cols = ["arm", "time", "alpha", "truth", "truth_se", "reps", "mean_estimate", "bias", "abs_bias",
            "empirical_sd", "mean_if_se", "mean_jk_se", "coverage_if", "coverage_jackknife"]
    if not records:
        return pd.DataFrame(columns=cols)
    est = pd.DataFrame([row for r in records for row in r["arms"]])
    merged = est.merge(_snap(truth, study), on=["arm", "time", "alpha"], how="left")
    merged["hit_if"] = _coverage(merged["estimate"], merged["if_var"], merged["truth"])
    merged["hit_jk"] = _coverage(merged["estimate"], merged["jk_var"], merged["truth"])
    out = []
    for (arm, t, a), g in merged.groupby(["arm", "time", "alpha"], sort=False):
        bias = float(g["estimate"].mean() - g["truth"].iloc[0])
        out.append([arm, t, a, g["truth"].iloc[0], g["truth_se"].iloc[0], len(g), g["estimate"].mean(), bias,
                    abs(bias), g["estimate"].std(ddof=1) if len(g) > 1 else math.nan,
                    np.sqrt(g["if_var"].clip(lower=0)).mean(), np.sqrt(g["jk_var"].clip(lower=0)).mean(),
                    g["hit_if"].mean(), g["hit_jk"].mean()])
    df = pd.DataFrame(out, columns=cols)
    order = {"control": 0, "treatment": 1}
    df = df.sort_values(["arm", "time", "alpha"], key=lambda s: s.map(order) if s.name == "arm" else s)
    return df.reset_index(drop=True)


def effect_summary(records: list[dict], truth: pd.DataFrame, study: StudyConfig) -> pd.DataFrame:
    """Treatment effects at the analysis pairs against the effect at the
    fixed true pair (the layout of the misspecification table)."""
    cols = ["time", "true_alpha_control", "true_alpha_treatment", "alpha_control", "alpha_treatment", "truth",
            "reps", "mean_estimate", "bias", "abs_bias", "coverage_if", "coverage_jackknife"]
    if not records:
        return pd.DataFrame(columns=cols)
    a0, a1 = study.effect_truth
    tv = _snap(truth, study).set_index(["arm", "time", "alpha"])["truth"]
    est = pd.DataFrame([row for r in records for row in r["effects"]])
    out = []
    for (t, c, tr), g in est.groupby(["time", "alpha_control", "alpha_treatment"], sort=True):
        true_eff = float(tv[("treatment", t, a1)] - tv[("control", t, a0)])
        hit_if = _coverage(g["estimate"], g["if_var"], true_eff).mean()
        hit_jk = _coverage(g["estimate"], g["jk_var"], true_eff).mean()
        bias = float(g["estimate"].mean() - true_eff)
        out.append([t, a0, a1, c, tr, true_eff, len(g), g["estimate"].mean(), bias, abs(bias), hit_if, hit_jk])
    return pd.DataFrame(out, columns=cols)

