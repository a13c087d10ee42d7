"""Command-line front end.

    aiiw fit        --config analysis.yaml --out model.json
    aiiw predict    --bundle model.json --times 180 360 --out means.csv [--effect-out effect.csv]
    aiiw jackknife  --bundle model.json --times 180 360 --out means_jk.csv
    aiiw effect     --bundle model.json --times 180 360 --out effect.csv [--jackknife]
    aiiw restrict   --bundle model.json --mu-min 1.2 --mu-max 3 --out retained.csv
    aiiw simulate   --config study.yaml --reps 100 --out-dir study/
    aiiw plot-data  --bundle model.json --times 180 360 --out-dir plots/ [--jackknife]

Values in the config file override defaults and flags override the file.
Exit status: 0 success, 1 estimation or input error, 2 missing file.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import engine
from .bundle import BundleError, read_bundle, write_bundle, write_table
from .config import AnalysisConfig, ConfigError, merge, read_mapping
from .data import DataValidationError, ingest_long_table
from .study import StudyConfig, run_simulation_study

log = logging.getLogger("aiiw")

EXIT_ERROR = 1
EXIT_MISSING = 2


class MissingFile(Exception):
    pass


class Outputs:
    """Tracks files written by a command so a failure can remove them."""

    def __init__(self):
        self.paths: list[Path] = []

    def table(self, path, df: pd.DataFrame):
        write_table(path, df)
        self.paths.append(Path(path))

    def bundle(self, path, model, config):
        write_bundle(path, model, config)
        self.paths += [Path(path), Path(str(path) + ".summary.txt")]

    def rollback(self):
        for p in self.paths:
            p.unlink(missing_ok=True)


def _need(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise MissingFile(f"file not found: {p}")
    return p


# ---------------------------------------------------------------------------
# argument handling


def _float_list(values):
    out = []
    for v in values or []:
        out += [float(x) for x in str(v).replace(",", " ").split()]
    return out


def _analysis_config(args) -> AnalysisConfig:
    base = read_mapping(_need(args.config)) if args.config else {}
    flags = {
        "data": args.data,
        "treatment": args.treatment,
        "alphas": _float_list(args.alphas) or None,
        "end_time": args.end_time,
        "terminal": args.terminal,
        "knots": [_float_list([k]) for k in args.knots] if args.knots else None,
        "seed": args.seed,
        "threads": args.threads,
        "intensity": {"bandwidth": args.bandwidth, "kernel": args.intensity_kernel},
        "outcome": {"fitter": args.fitter, "kernel": args.outcome_kernel, "abs_tol": args.abs_tol},
    }
    flags["intensity"] = {k: v for k, v in flags["intensity"].items() if v is not None} or None
    flags["outcome"] = {k: v for k, v in flags["outcome"].items() if v is not None} or None
    cfg = AnalysisConfig.from_dict(merge(base, flags))
    if cfg.data is None:
        raise ConfigError("no data file given (--data or 'data' in the config)")
    if cfg.treatment is None:
        raise ConfigError("no treatment label given (--treatment or 'treatment' in the config)")
    if args.config and not Path(cfg.data).is_absolute():
        relative = Path(args.config).parent / cfg.data
        if relative.is_file() and not Path(cfg.data).is_file():
            cfg.data = str(relative)
    return cfg


def _threads(args, config) -> int:
    return args.threads if getattr(args, "threads", None) else config.threads


def _times(args):
    times = _float_list(args.times)
    if not times:
        raise ConfigError("at least one prediction time is required")
    return times


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args, out: Outputs) -> None:
    config = _analysis_config(args)
    with _need(config.data).open(encoding="utf-8") as fh:
        frame = ingest_long_table(fh, config.schema_obj())
    model = engine.fit_full(frame, config.treatment, config.model_options(), config.alphas,
                            end_time=config.end_time, terminal=config.terminal, max_visits=config.max_visits)
    out.bundle(args.out, model, config)


def arm_table(model: engine.FullModel, times, alphas, jk=None) -> pd.DataFrame:
    """Long table: one row per (arm, time, alpha)."""
    parts = []
    for name, arm in model.arms().items():
        tab = (engine.predict_mean(arm, times, alphas) if jk is None
               else engine.jackknife_table(arm, jk[name], times, alphas))
        tab.insert(0, "arm", name)
        parts.append(tab)
    return pd.concat(parts, ignore_index=True)


def _alphas(args, model):
    given = _float_list(getattr(args, "alphas", None))
    if not given:
        return model.control.alphas.tolist()
    missing = [a for a in given if a not in model.control.alphas or a not in model.treatment.alphas]
    if missing:
        raise ConfigError(f"alphas {missing} were not fitted")
    return given


def _jackknife_both(model, threads):
    return {name: engine.jackknife(arm, threads=threads) for name, arm in model.arms().items()}


def cmd_predict(args, out: Outputs) -> None:
    model, config = read_bundle(_need(args.bundle))
    times, alphas = _times(args), _alphas(args, model)
    out.table(args.out, arm_table(model, times, alphas))
    if args.effect_out:
        out.table(args.effect_out, engine.treatment_effect(model, times, [(a, a) for a in alphas]))


def cmd_jackknife(args, out: Outputs) -> None:
    model, config = read_bundle(_need(args.bundle))
    times, alphas = _times(args), _alphas(args, model)
    jk = _jackknife_both(model, _threads(args, config))
    out.table(args.out, arm_table(model, times, alphas, jk))
    if args.effect_out:
        out.table(args.effect_out, engine.treatment_effect(model, times, [(a, a) for a in alphas], jk))


def _pairs(args, model):
    if not args.pairs:
        return engine.alpha_pairs(model)
    vals = _float_list(args.pairs)
    if len(vals) % 2:
        raise ConfigError("--pairs needs an even number of values (control, treatment)")
    return list(zip(vals[0::2], vals[1::2]))


def cmd_effect(args, out: Outputs) -> None:
    model, config = read_bundle(_need(args.bundle))
    jk = _jackknife_both(model, _threads(args, config)) if args.jackknife else None
    out.table(args.out, engine.treatment_effect(model, _times(args), _pairs(args, model), jk))


def cmd_restrict(args, out: Outputs) -> None:
    model, config = read_bundle(_need(args.bundle))
    rows = []
    for name, arm in model.arms().items():
        curves = engine.mean_curves(arm, args.spacing)
        kept = set(engine.restrict_alpha_range(curves, args.mu_min, args.mu_max))
        for a in arm.alphas:
            grp = curves[curves["alpha"] == a]["mean"]
            rows.append([name, arm.label, float(a), float(grp.min()), float(grp.max()), float(a) in kept])
    df = pd.DataFrame(rows, columns=["arm", "label", "alpha", "curve_min", "curve_max", "retained"])
    out.table(args.out, df)
    for name in ("control", "treatment"):
        kept = df[(df["arm"] == name) & df["retained"]]["alpha"].tolist()
        print(f"{name}: retained alpha {kept}")


def cmd_simulate(args, out: Outputs) -> None:
    base = read_mapping(_need(args.config)) if args.config else {}
    if args.reps is not None:
        base["reps"] = args.reps
    if args.threads:
        base["threads"] = args.threads
    if args.mc_reps is not None:
        base["mc_reps"] = args.mc_reps
    study = StudyConfig.from_dict(base)
    cache = args.cache or Path(args.out_dir) / "cache"
    result = run_simulation_study(study, cache)
    out_dir = Path(args.out_dir)
    out.table(out_dir / "arm_table.csv", result.arm_table)
    out.table(out_dir / "effect_table.csv", result.effect_table)
    out.table(out_dir / "truth.csv", result.truth)
    failures = pd.DataFrame(sorted(result.failures.items()), columns=["rep", "error"])
    out.table(out_dir / "failures.csv", failures)
    print(f"{len(result.records) - len(result.failures)} of {len(result.records)} replicates succeeded")


def ci_bound(lower, upper):
    """Interval endpoint nearest zero, or 0 when the interval covers zero."""
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    return np.where(lower > 0, lower, np.where(upper < 0, upper, 0.0))


def cmd_plotdata(args, out: Outputs) -> None:
    model, config = read_bundle(_need(args.bundle))
    times = _times(args)
    out_dir = Path(args.out_dir)
    curves = []
    for name, arm in model.arms().items():
        c = engine.mean_curves(arm, args.spacing)
        c.insert(0, "arm", name)
        curves.append(c)
    out.table(out_dir / "mean_curves.csv", pd.concat(curves, ignore_index=True))

    jk = _jackknife_both(model, _threads(args, config)) if args.jackknife else None
    dots = []
    for name, arm in model.arms().items():
        tab = engine.predict_mean(arm, times) if jk is None else engine.jackknife_table(arm, jk[name], times)
        var = tab["var"] if jk is None else tab["mean_jackknife_var"]
        lo, hi = engine.wald_interval(tab["mean"].to_numpy(), var.to_numpy())
        dots.append(pd.DataFrame({"arm": name, "time": tab["time"], "alpha": tab["alpha"],
                                  "estimate": tab["mean"], "lower": lo, "upper": hi}))
    out.table(out_dir / "dot_whisker.csv", pd.concat(dots, ignore_index=True))

    eff = engine.treatment_effect(model, times, engine.alpha_pairs(model), jk)
    out.table(out_dir / "effect_surface.csv",
              eff[["time", "alpha_control", "alpha_treatment", "mean_effect"]])
    var = eff["var_effect"] if jk is None else eff["mean_effect_jackknife_var"]
    lo, hi = engine.wald_interval(eff["mean_effect"].to_numpy(), var.to_numpy())
    bound = eff[["time", "alpha_control", "alpha_treatment"]].copy()
    bound["lower"], bound["upper"], bound["bound"] = lo, hi, ci_bound(lo, hi)
    out.table(out_dir / "ci_bound_surface.csv", bound)


# ---------------------------------------------------------------------------
# parser


def _fit_flags(p):
    p.add_argument("--config", help="YAML or JSON analysis configuration")
    p.add_argument("--data", help="long-format CSV (id, arm, time, outcome, covariates...)")
    p.add_argument("--treatment", help="label of the treatment arm")
    p.add_argument("--alphas", nargs="+", help="sensitivity parameters")
    p.add_argument("--end-time", type=float)
    p.add_argument("--terminal", choices=["add", "explicit"])
    p.add_argument("--knots", nargs="+", help="knot sequence(s), each comma separated")
    p.add_argument("--bandwidth", type=float, help="intensity smoothing bandwidth")
    p.add_argument("--intensity-kernel")
    p.add_argument("--fitter", choices=list(engine.MODES))
    p.add_argument("--outcome-kernel")
    p.add_argument("--abs-tol", type=float)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aiiw", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit both arms and write a model bundle")
    _fit_flags(p)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    for name, func, helptext in (("predict", cmd_predict, "marginal means and IF variances"),
                                 ("jackknife", cmd_jackknife, "marginal means with jackknife variances")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--bundle", required=True)
        p.add_argument("--times", nargs="+", required=True)
        p.add_argument("--alphas", nargs="+")
        p.add_argument("--threads", type=int)
        p.add_argument("--out", required=True)
        p.add_argument("--effect-out", help="also write effects at equal alphas in both arms")
        p.set_defaults(func=func)

    p = sub.add_parser("effect", help="treatment effects over alpha pairs")
    p.add_argument("--bundle", required=True)
    p.add_argument("--times", nargs="+", required=True)
    p.add_argument("--pairs", nargs="+", help="alpha_control,alpha_treatment pairs (default: all)")
    p.add_argument("--jackknife", action="store_true")
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_effect)

    p = sub.add_parser("restrict", help="alphas whose mean curve stays within plausible bounds")
    p.add_argument("--bundle", required=True)
    p.add_argument("--mu-min", type=float, required=True)
    p.add_argument("--mu-max", type=float, required=True)
    p.add_argument("--spacing", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_restrict)

    p = sub.add_parser("simulate", help="bias and coverage study on simulated trials")
    p.add_argument("--config", help="YAML or JSON study configuration")
    p.add_argument("--reps", type=int)
    p.add_argument("--mc-reps", type=int)
    p.add_argument("--cache")
    p.add_argument("--threads", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("plot-data", help="write the four plot-data tables")
    p.add_argument("--bundle", required=True)
    p.add_argument("--times", nargs="+", required=True)
    p.add_argument("--spacing", type=float, default=1.0)
    p.add_argument("--jackknife", action="store_true")
    p.add_argument("--threads", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_plotdata)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_ERROR
    out = Outputs()
    try:
        args.func(args, out)
    except MissingFile as exc:
        out.rollback()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, BundleError, DataValidationError, engine.EstimationError, ValueError, KeyError) as exc:
        out.rollback()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except BaseException:
        out.rollback()
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
