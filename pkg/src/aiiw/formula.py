"""Small model-formula grammar for the intensity and outcome models.

Intensity::

    event(prev_time, time, observed) ~ prev_outcome + Age | strata(visit_number)

Outcome::

    outcome ~ -1 + ns(prev_outcome, df=3) + scale(time) + scale(delta_time)

A formula whose right-hand side contains ``.`` modifies a default: ``+ term``
adds, ``- term`` removes.  Without ``.`` the right-hand side replaces the
default.  Dotted names such as ``..prev_outcome..`` are accepted.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.interpolate import BSpline

DEFAULT_INTENSITY = "event(prev_time, time, observed) ~ prev_outcome | strata(visit_number)"
DEFAULT_OUTCOME = "outcome ~ -1 + ns(prev_outcome, df=3) + scale(time) + scale(delta_time)"

TIME_VARIABLES = ("time", "delta_time")
BUILTIN_VARIABLES = ("prev_outcome", "prev_time", "time", "delta_time", "visit_number")


class FormulaError(ValueError):
    pass


def _normalise(text: str) -> str:
    text = re.sub(r"\.\.([A-Za-z_][A-Za-z0-9_]*)\.\.", r"\1", text)
    return re.sub(r"\s+", "", text)


def _split_top(text: str, seps: str) -> list[tuple[str, str]]:
    """Split on top-level separator characters, keeping the separator."""
    out, depth, start, sign = [], 0, 0, "+"
    for pos, ch in enumerate(text):
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        elif depth == 0 and ch in seps:
            if pos > start:
                out.append((sign, text[start:pos]))
            sign, start = ch, pos + 1
    if start < len(text):
        out.append((sign, text[start:]))
    return out


def _apply(base: list[str], rhs: str) -> list[str]:
    parts = _split_top(rhs, "+-")
    if not any(t == "." for _, t in parts):
        terms: list[str] = []
        for sign, t in parts:
            if sign == "+" and t not in terms:
                terms.append(t)
            elif sign == "-" and t in terms:
                terms.remove(t)
        return terms
    terms = list(base)
    for sign, t in parts:
        if t == ".":
            continue
        if sign == "+" and t not in terms:
            terms.append(t)
        elif sign == "-":
            if t in terms:
                terms.remove(t)
            elif t not in ("1", "0"):
                raise FormulaError(f"cannot remove {t!r}: not in the base formula")
    return terms


@dataclass(frozen=True)
class IntensityFormula:
    covariates: tuple[str, ...]
    strata: str | None = "visit_number"

    @classmethod
    def parse(cls, text: str | None = None) -> "IntensityFormula":
        default = cls._parse_full(DEFAULT_INTENSITY)
        if text is None:
            return default
        return cls._parse_full(text, default)

    @classmethod
    def _parse_full(cls, text: str, base: "IntensityFormula | None" = None) -> "IntensityFormula":
        text = _normalise(text)
        if "~" not in text:
            raise FormulaError(f"intensity formula needs '~': {text!r}")
        lhs, rhs = text.split("~", 1)
        if lhs not in ("", ".") and not lhs.startswith("event("):
            raise FormulaError(f"unsupported intensity response {lhs!r}")
        strata_part = None
        if "|" in rhs:
            rhs, strata_part = rhs.split("|", 1)
        modifying = any(t == "." for _, t in _split_top(rhs, "+-"))
        strata = base.strata if (base is not None and modifying) else None
        if strata_part is not None:
            strata = _strata_var(strata_part)
        base_terms = list(base.covariates) if base is not None else []
        terms = _apply(base_terms, rhs) if rhs else base_terms
        cov = []
        for t in terms:
            if t.startswith("strata("):
                strata = _strata_var(t)
            elif t not in ("1", "0"):
                if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", t):
                    raise FormulaError(f"intensity terms must be plain variables, got {t!r}")
                cov.append(t)
        if "time" in cov or "delta_time" in cov:
            raise FormulaError("intensity covariates must be known at prev_time; time and delta_time are not")
        return cls(tuple(cov), strata)

    def __str__(self) -> str:
        rhs = " + ".join(self.covariates) or "1"
        tail = f" | strata({self.strata})" if self.strata else ""
        return f"event(prev_time, time, observed) ~ {rhs}{tail}"


def _strata_var(text: str) -> str | None:
    m = re.fullmatch(r"strata\(([A-Za-z_][A-Za-z0-9_]*)\)", text)
    if not m:
        raise FormulaError(f"bad strata specification {text!r}")
    if m.group(1) != "visit_number":
        raise FormulaError("only strata(visit_number) is supported")
    return m.group(1)


_TERM = re.compile(r"(?:(ns|scale)\(([A-Za-z_][A-Za-z0-9_]*)(?:,df=(\d+))?\)|([A-Za-z_][A-Za-z0-9_]*))$")


@dataclass(frozen=True)
class Term:
    kind: str  # "var", "ns" or "scale"
    var: str
    df: int | None = None

    def __str__(self) -> str:
        if self.kind == "var":
            return self.var
        if self.kind == "ns":
            return f"ns({self.var}, df={self.df})"
        return f"scale({self.var})"


def _parse_term(text: str) -> Term:
    m = _TERM.match(text)
    if not m:
        raise FormulaError(f"unsupported outcome term {text!r}")
    fn, arg, df, plain = m.groups()
    if plain:
        return Term("var", plain)
    if fn == "ns":
        return Term("ns", arg, int(df) if df else 3)
    if df:
        raise FormulaError("scale() takes no df argument")
    return Term("scale", arg)


@dataclass(frozen=True)
class OutcomeFormula:
    terms: tuple[Term, ...]

    @classmethod
    def parse(cls, text: str | None = None) -> "OutcomeFormula":
        default = cls._parse(DEFAULT_OUTCOME, None)
        if text is None:
            return default
        return cls._parse(text, default)

    @classmethod
    def _parse(cls, text: str, base: "OutcomeFormula | None") -> "OutcomeFormula":
        text = _normalise(text)
        if "~" not in text:
            raise FormulaError(f"outcome formula needs '~': {text!r}")
        lhs, rhs = text.split("~", 1)
        if lhs not in ("", ".", "outcome"):
            raise FormulaError(f"unsupported outcome response {lhs!r}")
        base_terms = [str(t).replace(" ", "") for t in base.terms] if base else []
        raw = _apply(base_terms, rhs)
        terms = tuple(_parse_term(t) for t in raw if t not in ("1", "0"))
        for t in terms:
            if t.var in TIME_VARIABLES and t.kind == "ns":
                raise FormulaError(
                    f"{t}: only linear functions of time are allowed (piecewise linear with a common slope)"
                )
            if t.var == "visit_number":
                raise FormulaError("visit_number is reserved for intensity strata")
        if not terms:
            raise FormulaError("outcome formula has no predictors")
        return cls(terms)

    def __str__(self) -> str:
        return "outcome ~ -1 + " + " + ".join(str(t) for t in self.terms)


# ---------------------------------------------------------------------------
# design construction


def natural_spline_knots(x: np.ndarray, df: int) -> tuple[np.ndarray, tuple[float, float]]:
    """Interior knots at equally spaced quantiles, as for ``ns(x, df)``
    without intercept: ``df - 1`` interior knots."""
    x = np.asarray(x, float)
    n_int = df - 1
    probs = np.arange(1, n_int + 1) / (n_int + 1)
    interior = np.quantile(x, probs) if n_int else np.empty(0)
    return interior, (float(x.min()), float(x.max()))


def natural_spline_basis(x, interior: np.ndarray, boundary: tuple[float, float]) -> np.ndarray:
    """Cubic natural spline basis without intercept (``df = len(interior)+1``
    columns), linear beyond the boundary knots."""
    x = np.atleast_1d(np.asarray(x, float))
    lo, hi = boundary
    if hi <= lo:
        raise FormulaError("natural spline needs a non-degenerate predictor range")
    t = np.r_[[lo] * 4, interior, [hi] * 4]
    nb = len(t) - 4
    spl = BSpline(t, np.eye(nb), 3, extrapolate=False)
    d1 = spl.derivative(1)
    d2 = spl.derivative(2)
    const = d2(np.array([lo, hi]))[:, 1:]
    q, _ = np.linalg.qr(const.T, mode="complete")
    proj = q[:, 2:]

    inside = np.clip(x, lo, hi)
    basis = spl(inside)
    basis = np.nan_to_num(basis)[:, 1:]
    below, above = x < lo, x > hi
    if below.any():
        basis[below] = spl(lo)[1:] + np.outer(x[below] - lo, d1(lo)[1:])
    if above.any():
        basis[above] = spl(hi)[1:] + np.outer(x[above] - hi, d1(hi)[1:])
    return basis @ proj


@dataclass
class OutcomeDesignTransform:
    """Frozen mapping from counting-process columns to predictor vectors.

    Scaling constants, spline knots and categorical levels are learned from
    the training rows and reused verbatim at prediction time.
    """

    formula: OutcomeFormula
    params: list[dict] = field(default_factory=list)
    column_names: list[str] = field(default_factory=list)

    @classmethod
    def fit(cls, formula: OutcomeFormula, rows: pd.DataFrame) -> "OutcomeDesignTransform":
        params, names = [], []
        for term in formula.terms:
            if term.var not in rows.columns:
                raise FormulaError(f"unknown variable {term.var!r} in outcome formula")
            col = rows[term.var]
            if term.kind == "var":
                if col.dtype == object:
                    levels = sorted(pd.unique(col).tolist())
                    params.append({"levels": levels})
                    names += [f"{term.var}[{lv}]" for lv in levels[1:]]
                else:
                    params.append({})
                    names.append(term.var)
            elif term.kind == "scale":
                x = col.to_numpy(float)
                sd = float(np.std(x, ddof=1)) if len(x) > 1 else 0.0
                if not sd > 0:
                    raise FormulaError(f"scale({term.var}) has zero spread")
                params.append({"center": float(np.mean(x)), "sd": sd})
                names.append(str(term))
            else:
                interior, boundary = natural_spline_knots(col.to_numpy(float), term.df)
                params.append({"interior": interior.tolist(), "boundary": list(boundary)})
                names += [f"{term}[{j}]" for j in range(term.df)]
        return cls(formula, params, names)

    @property
    def dim(self) -> int:
        return len(self.column_names)

    def transform(self, rows: pd.DataFrame) -> np.ndarray:
        cols = []
        for term, p in zip(self.formula.terms, self.params):
            col = rows[term.var]
            if term.kind == "var":
                if "levels" in p:
                    vals = col.to_numpy(object)
                    cols += [(vals == lv).astype(float)[:, None] for lv in p["levels"][1:]]
                else:
                    cols.append(col.to_numpy(float)[:, None])
            elif term.kind == "scale":
                cols.append(((col.to_numpy(float) - p["center"]) / p["sd"])[:, None])
            else:
                cols.append(natural_spline_basis(col.to_numpy(float), np.asarray(p["interior"]),
                                                 tuple(p["boundary"])))
        return np.hstack(cols) if cols else np.empty((len(rows), 0))

    def time_slope(self) -> np.ndarray:
        """d X / d t inside a between-assessment piece, where ``time`` and
        ``delta_time`` advance at unit rate and everything else is frozen."""
        slope = []
        for term, p in zip(self.formula.terms, self.params):
            moves = term.var in TIME_VARIABLES
            if term.kind == "var":
                width = len(p["levels"]) - 1 if "levels" in p else 1
                slope += [1.0 if moves else 0.0] * width
            elif term.kind == "scale":
                slope.append(1.0 / p["sd"] if moves else 0.0)
            else:
                slope += [0.0] * term.df
        return np.asarray(slope)

    def to_dict(self) -> dict:
        return {"formula": str(self.formula), "params": self.params, "column_names": self.column_names}

    @classmethod
    def from_dict(cls, d: dict) -> "OutcomeDesignTransform":
        return cls(OutcomeFormula.parse(d["formula"]), d["params"], d["column_names"])


def intensity_matrix(formula: IntensityFormula, rows: pd.DataFrame, levels: dict | None = None):
    """Covariate matrix Z for the intensity model and the categorical levels used."""
    levels = dict(levels or {})
    cols, names = [], []
    for var in formula.covariates:
        if var not in rows.columns:
            raise FormulaError(f"unknown variable {var!r} in intensity formula")
        col = rows[var]
        if col.dtype == object:
            lv = levels.setdefault(var, sorted(pd.unique(col).tolist()))
            vals = col.to_numpy(object)
            for level in lv[1:]:
                cols.append((vals == level).astype(float))
                names.append(f"{var}[{level}]")
        else:
            cols.append(col.to_numpy(float))
            names.append(var)
    z = np.column_stack(cols) if cols else np.empty((len(rows), 0))
    return z, names, levels
