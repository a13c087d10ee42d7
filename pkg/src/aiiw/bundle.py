"""Persisted model bundles and result tables.

A bundle is one UTF-8 JSON document::

    {"schema": "aiiw.bundle/1",
     "config": {...analysis configuration...},
     "treatment_label": ..., "control_label": ..., "end_time": ..., "max_visits": ...,
     "arms": {"control": ARM, "treatment": ARM}}

    ARM = {"label": str, "alphas": [float],
           "data": {column: {"dtype": str, "values": [...]}},   # counting-process rows
           "intensity": {...}, "outcome": {...},
           "term1": [[n][A][d] per knot sequence], "term2": ..., "betas": [[A][d] ...]}

Floats are written with Python's shortest round-trip repr and NaN as null,
keys are sorted and arrays keep their nesting, so equal models give
byte-identical files.  A plain-text summary is written next to the bundle.
"""
from __future__ import annotations

import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from .config import AnalysisConfig
from .engine import ArmModel, FullModel
from .intensity import IntensityFit
from .single_index import SingleIndexFit

SCHEMA = "aiiw.bundle/1"


class BundleError(ValueError):
    pass


def atomic_write(path: str | Path, text: str) -> None:
    """Write ``text`` next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _clean(obj):
    """JSON-ready copy: numpy to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=1, allow_nan=False) + "\n"


def _frame_to_dict(df: pd.DataFrame) -> dict:
    out = {}
    for col in df.columns:
        s = df[col]
        if pd.api.types.is_bool_dtype(s):
            kind, values = "bool", [bool(v) for v in s]
        elif pd.api.types.is_integer_dtype(s):
            kind, values = "int", [int(v) for v in s]
        elif pd.api.types.is_float_dtype(s):
            kind, values = "float", [float(v) for v in s]
        else:
            kind, values = "str", [None if v is None or (isinstance(v, float) and math.isnan(v)) else str(v)
                                   for v in s]
        out[str(col)] = {"dtype": kind, "values": values}
    return {"columns": list(map(str, df.columns)), "data": out}


def _frame_from_dict(d: dict) -> pd.DataFrame:
    cols = {}
    for col in d["columns"]:
        spec = d["data"][col]
        kind, values = spec["dtype"], spec["values"]
        if kind == "float":
            cols[col] = np.array([np.nan if v is None else v for v in values], float)
        elif kind == "int":
            cols[col] = np.array(values, np.int64)
        elif kind == "bool":
            cols[col] = np.array(values, bool)
        else:
            cols[col] = pd.Series(values, dtype=object)
    return pd.DataFrame(cols, columns=d["columns"])


def _float_nested(x):
    return np.asarray(x, float)


def arm_to_dict(model: ArmModel) -> dict:
    return {
        "label": model.label,
        "alphas": model.alphas,
        "data": _frame_to_dict(model.cp),
        "intensity": model.intensity.to_dict(),
        "outcome": model.outcome.to_dict(),
        "term1": model.term1,
        "term2": model.term2,
        "betas": model.betas,
    }


def arm_from_dict(d: dict, options) -> ArmModel:
    return ArmModel(
        label=d["label"],
        cp=_frame_from_dict(d["data"]),
        options=options,
        intensity=IntensityFit.from_dict(d["intensity"]),
        outcome=SingleIndexFit.from_dict(d["outcome"]),
        alphas=np.asarray(d["alphas"], float),
        term1=[_float_nested(t) for t in d["term1"]],
        term2=[_float_nested(t) for t in d["term2"]],
        betas=[_float_nested(b) for b in d["betas"]],
    )


def bundle_to_text(model: FullModel, config: AnalysisConfig) -> str:
    settings = config.to_dict()
    settings.pop("threads")     # execution detail, kept out so bundles match across thread counts
    doc = {
        "schema": SCHEMA,
        "config": settings,
        "treatment_label": model.treatment_label,
        "control_label": model.control_label,
        "end_time": model.end_time,
        "max_visits": model.max_visits,
        "arms": {name: arm_to_dict(arm) for name, arm in model.arms().items()},
    }
    return dumps(doc)


def bundle_from_text(text: str) -> tuple[FullModel, AnalysisConfig]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise BundleError(f"not a model bundle: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema") != SCHEMA:
        raise BundleError(f"unsupported bundle schema {doc.get('schema') if isinstance(doc, dict) else None!r}")
    config = AnalysisConfig.from_dict(doc["config"])
    options = config.model_options()
    arms = {name: arm_from_dict(doc["arms"][name], options) for name in ("control", "treatment")}
    model = FullModel(arms["control"], arms["treatment"], doc["treatment_label"], doc["control_label"],
                      doc.get("end_time"), doc.get("max_visits"))
    return model, config


def summary_text(model: FullModel) -> str:
    lines = [f"schema: {SCHEMA}", f"treatment: {model.treatment_label}", f"control: {model.control_label}",
             f"end_time: {model.end_time}"]
    for name, arm in model.arms().items():
        lines.append(f"[{name}] label={arm.label} subjects={arm.n_subjects} "
                     f"assessments={int(arm.cp['event'].sum())}")
        lines.append(f"  intensity: gamma={np.round(arm.intensity.gamma, 6).tolist()} "
                     f"bandwidth={arm.intensity.bandwidth:.6g}")
        lines.append(f"  outcome: theta={np.round(arm.outcome.theta, 6).tolist()} h={arm.outcome.h:.6g} "
                     f"mode={arm.outcome.mode}")
        for k, (spec, betas) in enumerate(zip(arm.specs, arm.betas)):
            for a, beta in zip(arm.alphas, betas):
                lines.append(f"  knots[{k}] alpha={a:g} beta={np.round(beta, 6).tolist()}")
    return "\n".join(lines) + "\n"


def write_bundle(path: str | Path, model: FullModel, config: AnalysisConfig) -> None:
    atomic_write(path, bundle_to_text(model, config))
    atomic_write(Path(str(path) + ".summary.txt"), summary_text(model))


def read_bundle(path: str | Path) -> tuple[FullModel, AnalysisConfig]:
    return bundle_from_text(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# tables


def table_to_text(df: pd.DataFrame) -> str:
    """CSV with shortest round-trip floats, so re-reading and re-writing a
    table reproduces it byte for byte."""
    buf = io.StringIO()
    buf.write(",".join(map(str, df.columns)) + "\n")
    for row in df.itertuples(index=False):
        buf.write(",".join(_cell(v) for v in row) + "\n")
    return buf.getvalue()


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "NA"
        return repr(v)
    s = str(v)
    if "," in s or '"' in s or "\n" in s:
        return '"' + s.replace('"', '""') + '"'
    return s


def read_table(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path, na_values=["NA"], keep_default_na=False, float_precision="round_trip")


def write_table(path: str | Path, df: pd.DataFrame) -> None:
    atomic_write(path, table_to_text(df))
