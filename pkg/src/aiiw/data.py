"""Long-format trial data: ingestion, validation, terminal rows and the
counting-process transform used by every downstream model.

A :class:`TrialFrame` holds one row per assessment with the canonical columns
``id``, ``arm``, ``time``, ``outcome`` followed by any covariates.  Each
subject has a baseline row at time 0.  A missing outcome marks a terminal
("non-event") row that closes the subject's final at-risk interval.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, TextIO

import numpy as np
import pandas as pd

MISSING_TOKENS = ("", "NA")
CORE_COLUMNS = ("id", "arm", "time", "outcome")


class DataValidationError(ValueError):
    """Raised when trial data violate the long-format assumptions."""


@dataclass(frozen=True)
class Schema:
    """Maps the canonical column roles onto the names used in a file."""

    id: str = "id"
    arm: str = "arm"
    time: str = "time"
    outcome: str = "outcome"
    delimiter: str = ","

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, str] | None) -> "Schema":
        if not mapping:
            return cls()
        return cls(**{k: v for k, v in mapping.items() if k in cls.__dataclass_fields__})


def format_number(value: float) -> str:
    """Shortest round-trip decimal; integral values lose the trailing ``.0``."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "NA"
    value = float(value)
    if value.is_integer() and abs(value) < 1e16:
        return str(int(value))
    return repr(value)


def _id_sort_key(ids: Iterable[str]):
    ids = list(ids)
    try:
        numeric = {i: float(i) for i in ids}
    except ValueError:
        return lambda i: (0, i)
    return lambda i: (numeric[i], i)


@dataclass
class TrialFrame:
    """Validated long-format trial records.

    ``records`` is sorted by ``(id, time)``.  ``covariates`` lists the extra
    columns in file order.
    """

    records: pd.DataFrame
    covariates: tuple[str, ...] = ()
    end_time: float | None = None
    max_visits: int | None = None
    _subject_order: tuple[str, ...] = field(default=(), repr=False)

    def __post_init__(self):
        self.records = _canonical_sort(self.records)
        validate(self)
        self._subject_order = tuple(pd.unique(self.records["id"]))

    @property
    def subjects(self) -> tuple[str, ...]:
        return self._subject_order

    @property
    def n_subjects(self) -> int:
        return len(self._subject_order)

    def subject_rows(self) -> dict[str, pd.DataFrame]:
        return {sid: g for sid, g in self.records.groupby("id", sort=False)}

    def event_counts(self) -> pd.Series:
        """Post-baseline non-missing assessments per subject."""
        rec = self.records
        post = rec[(rec["time"] > 0) & rec["outcome"].notna()]
        counts = post.groupby("id", sort=False).size()
        return counts.reindex(list(self.subjects), fill_value=0)

    def has_terminal_rows(self) -> bool:
        return bool(self.records["outcome"].isna().any())

    def arms(self) -> list[str]:
        return sorted(pd.unique(self.records["arm"]).tolist())

    def subset(self, subject_ids: Iterable[str]) -> "TrialFrame":
        keep = set(subject_ids)
        rec = self.records[self.records["id"].isin(keep)].reset_index(drop=True)
        return TrialFrame(rec, self.covariates, self.end_time, self.max_visits)

    def drop_subject(self, subject_id: str) -> "TrialFrame":
        rec = self.records[self.records["id"] != subject_id].reset_index(drop=True)
        return TrialFrame(rec, self.covariates, self.end_time, self.max_visits)


def _canonical_sort(records: pd.DataFrame) -> pd.DataFrame:
    if records.empty:
        return records.reset_index(drop=True)
    ids = pd.unique(records["id"])
    rank = {sid: r for r, sid in enumerate(sorted(ids, key=_id_sort_key(ids)))}
    order = np.lexsort((records["time"].to_numpy(float), records["id"].map(rank).to_numpy()))
    return records.iloc[order].reset_index(drop=True)


def validate(frame: TrialFrame) -> None:
    rec = frame.records
    missing = [c for c in CORE_COLUMNS if c not in rec.columns]
    if missing:
        raise DataValidationError(f"missing required columns: {missing}")
    if rec.empty:
        return
    if rec["time"].isna().any():
        bad = rec[rec["time"].isna()].iloc[0]
        raise DataValidationError(f"subject {bad['id']}: missing assessment time")
    for sid, rows in rec.groupby("id", sort=False):
        times = rows["time"].to_numpy(float)
        outcomes = rows["outcome"].to_numpy(float)
        if np.any(times < 0):
            r = int(np.argmax(times < 0))
            raise DataValidationError(f"subject {sid}, row {r}: negative time {times[r]}")
        if times[0] != 0.0:
            raise DataValidationError(f"subject {sid}: missing baseline row at time 0")
        if np.isnan(outcomes[0]):
            raise DataValidationError(f"subject {sid}, row 0: baseline outcome is missing")
        dup = np.flatnonzero(np.diff(times) == 0)
        if dup.size:
            raise DataValidationError(
                f"subject {sid}, row {dup[0] + 1}: duplicate assessment time {times[dup[0]]}"
            )
        na = np.flatnonzero(np.isnan(outcomes))
        if na.size and (na.size > 1 or na[0] != len(outcomes) - 1):
            raise DataValidationError(
                f"subject {sid}, row {na[0]}: missing outcome on a non-terminal row"
            )
        if len(set(rows["arm"])) != 1:
            raise DataValidationError(f"subject {sid}: rows carry more than one arm label")


def _parse_float(token: str, what: str, line: int) -> float:
    token = token.strip()
    if token in MISSING_TOKENS:
        return float("nan")
    try:
        return float(token)
    except ValueError:
        raise DataValidationError(f"line {line}: cannot parse {what} {token!r}") from None


def ingest_long_table(source: TextIO | str, schema: Schema | Mapping[str, str] | None = None) -> TrialFrame:
    """Read delimited long-format text into a validated :class:`TrialFrame`.

    ``source`` is an open text stream or a string holding the file contents.
    Empty fields and ``NA`` are read as missing.  Covariate columns that parse
    as numbers everywhere are numeric, otherwise categorical strings.
    """
    if not isinstance(schema, Schema):
        schema = Schema.from_mapping(schema)
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.reader(source, delimiter=schema.delimiter)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataValidationError("input has no header row") from None
    roles = {"id": schema.id, "arm": schema.arm, "time": schema.time, "outcome": schema.outcome}
    for role, name in roles.items():
        if name not in header:
            raise DataValidationError(f"header lacks the {role} column {name!r}")
    index = {name: header.index(name) for name in header}
    covariates = tuple(h for h in header if h not in roles.values())

    columns: dict[str, list] = {c: [] for c in CORE_COLUMNS}
    raw_cov: dict[str, list[str]] = {c: [] for c in covariates}
    for line, row in enumerate(reader, start=2):
        if not row or all(not f.strip() for f in row):
            continue
        if len(row) != len(header):
            raise DataValidationError(f"line {line}: expected {len(header)} fields, got {len(row)}")
        columns["id"].append(row[index[schema.id]].strip())
        columns["arm"].append(row[index[schema.arm]].strip())
        columns["time"].append(_parse_float(row[index[schema.time]], "time", line))
        columns["outcome"].append(_parse_float(row[index[schema.outcome]], "outcome", line))
        for c in covariates:
            raw_cov[c].append(row[index[c]].strip())

    data = {
        "id": pd.Series(columns["id"], dtype=object),
        "arm": pd.Series(columns["arm"], dtype=object),
        "time": pd.Series(columns["time"], dtype=float),
        "outcome": pd.Series(columns["outcome"], dtype=float),
    }
    for c in covariates:
        data[c] = _covariate_series(raw_cov[c])
    return TrialFrame(pd.DataFrame(data), covariates)


def _covariate_series(values: list[str]) -> pd.Series:
    try:
        return pd.Series([float("nan") if v in MISSING_TOKENS else float(v) for v in values], dtype=float)
    except ValueError:
        return pd.Series(values, dtype=object)


def emit_long_table(frame: TrialFrame, stream: TextIO | None = None, schema: Schema | None = None) -> str:
    """Write ``frame`` in the same delimited format :func:`ingest_long_table` reads."""
    schema = schema or Schema()
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=schema.delimiter, lineterminator="\n")
    writer.writerow([schema.id, schema.arm, schema.time, schema.outcome, *frame.covariates])
    rec = frame.records
    for r in range(len(rec)):
        row = [rec["id"].iat[r], rec["arm"].iat[r], format_number(rec["time"].iat[r]),
               format_number(rec["outcome"].iat[r])]
        for c in frame.covariates:
            v = rec[c].iat[r]
            row.append(format_number(v) if isinstance(v, (float, np.floating)) else str(v))
        writer.writerow(row)
    text = buf.getvalue()
    if stream is not None:
        stream.write(text)
    return text


def infer_max_visits(*frames: TrialFrame) -> int:
    counts = [int(f.event_counts().max()) for f in frames if f.n_subjects]
    if not counts or max(counts) == 0:
        raise DataValidationError("no post-baseline assessments; cannot infer max_visits")
    return max(counts)


def add_terminal_observations(frame: TrialFrame, end_time: float, max_visits: int | None = None) -> TrialFrame:
    """Append one non-event row at ``end_time`` for every subject with fewer
    than ``max_visits`` post-baseline assessments.

    Subjects who reached ``max_visits`` leave the risk set at their last
    visit and are unchanged.
    """
    if frame.has_terminal_rows():
        raise DataValidationError(
            "frame already contains missing outcomes (explicit terminal rows); "
            "do not add terminal observations"
        )
    if max_visits is None:
        max_visits = infer_max_visits(frame)
    rec = frame.records
    if len(rec) and float(rec["time"].max()) >= end_time:
        late = rec.loc[rec["time"].idxmax()]
        raise DataValidationError(
            f"end_time {end_time} must exceed every observed time "
            f"(subject {late['id']} observed at {late['time']})"
        )
    counts = frame.event_counts()
    if len(counts) and int(counts.max()) > max_visits:
        raise DataValidationError(
            f"max_visits={max_visits} is below the observed maximum {int(counts.max())}"
        )
    last_rows = rec.groupby("id", sort=False).tail(1)
    extra = last_rows[last_rows["id"].map(counts) < max_visits].copy()
    extra["time"] = float(end_time)
    extra["outcome"] = float("nan")
    out = pd.concat([rec, extra], ignore_index=True)
    return TrialFrame(out, frame.covariates, float(end_time), int(max_visits))


def derive_counting_process(frame: TrialFrame) -> pd.DataFrame:
    """One record per post-baseline row with the lagged variables.

    Columns: ``id, visit_number, time, outcome, prev_outcome, prev_time,
    delta_time, event`` followed by the covariates of the current row.
    """
    rec = frame.records
    cols = ["id", "visit_number", "time", "outcome", "prev_outcome", "prev_time", "delta_time", "event"]
    if rec.empty:
        return pd.DataFrame({c: [] for c in cols + list(frame.covariates)})
    grouped = rec.groupby("id", sort=False)
    prev_outcome = grouped["outcome"].shift(1)
    prev_time = grouped["time"].shift(1)
    visit = grouped.cumcount()
    post = visit > 0
    out = pd.DataFrame({
        "id": rec["id"][post].to_numpy(),
        "visit_number": visit[post].to_numpy(int),
        "time": rec["time"][post].to_numpy(float),
        "outcome": rec["outcome"][post].to_numpy(float),
        "prev_outcome": prev_outcome[post].to_numpy(float),
        "prev_time": prev_time[post].to_numpy(float),
    })
    out["delta_time"] = out["time"] - out["prev_time"]
    out["event"] = out["outcome"].notna().to_numpy()
    for c in frame.covariates:
        out[c] = rec[c][post].to_numpy()
    return out


def split_by_arm(frame: TrialFrame, treatment_label) -> tuple[TrialFrame, TrialFrame]:
    """Return ``(treatment, control)`` frames."""
    labels = frame.arms()
    treatment_label = str(treatment_label)
    if treatment_label not in labels:
        raise DataValidationError(f"treatment label {treatment_label!r} not present; arms are {labels}")
    if len(labels) < 2:
        raise DataValidationError("second arm empty: all subjects share one arm label")
    if len(labels) > 2:
        raise DataValidationError(f"expected exactly two arm labels, found {labels}")
    rec = frame.records
    is_trt = rec["arm"] == treatment_label
    make = lambda mask: TrialFrame(rec[mask].reset_index(drop=True), frame.covariates,
                                   frame.end_time, frame.max_visits)
    return make(is_trt), make(~is_trt)


def relabel(frame: TrialFrame, mapping: Mapping[str, str]) -> TrialFrame:
    """Rename subject ids; used to check that estimates ignore labels."""
    rec = frame.records.copy()
    rec["id"] = rec["id"].map(lambda i: mapping.get(i, i))
    return replace(frame, records=rec)
