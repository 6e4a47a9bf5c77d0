"""Two-arm censored survival data with a landmark surrogate measurement."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import (
    EmptyArm,
    MalformedRow,
    NonPositiveTime,
    StudyDataError,
    SurrogateObservabilityViolation,
)

__all__ = [
    "SubjectRecord",
    "Arm",
    "StudyData",
    "DEFAULT_SCHEMA",
    "load_study",
    "write_study",
    "summarize",
]

_NA_TOKENS = {"", "na", "nan"}

DEFAULT_SCHEMA = {
    "group": "group",
    "time": "time",
    "event": "event",
    "surrogate": "s",
}


@dataclass(frozen=True)
class SubjectRecord:
    group: str
    time: float
    event: bool
    surrogate: float | None = None
    covariates: tuple[float, ...] = ()


@dataclass(frozen=True, eq=False)
class Arm:
    """Column-oriented view of one treatment arm.

    ``surrogate`` holds NaN for subjects not under observation at the
    landmark. ``covariates`` has shape ``(n, p)``, possibly with ``p == 0``.
    """

    time: np.ndarray
    event: np.ndarray
    surrogate: np.ndarray
    covariates: np.ndarray

    def __post_init__(self):
        for name in ("time", "event", "surrogate", "covariates"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    @classmethod
    def from_arrays(cls, time, event, surrogate, covariates=None):
        time = np.asarray(time, dtype=float).copy()
        event = np.asarray(event, dtype=bool).copy()
        surrogate = np.asarray(surrogate, dtype=float).copy()
        n = time.shape[0]
        if covariates is None:
            covariates = np.empty((n, 0))
        covariates = np.asarray(covariates, dtype=float).reshape(n, -1).copy()
        if not (event.shape[0] == surrogate.shape[0] == covariates.shape[0] == n):
            raise StudyDataError("arm columns have unequal lengths")
        return cls(time, event, surrogate, covariates)

    @property
    def n(self) -> int:
        return int(self.time.shape[0])

    def at_risk(self, t0: float) -> np.ndarray:
        """Boolean mask of subjects still under observation at ``t0``."""
        return self.time > t0

    def records(self, group: str) -> list[SubjectRecord]:
        out = []
        for x, d, s, z in zip(self.time, self.event, self.surrogate, self.covariates):
            out.append(
                SubjectRecord(
                    group=group,
                    time=float(x),
                    event=bool(d),
                    surrogate=None if np.isnan(s) else float(s),
                    covariates=tuple(float(v) for v in z),
                )
            )
        return out


@dataclass(frozen=True, eq=False)
class StudyData:
    """Validated two-arm study with landmark time ``t0`` and horizon ``t``."""

    arm_a: Arm
    arm_b: Arm
    t0: float
    t: float
    covariate_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        validate(self)

    @classmethod
    def from_records(cls, records: Iterable[SubjectRecord], t0, t, covariate_names=(), labels=("A", "B")):
        groups = {labels[0]: [], labels[1]: []}
        for rec in records:
            if rec.group not in groups:
                raise StudyDataError(f"unknown group label {rec.group!r}")
            groups[rec.group].append(rec)
        arms = []
        for label in labels:
            recs = groups[label]
            arms.append(
                Arm.from_arrays(
                    [r.time for r in recs],
                    [r.event for r in recs],
                    [np.nan if r.surrogate is None else r.surrogate for r in recs],
                    [r.covariates for r in recs] if recs else np.empty((0, len(covariate_names))),
                )
            )
        return cls(arms[0], arms[1], float(t0), float(t), tuple(covariate_names))

    @property
    def n_covariates(self) -> int:
        return int(self.arm_a.covariates.shape[1])

    def arms(self):
        return (("A", self.arm_a), ("B", self.arm_b))

    def with_surrogate(self, fn) -> "StudyData":
        """Return a copy with ``fn`` applied to every observed surrogate."""
        arms = []
        for _, arm in self.arms():
            arms.append(Arm.from_arrays(arm.time, arm.event, fn(arm.surrogate), arm.covariates))
        return StudyData(arms[0], arms[1], self.t0, self.t, self.covariate_names)

    def covariate_columns(self, names: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        missing = [c for c in names if c not in self.covariate_names]
        if missing:
            raise StudyDataError(f"augmentation covariates not present in data: {missing}")
        idx = [self.covariate_names.index(c) for c in names]
        return self.arm_a.covariates[:, idx], self.arm_b.covariates[:, idx]


def validate(data: StudyData) -> None:
    if not (math.isfinite(data.t0) and data.t0 > 0):
        raise StudyDataError("t0 must be a positive real")
    if not data.t > data.t0:
        raise StudyDataError(f"horizon t={data.t} must exceed landmark t0={data.t0}")
    p = data.arm_a.covariates.shape[1]
    if data.arm_b.covariates.shape[1] != p:
        raise StudyDataError("arms have different covariate dimensions")
    if data.covariate_names and len(data.covariate_names) != p:
        raise StudyDataError("covariate names do not match covariate dimension")
    for label, arm in data.arms():
        if arm.n < 2:
            raise EmptyArm(f"arm {label} has {arm.n} subjects; at least 2 are required")
        if not np.all(np.isfinite(arm.time)) or np.any(arm.time <= 0):
            raise NonPositiveTime(f"arm {label}: follow-up times must be positive (X > 0)")
        observed = ~np.isnan(arm.surrogate)
        at_risk = arm.time > data.t0
        bad = observed != at_risk
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            what = "present with X <= t0" if observed[i] else "absent with X > t0"
            raise SurrogateObservabilityViolation(
                f"arm {label}, subject {i}: surrogate {what} (S must be observed iff X > t0)"
            )
        if np.any(arm.surrogate[observed] <= 0):
            raise StudyDataError(
                f"arm {label}: surrogate values must be positive (use exp_surrogate for real-valued markers)"
            )
        if not observed.any():
            raise EmptyArm(f"arm {label}: no subject under observation at t0 with a surrogate value")


def _parse_float(value: str, line: int, column: str) -> float:
    try:
        out = float(value)
    except ValueError:
        raise MalformedRow(f"line {line}: column {column!r} is not numeric: {value!r}") from None
    if math.isnan(out):
        raise MalformedRow(f"line {line}: column {column!r} is missing")
    return out


def _is_na(value: str) -> bool:
    return value.strip().lower() in _NA_TOKENS


def load_study(
    source: str | os.PathLike | TextIO,
    t0: float,
    t: float,
    schema: dict | None = None,
    covariates: Sequence[str] | None = None,
    labels: tuple[str, str] = ("A", "B"),
    exp_surrogate: bool = False,
) -> StudyData:
    """Read a two-arm study from CSV text.

    Parameters
    ----------
    source : path or text stream
        CSV with a header row.
    t0, t : float
        Landmark time and horizon.
    schema : dict, optional
        Maps the logical names ``group``, ``time``, ``event``, ``surrogate``
        to CSV column names. Missing keys fall back to :data:`DEFAULT_SCHEMA`.
    covariates : sequence of str, optional
        Covariate columns to keep. By default every column not named in the
        schema is read as a covariate.
    labels : (str, str)
        Group values identifying arm A and arm B.
    exp_surrogate : bool
        Exponentiate surrogate values on ingestion.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    if isinstance(source, (str, os.PathLike)):
        with open(source, newline="") as fh:
            return load_study(fh, t0, t, schema, covariates, labels, exp_surrogate)

    reader = csv.DictReader(source)
    header = [h.strip() for h in (reader.fieldnames or [])]
    reader.fieldnames = header
    for key in ("group", "time", "event", "surrogate"):
        if schema[key] not in header:
            raise MalformedRow(f"missing required column {schema[key]!r}")
    if covariates is None:
        used = {schema[k] for k in ("group", "time", "event", "surrogate")}
        covariates = [h for h in header if h not in used]
    else:
        covariates = list(covariates)
        absent = [c for c in covariates if c not in header]
        if absent:
            raise MalformedRow(f"covariate columns not in header: {absent}")

    records = []
    for line, row in enumerate(reader, start=2):
        group = (row[schema["group"]] or "").strip()
        if group not in labels:
            raise MalformedRow(f"line {line}: group {group!r} is not one of {labels}")
        time = _parse_float(row[schema["time"]], line, schema["time"])
        raw_event = (row[schema["event"]] or "").strip()
        if raw_event not in ("0", "1", "0.0", "1.0"):
            raise MalformedRow(f"line {line}: event must be 0 or 1, got {raw_event!r}")
        raw_s = row[schema["surrogate"]] or ""
        if _is_na(raw_s):
            s = None
        else:
            s = _parse_float(raw_s, line, schema["surrogate"])
            if exp_surrogate:
                s = math.exp(s)
        if time <= 0:
            raise NonPositiveTime(f"line {line}: follow-up time must be positive, got {time}")
        if (s is not None) != (time > t0):
            what = "present with X <= t0" if s is not None else "absent with X > t0"
            raise SurrogateObservabilityViolation(
                f"line {line}: surrogate {what} (S must be observed iff X > t0)"
            )
        z = tuple(_parse_float(row[c], line, c) for c in covariates)
        records.append(SubjectRecord(group, time, float(raw_event) == 1.0, s, z))

    for label in labels:
        if not any(r.group == label for r in records):
            raise EmptyArm(f"no rows for group {label!r}")
    return StudyData.from_records(records, t0, t, tuple(covariates), labels)


def write_study(data: StudyData, dest: str | os.PathLike | TextIO | None = None, labels=("A", "B")) -> str | None:
    """Write ``data`` as CSV in the default schema.

    Returns the CSV text when ``dest`` is None.
    """
    if dest is None:
        buf = io.StringIO()
        write_study(data, buf, labels)
        return buf.getvalue()
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", newline="") as fh:
            write_study(data, fh, labels)
        return None
    writer = csv.writer(dest, lineterminator="\n")
    writer.writerow(["group", "time", "event", "s", *data.covariate_names])
    for label, (_, arm) in zip(labels, data.arms()):
        for x, d, s, z in zip(arm.time, arm.event, arm.surrogate, arm.covariates):
            writer.writerow([label, repr(float(x)), int(d), "NA" if np.isnan(s) else repr(float(s)), *map(repr, z.tolist())])
    return None


def summarize(data: StudyData) -> dict:
    """Per-arm counts used in reports."""
    out = {"t0": data.t0, "t": data.t, "covariate_dimension": data.n_covariates, "arms": {}}
    for label, arm in data.arms():
        out["arms"][label] = {
            "n": arm.n,
            "events_before_t0": int(np.sum(arm.event & (arm.time <= data.t0))),
            "censored_before_t": int(np.sum(~arm.event & (arm.time <= data.t))),
            "surrogate_observed": int(np.sum(~np.isnan(arm.surrogate))),
            "events_in_window": int(np.sum(arm.event & (arm.time > data.t0) & (arm.time <= data.t))),
        }
    return out
