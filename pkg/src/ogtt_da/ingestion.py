"""Cohort CSV parsing and OGTT inclusion rules.

Input is long format, one measurement per row::

    patient_id,test_date,assay,timepoint_min,value,unit

``assay`` is glucose, insulin or hba1c; dates are ISO-8601; units are
mg/dL or mmol/L (glucose, converted at 18.016 mg/dL per mmol/L), uU/mL
(insulin) and percent (hba1c, no timepoint).
"""
from __future__ import annotations

import csv
import datetime as dt
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .estimator import Observation

HEADER = ("patient_id", "test_date", "assay", "timepoint_min", "value", "unit")
CANONICAL_TIMEPOINTS = (0, 30, 60, 90, 120, 180, 240, 300, 360)
DEFAULT_PATTERNS = ((0, 30, 120), (0, 60, 120))
MMOL_TO_MGDL = 18.016
UNITS = {"glucose": ("mg/dL", "mmol/L"), "insulin": ("uU/mL",), "hba1c": ("percent",)}

RULE_NON_OGTT = "non_ogtt_pattern"
RULE_REPEATED = "repeated_measurements"
RULE_MISSING = "missing_glucose"
RULE_FEW = "fewer_than_two_ogtts"
RULES = (RULE_NON_OGTT, RULE_REPEATED, RULE_MISSING, RULE_FEW)


class SchemaViolation(ValueError):
    pass


@dataclass(frozen=True)
class HbA1c:
    patient_id: str
    date: dt.date
    value: float


@dataclass(frozen=True)
class OgttRecord:
    """One OGTT. Timepoints are minutes after the dose (0 = fasting).

    ``missing_glucose`` and ``repeated`` carry parse-time defects that the
    inclusion rules act on; a cleaned record has both empty.
    """

    patient_id: str
    test_date: dt.date
    glucose: dict
    insulin: dict = field(default_factory=dict)
    hba1c: float | None = None
    hba1c_date: dt.date | None = None
    missing_glucose: frozenset = frozenset()
    repeated: frozenset = frozenset()

    __hash__ = None

    @property
    def key(self) -> tuple:
        return (self.patient_id, self.test_date)

    @property
    def timepoints(self) -> tuple:
        return tuple(sorted(set(self.glucose) | set(self.missing_glucose)))

    @property
    def has_insulin(self) -> bool:
        return bool(self.insulin)

    def observation(self) -> Observation:
        return Observation.from_maps(self.glucose, self.insulin)


@dataclass(frozen=True)
class Diagnostic:
    line: int
    severity: str  # "error" or "warning"
    message: str


@dataclass
class ParseResult:
    records: list
    hba1c: list
    diagnostics: list

    @property
    def warnings(self) -> list:
        return [d for d in self.diagnostics if d.severity == "warning"]

    @property
    def errors(self) -> list:
        return [d for d in self.diagnostics if d.severity == "error"]


def _open_text(source):
    if isinstance(source, (str, Path)):
        try:
            return io.StringIO(Path(source).read_text(encoding="utf-8"))
        except UnicodeDecodeError as exc:
            raise SchemaViolation(f"{source}: not UTF-8 ({exc})") from exc
    return source


def parse_cohort(source) -> ParseResult:
    """Parse a cohort CSV (path or text stream).

    Every data row either contributes to a record or produces a diagnostic
    naming its line. Only a bad header is fatal (SchemaViolation).
    """
    fh = _open_text(source)
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaViolation("empty file, expected a header row") from None
    header = [h.strip().lstrip("﻿") for h in header]
    if tuple(header) != HEADER:
        raise SchemaViolation(f"header must be {','.join(HEADER)}, got {','.join(header)}")

    diags: list[Diagnostic] = []
    glucose = defaultdict(dict)
    insulin = defaultdict(dict)
    insulin_lines = defaultdict(dict)
    missing = defaultdict(set)
    repeated = defaultdict(set)
    seen = {}
    hba1c = {}

    def err(line, msg):
        diags.append(Diagnostic(line, "error", msg))

    def warn(line, msg):
        diags.append(Diagnostic(line, "warning", msg))

    for row in reader:
        line = reader.line_num
        if not any(c.strip() for c in row):
            continue
        if len(row) != len(HEADER):
            err(line, f"expected {len(HEADER)} fields, got {len(row)}")
            continue
        pid, date_s, assay, tp_s, value_s, unit = (c.strip() for c in row)
        if not pid:
            err(line, "empty patient_id")
            continue
        try:
            date = dt.date.fromisoformat(date_s)
        except ValueError:
            err(line, f"bad test_date {date_s!r}")
            continue
        if assay not in UNITS:
            err(line, f"unknown assay {assay!r}")
            continue
        if unit not in UNITS[assay]:
            err(line, f"unit {unit!r} not allowed for {assay}")
            continue
        key = (pid, date)

        if assay == "hba1c":
            if tp_s:
                warn(line, "timepoint ignored for hba1c")
            try:
                v = float(value_s)
            except ValueError:
                err(line, f"bad hba1c value {value_s!r}")
                continue
            if not 0 < v < 20:
                err(line, f"implausible hba1c {v!r}")
                continue
            if key in hba1c:
                err(line, "repeated hba1c for this patient and date; first value kept")
                continue
            hba1c[key] = v
            continue

        try:
            tp = int(tp_s)
            if tp < 0 or str(tp) != tp_s.lstrip("+"):
                raise ValueError
        except ValueError:
            err(line, f"bad timepoint_min {tp_s!r}")
            continue
        dup_key = (pid, date, assay, tp)
        if dup_key in seen:
            err(line, f"repeated {assay} measurement at {tp} min (first at line {seen[dup_key]})")
            if assay == "glucose":
                repeated[key].add(tp)
            continue
        seen[dup_key] = line

        if not value_s:
            warn(line, f"missing {assay} value at {tp} min")
            if assay == "glucose":
                missing[key].add(tp)
            continue
        try:
            v = float(value_s)
        except ValueError:
            err(line, f"bad {assay} value {value_s!r}")
            if assay == "glucose":
                missing[key].add(tp)
            continue
        if assay == "glucose":
            if unit == "mmol/L":
                v *= MMOL_TO_MGDL
                warn(line, f"converted {value_s} mmol/L to {v!r} mg/dL")
            if not 0 < v < 1000:
                err(line, f"glucose {v!r} mg/dL outside (0, 1000)")
                missing[key].add(tp)
                continue
            glucose[key][tp] = v
        else:
            if not (math.isfinite(v) and v >= 0):
                err(line, f"insulin {v!r} is not a finite non-negative value")
                continue
            insulin[key][tp] = v
            insulin_lines[key][tp] = line

    records = []
    for key in sorted(set(glucose) | set(missing) | set(insulin)):
        if not glucose.get(key) and not missing.get(key):
            for tp, line in sorted(insulin_lines[key].items()):
                warn(line, "insulin without any glucose on this date; dropped")
            continue
        times = set(glucose[key]) | missing[key]
        ins = {}
        for tp, v in insulin[key].items():
            if tp in times:
                ins[tp] = v
            else:
                warn(insulin_lines[key][tp], f"insulin at {tp} min has no glucose at that time; dropped")
        hb = hba1c.get(key)
        records.append(OgttRecord(
            patient_id=key[0], test_date=key[1],
            glucose=dict(sorted(glucose[key].items())), insulin=dict(sorted(ins.items())),
            hba1c=hb, hba1c_date=key[1] if hb is not None else None,
            missing_glucose=frozenset(missing[key]), repeated=frozenset(repeated[key])))
    hb_list = [HbA1c(pid, d, v) for (pid, d), v in sorted(hba1c.items())]
    diags.sort(key=lambda d: d.line)
    return ParseResult(records, hb_list, diags)


@dataclass
class CohortFilterReport:
    input_tests: int
    input_patients: int
    dropped: dict                 # rule -> number of tests
    dropped_patients: int
    retained_tests: int
    retained_patients: int
    outcomes: list                # (patient_id, test_date ISO, rule or "retained")

    def to_dict(self) -> dict:
        return {
            "input_tests": self.input_tests,
            "input_patients": self.input_patients,
            "dropped_tests": dict(self.dropped),
            "dropped_patients": self.dropped_patients,
            "retained_tests": self.retained_tests,
            "retained_patients": self.retained_patients,
            "outcomes": [list(o) for o in self.outcomes],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def failed_rule(record: OgttRecord, patterns=DEFAULT_PATTERNS) -> str | None:
    """First inclusion rule a single test fails, or None."""
    if any(t not in CANONICAL_TIMEPOINTS for t in record.timepoints):
        return RULE_NON_OGTT
    if record.repeated:
        return RULE_REPEATED
    if record.missing_glucose:
        return RULE_MISSING
    have = set(record.glucose)
    if not any(set(p) <= have for p in patterns):
        return RULE_MISSING
    return None


def apply_inclusion_rules(records, patterns=DEFAULT_PATTERNS, min_tests: int = 2):
    """Drop tests failing the per-test rules, then patients left with fewer
    than ``min_tests`` OGTTs. Missing insulin never drops a test."""
    records = sorted(records, key=lambda r: r.key)
    outcome = {}
    kept = defaultdict(list)
    for r in records:
        rule = failed_rule(r, patterns)
        outcome[r.key] = rule
        if rule is None:
            kept[r.patient_id].append(r)
    retained = []
    for pid, tests in kept.items():
        if len(tests) < min_tests:
            for r in tests:
                outcome[r.key] = RULE_FEW
        else:
            retained.extend(tests)
    retained.sort(key=lambda r: r.key)
    dropped = {rule: 0 for rule in RULES}
    for rule in outcome.values():
        if rule is not None:
            dropped[rule] += 1
    patients = {r.patient_id for r in records}
    kept_patients = {r.patient_id for r in retained}
    report = CohortFilterReport(
        input_tests=len(records), input_patients=len(patients), dropped=dropped,
        dropped_patients=len(patients) - len(kept_patients),
        retained_tests=len(retained), retained_patients=len(kept_patients),
        outcomes=[(k[0], k[1].isoformat(), v or "retained") for k, v in sorted(outcome.items())])
    return retained, report


def _fmt(v: float) -> str:
    return repr(float(v))


def cohort_rows(records, hba1c=()):
    rows = []
    for r in sorted(records, key=lambda r: r.key):
        d = r.test_date.isoformat()
        for tp in r.timepoints:
            v = _fmt(r.glucose[tp]) if tp in r.glucose else ""
            rows.append((r.patient_id, d, "glucose", str(tp), v, "mg/dL"))
        for tp, v in r.insulin.items():
            rows.append((r.patient_id, d, "insulin", str(tp), _fmt(v), "uU/mL"))
    for h in hba1c:
        rows.append((h.patient_id, h.date.isoformat(), "hba1c", "", _fmt(h.value), "percent"))
    order = {"glucose": 0, "insulin": 1, "hba1c": 2}
    rows.sort(key=lambda row: (row[0], row[1], order[row[2]], int(row[3] or 0)))
    return rows


def write_cohort(records, path, hba1c=()) -> None:
    """Write records in the input schema (mg/dL, uU/mL, percent)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        w.writerows(cohort_rows(records, hba1c))

