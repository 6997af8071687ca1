"""Cohort rows, grouped summary tables and their CSV/JSON serialisation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tests import (DegenerateInputError, TestResult, format_p, imi, pearson_test, t_test_one_sample,
                    t_test_two_sample)

VARIABLES = ("total_ml", "average_ml", "left_ml", "right_ml", "lr_diff_ml", "imi")
CORRELATIONS = (("total_ml", "height_cm"), ("imi", "bmi"), ("imi", "age"))
NA = "NA"


@dataclass(frozen=True)
class CohortRow:
    id: str
    sex: str
    age: float
    height_cm: float
    weight_kg: float
    bmi: float
    handedness: str
    left_ml: float
    right_ml: float

    @property
    def total_ml(self) -> float:
        return self.left_ml + self.right_ml

    @property
    def average_ml(self) -> float:
        return self.total_ml / 2.0

    @property
    def lr_diff_ml(self) -> float:
        return self.left_ml - self.right_ml

    @property
    def imi(self) -> float:
        return imi(self.total_ml, self.height_cm)


def rows_from_subjects(subjects, left=None, right=None) -> list[CohortRow]:
    """Rows using planted volumes, or the measured ``left``/``right`` sequences if given."""
    left = [s.true_left_ml for s in subjects] if left is None else list(left)
    right = [s.true_right_ml for s in subjects] if right is None else list(right)
    return [CohortRow(s.id, s.sex, s.age, s.height, s.weight, s.bmi, s.handedness, float(l), float(r))
            for s, l, r in zip(subjects, left, right)]


def column(rows, name: str) -> np.ndarray:
    return np.array([getattr(r, name) for r in rows], dtype=np.float64)


@dataclass
class StatsReport:
    summary: list = field(default_factory=list)
    correlations: list = field(default_factory=list)
    tests: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def find(self, table: str, **match) -> dict:
        for row in getattr(self, table):
            if all(row.get(k) == v for k, v in match.items()):
                return row
        raise KeyError(f"{table}: no row matching {match}")


def _num(v):
    return NA if v is None or (isinstance(v, float) and math.isnan(v)) else v


def _test_row(result: TestResult | None, **keys) -> dict:
    if result is None:
        return {**keys, "statistic": None, "df": None, "p": None, "p_text": NA, "estimate": None}
    return {**keys, "statistic": result.statistic, "df": result.df, "p": result.p,
            "p_text": format_p(result.p), "estimate": result.estimate}


def _safe(fn, *args):
    try:
        return fn(*args)
    except (DegenerateInputError, ValueError):
        return None


def cohort_summary(rows, group_by: str = "sex") -> StatsReport:
    rows = list(rows)
    if not rows:
        raise ValueError("no rows")
    groups = sorted({getattr(r, group_by) for r in rows})
    by = {g: [r for r in rows if getattr(r, group_by) == g] for g in groups}
    rep = StatsReport()
    for g in groups:
        for var in VARIABLES:
            v = column(by[g], var)
            rep.summary.append({"group": g, "variable": var, "n": v.size, "mean": float(v.mean()),
                                "sd": float(v.std(ddof=1)) if v.size > 1 else None,
                                "min": float(v.min()), "max": float(v.max())})
        for yname, xname in CORRELATIONS:
            res = _safe(pearson_test, column(by[g], xname), column(by[g], yname)) if len(by[g]) >= 3 else None
            rep.correlations.append({"group": g, "x": xname, "y": yname, "n": len(by[g]),
                                     "r": None if res is None else res.estimate,
                                     "p": None if res is None else res.p,
                                     "p_text": NA if res is None else format_p(res.p)})
        d = column(by[g], "lr_diff_ml")
        rep.tests.append(_test_row(_safe(t_test_one_sample, d) if d.size >= 2 else None,
                                   test="one_sample", variable="lr_diff_ml", groups=g))
        hand = {h: column([r for r in by[g] if r.handedness == h], "lr_diff_ml") for h in ("left", "right")}
        ok = all(v.size >= 2 for v in hand.values())
        rep.tests.append(_test_row(_safe(t_test_two_sample, hand["left"], hand["right"]) if ok else None,
                                   test="welch_handedness", variable="lr_diff_ml", groups=f"{g}:left-right"))
    if len(groups) == 2:
        a, b = groups[1], groups[0]
        for var in VARIABLES:
            va, vb = column(by[a], var), column(by[b], var)
            ok = va.size >= 2 and vb.size >= 2
            rep.tests.append(_test_row(_safe(t_test_two_sample, va, vb) if ok else None,
                                       test="welch", variable=var, groups=f"{a}-{b}"))
    return rep


def _fmt(v) -> str:
    v = _num(v)
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


def _write_table(path: Path, table: list, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in table:
            w.writerow([_fmt(row.get(c)) for c in columns])


SUMMARY_COLUMNS = ("group", "variable", "n", "mean", "sd", "min", "max")
CORRELATION_COLUMNS = ("group", "x", "y", "n", "r", "p", "p_text")
TEST_COLUMNS = ("test", "variable", "groups", "statistic", "df", "p", "p_text", "estimate")


def write_report(report: StatsReport, outdir) -> dict:
    """Write summary/correlations/tests CSVs plus ``index.json``; returns the index."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"summary": "summary.csv", "correlations": "correlations.csv", "tests": "tests.csv"}
    _write_table(out / files["summary"], report.summary, SUMMARY_COLUMNS)
    _write_table(out / files["correlations"], report.correlations, CORRELATION_COLUMNS)
    _write_table(out / files["tests"], report.tests, TEST_COLUMNS)
    index = {"tables": files, "imi_units": "ml/m^2", **report.extras}
    with open(out / "index.json", "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True, default=_fmt)
        fh.write("\n")
    return index
