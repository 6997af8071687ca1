"""Synthetic cohorts: covariates plus planted iliopsoas volumes.

Covariates mimic a middle-aged and older adult imaging cohort: per-sex
height and BMI moments, BMI truncated to plausible ranges, and age spread
over four age bands.  Planted volumes come from a
per-sex linear model whose coefficients are fitted offline by
:mod:`muscleseg.phantom.calibrate` and frozen in ``coefficients.json``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

SEXES = ("female", "male")
HEIGHT_CM = {"female": (162.5, 6.1), "male": (176.2, 6.8)}
# mean, sd, observed min, observed max
BMI = {"female": (26.2, 4.7, 16.1, 55.2), "male": (27.0, 3.9, 17.6, 50.9)}
# inclusive integer bands; a nominal 63-72 band would overlap 54-63, so the last-but-one band is 64-72
AGE_BANDS = ((44, 53), (54, 63), (64, 72), (73, 82))
AGE_MIN, AGE_MAX = 44, 82
P_RIGHT_HANDED = 0.9
ASYMMETRY_MEAN_ML = 6.9  # right minus left

COHORT_COLUMNS = ("id", "sex", "age", "height_cm", "weight_kg", "bmi", "handedness",
                  "true_left_ml", "true_right_ml")

COEFFICIENTS_FILE = Path(__file__).with_name("coefficients.json")


@dataclass(frozen=True)
class SexCoefficients:
    """total = intercept + height*h_cm + bmi_height2*BMI*h_m^2 + age*max(0, age - hinge) + N(0, sigma)."""

    intercept: float
    height: float
    bmi_height2: float
    age: float
    age_hinge: float | None
    sigma: float
    asym_sd: float

    def __post_init__(self):
        if self.sigma < 0 or self.asym_sd < 0:
            raise ValueError("noise scales must be >= 0")

    @property
    def hinge_or_min(self) -> float:
        return AGE_MIN if self.age_hinge is None else self.age_hinge


@lru_cache(maxsize=None)
def _load_frozen(path: str) -> tuple:
    with open(path) as fh:
        blob = json.load(fh)
    return blob["version"], tuple((s, SexCoefficients(**blob["coefficients"][s])) for s in SEXES)


def load_coefficients(path=COEFFICIENTS_FILE) -> dict[str, SexCoefficients]:
    _, pairs = _load_frozen(str(path))
    return dict(pairs)


def coefficients_version(path=COEFFICIENTS_FILE) -> str:
    return _load_frozen(str(path))[0]


@dataclass(frozen=True)
class CohortSpec:
    n: int
    seed: int = 0
    coefficients: dict = field(default_factory=load_coefficients)
    noise_scale: float = 1.0
    asymmetry_mean: float = ASYMMETRY_MEAN_ML

    def __post_init__(self):
        if int(self.n) < 1:
            raise ValueError(f"cohort size must be >= 1, got {self.n}")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if set(self.coefficients) != set(SEXES):
            raise ValueError(f"coefficients needed for {SEXES}")


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    sex: str
    age: int
    height: float
    weight: float
    bmi: float
    handedness: str
    true_left_ml: float
    true_right_ml: float

    def __post_init__(self):
        if self.sex not in SEXES:
            raise ValueError(f"sex must be one of {SEXES}")
        if self.handedness not in ("left", "right"):
            raise ValueError("handedness must be 'left' or 'right'")
        if not AGE_MIN <= self.age <= AGE_MAX:
            raise ValueError(f"age {self.age} outside [{AGE_MIN}, {AGE_MAX}]")
        if self.height <= 0 or self.weight <= 0:
            raise ValueError("height and weight must be positive")
        implied = self.weight / (self.height / 100.0) ** 2
        if not math.isclose(implied, self.bmi, rel_tol=1e-6):
            raise ValueError(f"bmi {self.bmi} inconsistent with weight/height^2 = {implied}")
        if not (self.true_left_ml > 0 and self.true_right_ml > 0):
            raise ValueError("planted volumes must be positive")

    @property
    def total_ml(self) -> float:
        return self.true_left_ml + self.true_right_ml


def subject_id(index: int) -> str:
    return f"S{index + 1:05d}"


def _truncated_normal(rng, mean, sd, lo, hi):
    out = rng.normal(mean, sd)
    bad = (out < lo) | (out > hi)
    while bad.any():
        out[bad] = rng.normal(mean[bad], sd[bad])
        bad = (out < lo) | (out > hi)
    return out


def draw_covariates(rng: np.random.Generator, n: int) -> dict[str, np.ndarray]:
    """Vectorised covariate draw; the order of draws is part of the seeding contract."""
    male = rng.random(n) < 0.5
    sexes = np.where(male, "male", "female")
    band = rng.integers(0, len(AGE_BANDS), size=n)
    lo = np.array([b[0] for b in AGE_BANDS])[band]
    hi = np.array([b[1] for b in AGE_BANDS])[band]
    age = rng.integers(lo, hi + 1)
    h_mu = np.where(male, HEIGHT_CM["male"][0], HEIGHT_CM["female"][0])
    h_sd = np.where(male, HEIGHT_CM["male"][1], HEIGHT_CM["female"][1])
    height = h_mu + h_sd * rng.standard_normal(n)
    b = {k: np.where(male, BMI["male"][i], BMI["female"][i]) for i, k in enumerate(("mu", "sd", "lo", "hi"))}
    bmi = _truncated_normal(rng, b["mu"], b["sd"], b["lo"], b["hi"])
    right_handed = rng.random(n) < P_RIGHT_HANDED
    weight = bmi * (height / 100.0) ** 2
    return {"male": male, "sex": sexes, "age": age, "height": height, "bmi": bmi, "weight": weight,
            "right_handed": right_handed}


def expected_total(male, height, bmi, age, coefficients) -> np.ndarray:
    """Noise-free planted total volume (ml)."""
    male = np.asarray(male, dtype=bool)
    out = np.empty(np.shape(male), dtype=np.float64)
    for sex, mask in (("male", male), ("female", ~male)):
        c = coefficients[sex]
        h = np.asarray(height, dtype=np.float64)[mask]
        w = np.asarray(bmi, dtype=np.float64)[mask] * (h / 100.0) ** 2
        a = np.maximum(0.0, np.asarray(age, dtype=np.float64)[mask] - c.hinge_or_min)
        out[mask] = c.intercept + c.height * h + c.bmi_height2 * w + c.age * a
    return out


def _split(total, delta):
    right = total / 2.0 + delta / 2.0
    left = total / 2.0 - delta / 2.0
    return left, right


def plant_volumes(subject: SubjectRecord, spec: CohortSpec, rng: np.random.Generator | None = None):
    """Draw ``(true_left_ml, true_right_ml)`` for one subject's covariates."""
    c = spec.coefficients[subject.sex]
    total = float(expected_total([subject.sex == "male"], [subject.height], [subject.bmi], [subject.age],
                                 spec.coefficients)[0])
    if rng is None:
        rng = np.random.default_rng([spec.seed, 0x766F6C, int(subject.id.lstrip("S") or 0)])
    eps, z = rng.standard_normal(2)
    total += spec.noise_scale * c.sigma * eps
    delta = spec.asymmetry_mean + spec.noise_scale * c.asym_sd * z
    left, right = _split(total, delta)
    return float(left), float(right)


def sample_cohort(spec: CohortSpec) -> list[SubjectRecord]:
    """Deterministic cohort for ``spec.seed``; volumes use their own random stream."""
    rng = np.random.default_rng(spec.seed)
    cov = draw_covariates(rng, int(spec.n))
    vol_rng = np.random.default_rng([spec.seed, 0x766F6C])
    eps = vol_rng.standard_normal(spec.n)
    z = vol_rng.standard_normal(spec.n)
    sigma = np.array([spec.coefficients[s].sigma for s in cov["sex"]])
    asym_sd = np.array([spec.coefficients[s].asym_sd for s in cov["sex"]])
    total = expected_total(cov["male"], cov["height"], cov["bmi"], cov["age"], spec.coefficients)
    total = total + spec.noise_scale * sigma * eps
    delta = spec.asymmetry_mean + spec.noise_scale * asym_sd * z
    left, right = _split(total, delta)
    return [
        SubjectRecord(
            id=subject_id(i), sex=str(cov["sex"][i]), age=int(cov["age"][i]),
            height=float(cov["height"][i]), weight=float(cov["weight"][i]), bmi=float(cov["bmi"][i]),
            handedness="right" if cov["right_handed"][i] else "left",
            true_left_ml=float(left[i]), true_right_ml=float(right[i]),
        )
        for i in range(spec.n)
    ]


# ------------------------------------------------------------------------ CSV

def _fmt(v: float) -> str:
    return repr(float(v))


def write_cohort_csv(subjects, path, extra_columns: dict | None = None) -> None:
    """Write the cohort table; ``extra_columns`` maps column name -> per-subject values."""
    extra_columns = extra_columns or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(COHORT_COLUMNS) + list(extra_columns))
        for i, s in enumerate(subjects):
            row = [s.id, s.sex, s.age, _fmt(s.height), _fmt(s.weight), _fmt(s.bmi), s.handedness,
                   _fmt(s.true_left_ml), _fmt(s.true_right_ml)]
            row += [_fmt(vals[i]) for vals in extra_columns.values()]
            w.writerow(row)


def subject_from_row(row: dict) -> SubjectRecord:
    return SubjectRecord(
        id=row["id"], sex=row["sex"], age=int(row["age"]), height=float(row["height_cm"]),
        weight=float(row["weight_kg"]), bmi=float(row["bmi"]), handedness=row["handedness"],
        true_left_ml=float(row["true_left_ml"]), true_right_ml=float(row["true_right_ml"]),
    )


def read_cohort_csv(path) -> tuple[list[SubjectRecord], list[dict]]:
    """Subjects plus the raw rows (which may carry extra columns)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [subject_from_row(r) for r in rows], rows
