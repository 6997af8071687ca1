"""Pearson correlation, Welch and one-sample t-tests, Bland-Altman agreement."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

P_FLOOR = 1e-15


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class TestResult:
    statistic: float
    df: float
    p: float
    estimate: float

    def __post_init__(self):
        for name in ("statistic", "df", "p", "estimate"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p-value {self.p} outside [0, 1]")


@dataclass(frozen=True)
class BlandAltmanResult:
    bias: float
    sd_diff: float
    loa_low: float
    loa_high: float
    means: tuple
    diffs: tuple

    @property
    def n(self) -> int:
        return len(self.diffs)


def t_sf_two_sided(t: float, df: float) -> float:
    """Two-sided Student-t tail probability ``P(|T| >= |t|)``."""
    if math.isnan(t):
        raise DegenerateInputError("t statistic is NaN")
    if math.isinf(t):
        return 0.0
    return float(min(1.0, max(0.0, betainc(0.5 * df, 0.5, df / (df + t * t)))))


def format_p(p: float) -> str:
    return f"<{P_FLOOR:.0e}" if p < P_FLOOR else f"{p:.4g}"


def _vec(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).ravel()
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def imi(total_ml, height_cm):
    """Iliopsoas muscle index, ml per m^2 of squared height."""
    h = np.asarray(height_cm, dtype=np.float64)
    if np.any(h <= 0):
        raise ValueError("height must be positive")
    out = np.asarray(total_ml, dtype=np.float64) / (h / 100.0) ** 2
    return float(out) if out.ndim == 0 else out


def pearson_test(x, y) -> TestResult:
    x, y = _vec(x, "x"), _vec(y, "y")
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    n = x.size
    if n < 3:
        raise ValueError("need at least 3 pairs")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInputError("zero variance input")
    r = float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))
    df = n - 2
    if abs(r) == 1.0:
        return TestResult(math.copysign(math.inf, r), df, 0.0, r)
    t = r * math.sqrt(df / (1.0 - r * r))
    return TestResult(t, df, t_sf_two_sided(t, df), r)


def _t_from(diff: float, se: float, df: float, what: str) -> TestResult:
    if se == 0.0:
        if diff == 0.0:
            raise DegenerateInputError(f"{what}: zero variance and zero difference")
        return TestResult(math.copysign(math.inf, diff), df, 0.0, diff)
    t = diff / se
    return TestResult(t, df, t_sf_two_sided(t, df), diff)


def t_test_two_sample(a, b) -> TestResult:
    """Welch test of equal means; ``estimate`` is mean(a) - mean(b)."""
    a, b = _vec(a, "a"), _vec(b, "b")
    if a.size < 2 or b.size < 2:
        raise ValueError("each group needs at least 2 values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    se2 = va + vb
    df = se2 * se2 / (va * va / (a.size - 1) + vb * vb / (b.size - 1)) if se2 > 0 else float(a.size + b.size - 2)
    return _t_from(float(a.mean() - b.mean()), math.sqrt(se2), df, "two-sample t-test")


def t_test_one_sample(d, mu0: float = 0.0) -> TestResult:
    """One-sample test of mean(d) == mu0; paired tests pass the differences."""
    d = _vec(d, "d")
    if d.size < 2:
        raise ValueError("need at least 2 values")
    se = math.sqrt(d.var(ddof=1) / d.size)
    return _t_from(float(d.mean() - mu0), se, d.size - 1, "one-sample t-test")


def bland_altman(manual_ml, auto_ml) -> BlandAltmanResult:
    """Agreement of ``auto`` against ``manual``: bias and bias +/- 1.96 SD of the differences."""
    m, a = _vec(manual_ml, "manual"), _vec(auto_ml, "auto")
    if m.size != a.size:
        raise ValueError(f"length mismatch: {m.size} vs {a.size}")
    if m.size < 2:
        raise ValueError("need at least 2 pairs")
    diffs = a - m
    bias = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    return BlandAltmanResult(bias, sd, bias - 1.96 * sd, bias + 1.96 * sd,
                             tuple(float(v) for v in (a + m) / 2.0), tuple(float(v) for v in diffs))
