"""Single-predictor penalised cubic regression spline with GCV smoothing choice."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

LAMBDA_GRID = np.logspace(-6, 6, 25)
DEGREE = 3


@dataclass(frozen=True)
class GamFit:
    knots: np.ndarray  # distinct knot locations (boundary included)
    coef: np.ndarray
    lam: float
    gcv: float
    edf: float

    @property
    def spline(self) -> BSpline:
        t = np.r_[[self.knots[0]] * DEGREE, self.knots, [self.knots[-1]] * DEGREE]
        return BSpline(t, self.coef, DEGREE, extrapolate=True)

    def __call__(self, x) -> np.ndarray:
        return self.spline(np.asarray(x, dtype=np.float64))


def _penalty(t: np.ndarray, nb: int) -> np.ndarray:
    """Second divided differences of the coefficients over the Greville abscissae.

    Coefficients sampled from a straight line at the Greville points give that
    line exactly, so the penalty's null space is precisely the linear functions.
    """
    g = np.array([t[i + 1:i + 1 + DEGREE].mean() for i in range(nb)])
    d = np.zeros((nb - 2, nb))
    for i in range(nb - 2):
        h0, h1 = g[i + 1] - g[i], g[i + 2] - g[i + 1]
        d[i, i] = 1.0 / h0
        d[i, i + 1] = -1.0 / h0 - 1.0 / h1
        d[i, i + 2] = 1.0 / h1
    return d


def gam_fit(x, y, num_knots: int = 10, lambdas=LAMBDA_GRID) -> GamFit:
    """Penalised B-spline smooth of ``y`` on ``x`` with knots at quantiles of ``x``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError("x and y differ in length")
    if num_knots < 2:
        raise ValueError("need at least 2 knots")
    if x.size <= num_knots + 2:
        raise ValueError(f"need more than {num_knots + 2} points, got {x.size}")
    if np.ptp(x) == 0:
        raise ValueError("x is constant")
    knots = np.unique(np.quantile(x, np.linspace(0.0, 1.0, num_knots)))
    t = np.r_[[knots[0]] * DEGREE, knots, [knots[-1]] * DEGREE]
    nb = len(t) - DEGREE - 1
    B = BSpline.design_matrix(np.clip(x, knots[0], knots[-1]), t, DEGREE).toarray()
    D = _penalty(t, nb)
    BtB = B.T @ B
    P = D.T @ D
    # put lambda on the scale of the data term so the grid means the same thing for any x units
    P *= np.trace(BtB) / max(np.trace(P), 1e-300)
    Bty = B.T @ y
    n = x.size
    best = None
    for lam in np.asarray(lambdas, dtype=np.float64):
        A = BtB + lam * P
        coef = np.linalg.lstsq(A, Bty, rcond=None)[0]
        rss = float(np.sum((y - B @ coef) ** 2))
        edf = float(np.trace(np.linalg.lstsq(A, BtB, rcond=None)[0]))
        gcv = n * rss / max(n - edf, 1e-12) ** 2
        # strict < keeps the first (smallest) lambda on ties
        if best is None or gcv < best[0] - 1e-15 * max(abs(best[0]), 1.0):
            best = (gcv, float(lam), coef, edf)
    gcv, lam, coef, edf = best
    return GamFit(knots, coef, lam, gcv, edf)
