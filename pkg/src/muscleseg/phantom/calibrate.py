"""Fit the planted-volume coefficients against target cohort moments.

The fit uses one large pilot draw of covariates and standard-normal residuals
(common random numbers), so the solved coefficients are a deterministic
function of the pilot seed.  Run as a module to regenerate the frozen file::

    python3 -m muscleseg.phantom.calibrate --out src/muscleseg/phantom/coefficients.json
"""
from __future__ import annotations

import argparse
import json

import numpy as np
from scipy.optimize import least_squares

from .cohort import COEFFICIENTS_FILE, SEXES, SexCoefficients, draw_covariates, expected_total

# per sex: total-volume mean and SD, L-R difference SD, r(total, height),
# r(IMI, BMI), r(IMI, age)
TARGETS = {
    "female": {"mean": 542.3, "sd": 72.1, "asym_sd": 16.1, "r_height": 0.56, "r_imi_bmi": 0.49,
               "r_imi_age": -0.12},
    "male": {"mean": 814.5, "sd": 125.4, "asym_sd": 22.8, "r_height": 0.52, "r_imi_bmi": 0.49,
             "r_imi_age": -0.31},
}
AGE_HINGE = {"female": None, "male": 62.0}
VERSION = "1"


def _moments(cov, eps, coeffs, sex):
    mask = cov["male"] if sex == "male" else ~cov["male"]
    c = {s: coeffs[sex] for s in SEXES}
    total = expected_total(cov["male"][mask], cov["height"][mask], cov["bmi"][mask], cov["age"][mask], c)
    total = total + coeffs[sex].sigma * eps[mask]
    imi = total / (cov["height"][mask] / 100.0) ** 2
    r = lambda a, b: float(np.corrcoef(a, b)[0, 1])  # noqa: E731
    return {
        "mean": float(total.mean()),
        "sd": float(total.std(ddof=1)),
        "r_height": r(total, cov["height"][mask]),
        "r_imi_bmi": r(imi, cov["bmi"][mask]),
        "r_imi_age": r(imi, cov["age"][mask]),
    }


def calibrate(n_pilot: int = 50_000, seed: int = 20_200_901) -> dict[str, SexCoefficients]:
    rng = np.random.default_rng(seed)
    cov = draw_covariates(rng, n_pilot)
    eps = rng.standard_normal(n_pilot)
    out = {}
    for sex in SEXES:
        tgt = TARGETS[sex]

        def make(theta, sex=sex):
            b_0, b_h, b_w, b_a, log_sigma = theta
            return SexCoefficients(intercept=float(b_0) * 100.0, height=float(b_h), bmi_height2=float(b_w), age=float(b_a),
                                   age_hinge=AGE_HINGE[sex], sigma=float(np.exp(log_sigma)),
                                   asym_sd=tgt["asym_sd"])

        def resid(theta, sex=sex):
            m = _moments(cov, eps, {sex: make(theta)}, sex)
            # the intercept matters beyond the mean: IMI divides it by height^2
            return [(m["mean"] - tgt["mean"]) / tgt["mean"],
                    (m["sd"] - tgt["sd"]) / tgt["sd"],
                    m["r_height"] - tgt["r_height"],
                    m["r_imi_bmi"] - tgt["r_imi_bmi"],
                    m["r_imi_age"] - tgt["r_imi_age"]]

        x0 = [0.0, 3.0, 3.0, -2.0, np.log(0.6 * tgt["sd"])]
        sol = least_squares(resid, x0, xtol=1e-12, ftol=1e-12, gtol=1e-12)
        out[sex] = make(sol.x)
    return out


def to_json(coeffs: dict[str, SexCoefficients], n_pilot: int, seed: int) -> dict:
    return {
        "version": VERSION,
        "pilot": {"n": n_pilot, "seed": seed},
        "targets": TARGETS,
        "coefficients": {s: vars(coeffs[s]) for s in SEXES},
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-pilot", type=int, default=50_000)
    ap.add_argument("--seed", type=int, default=20_200_901)
    ap.add_argument("--out", default=str(COEFFICIENTS_FILE))
    args = ap.parse_args(argv)
    coeffs = calibrate(args.n_pilot, args.seed)
    with open(args.out, "w") as fh:
        json.dump(to_json(coeffs, args.n_pilot, args.seed), fh, indent=2, sort_keys=True)
        fh.write("\n")
    for s in SEXES:
        print(s, coeffs[s])


if __name__ == "__main__":
    main()
