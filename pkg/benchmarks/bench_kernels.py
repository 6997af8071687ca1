"""Time the numba kernels against the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 3] [--quick]

Each case runs once untimed (JIT compile / cache load), then ``--repeat``
times; the best wall time is reported with the numba speed-up.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from muscleseg._accel import HAVE_NUMBA, backend_scope
from muscleseg.autograd import kernels
from muscleseg.prep import AffineParams, resample_trilinear


def conv_cases(quick: bool):
    # (name, N, Cin, Cout, spatial, k, stride)
    cases = [
        ("conv5 2->2 32x32x64", 3, 2, 2, (32, 32, 64), 5, 1),
        ("conv5 8->8 8x8x16", 3, 8, 8, (8, 8, 16), 5, 1),
        ("down2 4->8 16x16x32", 3, 4, 8, (16, 16, 32), 2, 2),
    ]
    if not quick:
        cases.append(("conv5 8->8 48x48x96", 1, 8, 8, (48, 48, 96), 5, 1))
    return cases


def _best(fn, repeat: int) -> float:
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def run(repeat: int = 3, quick: bool = False) -> list[dict]:
    rng = np.random.default_rng(0)
    rows = []
    for name, n, cin, cout, sp, k, stride in conv_cases(quick):
        pad = (k - 1) // 2 if stride == 1 else 0
        x = rng.standard_normal((n, cin) + sp).astype(np.float32)
        xp = np.pad(x, ((0, 0), (0, 0)) + ((pad, pad),) * 3)
        w = (rng.standard_normal((cout, cin, k, k, k)) * 0.1).astype(np.float32)
        b = np.zeros(cout, np.float32)
        out = kernels.conv_forward(xp, w, b, stride)
        g = rng.standard_normal(out.shape).astype(np.float32)
        ops = {
            "forward": lambda: kernels.conv_forward(xp, w, b, stride),
            "grad_input": lambda: kernels.conv_backward_input(g, w, stride, xp.shape),
            "grad_weight": lambda: kernels.conv_backward_weight(g, xp, stride, w.shape),
        }
        macs = out.size * cin * k ** 3
        for op, fn in ops.items():
            row = {"case": f"{name} {op}", "gmac": macs / 1e9}
            for be in ("numpy", "numba") if HAVE_NUMBA else ("numpy",):
                with backend_scope(be):
                    row[be] = _best(fn, repeat)
            rows.append(row)
    img = rng.standard_normal((32, 32, 64)).astype(np.float32)
    params = AffineParams((2.5, -1.5, 7.0), (1.1, 0.9, 1.3))
    row = {"case": "trilinear resample 32x32x64", "gmac": None}
    for be in ("numpy", "numba") if HAVE_NUMBA else ("numpy",):
        with backend_scope(be):
            row[be] = _best(lambda: resample_trilinear(img, params), repeat)
    rows.append(row)
    return rows


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--quick", action="store_true", help="skip the large case")
    args = ap.parse_args(argv)
    rows = run(args.repeat, args.quick)
    print(f"{'case':44s} {'numpy s':>10s} {'numba s':>10s} {'speedup':>8s} {'GMAC/s':>8s}")
    for r in rows:
        nb = r.get("numba")
        speed = f"{r['numpy'] / nb:8.1f}" if nb else "     n/a"
        rate = f"{r['gmac'] / nb:8.2f}" if nb and r["gmac"] else "       -"
        print(f"{r['case']:44s} {r['numpy']:10.4f} {nb if nb else float('nan'):10.4f} {speed} {rate}")


if __name__ == "__main__":
    main()
