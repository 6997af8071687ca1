"""Self-contained SVG scatter plots (inline styles, no external assets)."""
from __future__ import annotations

import math
from html import escape

import numpy as np

W, H = 640, 440
MARGIN = dict(left=70, right=20, top=40, bottom=55)
PALETTE = ("#c0392b", "#2471a3", "#1e8449", "#7d3c98")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((s * mag for s in (1, 2, 2.5, 5, 10) if s * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def _num(v: float) -> str:
    return f"{v:.2f}"


class Plot:
    def __init__(self, title: str, xlabel: str, ylabel: str):
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.series = []   # (label, x, y, colour)
        self.curves = []   # (label, x, y, colour)
        self.hlines = []   # (y, label)

    def scatter(self, x, y, label: str = "", colour: str | None = None):
        colour = colour or PALETTE[len(self.series) % len(PALETTE)]
        self.series.append((label, np.asarray(x, float), np.asarray(y, float), colour))
        return self

    def curve(self, x, y, label: str = "", colour: str | None = None):
        colour = colour or PALETTE[len(self.curves) % len(PALETTE)]
        self.curves.append((label, np.asarray(x, float), np.asarray(y, float), colour))
        return self

    def hline(self, y: float, label: str = ""):
        self.hlines.append((float(y), label))
        return self

    def _limits(self):
        xs = [s[1] for s in self.series + self.curves]
        ys = [s[2] for s in self.series + self.curves] + [np.array([h[0] for h in self.hlines])]
        xs = np.concatenate(xs) if xs else np.array([0.0, 1.0])
        ys = np.concatenate(ys) if ys else np.array([0.0, 1.0])
        out = []
        for v in (xs, ys):
            lo, hi = (float(v.min()), float(v.max())) if v.size else (0.0, 1.0)
            pad = 0.05 * (hi - lo) if hi > lo else 1.0
            out.append((lo - pad, hi + pad))
        return out

    def render(self) -> str:
        (x0, x1), (y0, y1) = self._limits()
        pw = W - MARGIN["left"] - MARGIN["right"]
        ph = H - MARGIN["top"] - MARGIN["bottom"]
        sx = lambda v: MARGIN["left"] + (v - x0) / (x1 - x0) * pw  # noqa: E731
        sy = lambda v: MARGIN["top"] + (y1 - v) / (y1 - y0) * ph  # noqa: E731
        p = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
             f'font-family="sans-serif" font-size="12">',
             f'<rect x="0" y="0" width="{W}" height="{H}" fill="#ffffff"/>',
             f'<text x="{W / 2}" y="22" text-anchor="middle" font-size="15">{escape(self.title)}</text>',
             f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" '
             f'fill="none" stroke="#333333"/>']
        for t in _ticks(x0, x1):
            p.append(f'<line class="tick" x1="{_num(sx(t))}" y1="{MARGIN["top"] + ph}" x2="{_num(sx(t))}" '
                     f'y2="{MARGIN["top"] + ph + 5}" stroke="#333333"/>')
            p.append(f'<text x="{_num(sx(t))}" y="{MARGIN["top"] + ph + 18}" text-anchor="middle">{t:g}</text>')
        for t in _ticks(y0, y1):
            p.append(f'<line class="tick" x1="{MARGIN["left"] - 5}" y1="{_num(sy(t))}" x2="{MARGIN["left"]}" '
                     f'y2="{_num(sy(t))}" stroke="#333333"/>')
            p.append(f'<text x="{MARGIN["left"] - 8}" y="{_num(sy(t) + 4)}" text-anchor="end">{t:g}</text>')
        p.append(f'<text x="{MARGIN["left"] + pw / 2}" y="{H - 12}" text-anchor="middle">{escape(self.xlabel)}</text>')
        p.append(f'<text transform="translate(18,{MARGIN["top"] + ph / 2}) rotate(-90)" '
                 f'text-anchor="middle">{escape(self.ylabel)}</text>')
        for label, x, y, colour in self.series:
            p.append(f'<g class="series" fill="{colour}" fill-opacity="0.55" stroke="none">'
                     f'<title>{escape(label)}</title>')
            p.extend(f'<circle cx="{_num(sx(a))}" cy="{_num(sy(b))}" r="2.5"/>' for a, b in zip(x, y))
            p.append("</g>")
        for label, x, y, colour in self.curves:
            pts = " ".join(f"{_num(sx(a))},{_num(sy(b))}" for a, b in zip(x, y))
            p.append(f'<polyline class="curve" points="{pts}" fill="none" stroke="{colour}" '
                     f'stroke-width="2"><title>{escape(label)}</title></polyline>')
        for yv, label in self.hlines:
            p.append(f'<line class="hrule" x1="{MARGIN["left"]}" y1="{_num(sy(yv))}" x2="{MARGIN["left"] + pw}" '
                     f'y2="{_num(sy(yv))}" stroke="#555555" stroke-dasharray="2,3"/>')
            p.append(f'<text x="{MARGIN["left"] + pw - 4}" y="{_num(sy(yv) - 4)}" text-anchor="end" '
                     f'fill="#555555">{escape(label)}</text>')
        labels = [(s[0], s[3]) for s in self.series + self.curves if s[0]]
        seen = []
        for label, colour in labels:
            if label in [s[0] for s in seen]:
                continue
            seen.append((label, colour))
            yy = MARGIN["top"] + 14 + 16 * (len(seen) - 1)
            p.append(f'<rect x="{MARGIN["left"] + 8}" y="{yy - 9}" width="10" height="10" fill="{colour}"/>')
            p.append(f'<text x="{MARGIN["left"] + 22}" y="{yy}">{escape(label)}</text>')
        p.append("</svg>")
        return "\n".join(p) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.render())
