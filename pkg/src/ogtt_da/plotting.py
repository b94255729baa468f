"""Minimal deterministic SVG scatterplots: parameter value by year, coloured
by OGTT disease class, with HbA1c on a secondary axis."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

from .diagnosis import DiseaseClass

CLASS_COLORS = {
    DiseaseClass.NORMAL: "#2ca02c",
    DiseaseClass.IMPAIRED_GLUCOSE: "#ff7f0e",
    DiseaseClass.DIABETES: "#d62728",
}

WIDTH, HEIGHT = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 70, 40, 60


def _nice_ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.floor(lo / step) * step
    ticks = []
    v = start
    while v <= hi + step * 1e-9:
        ticks.append(round(v, 10))
        v += step
    if ticks[-1] < hi:
        ticks.append(round(ticks[-1] + step, 10))
    return ticks


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _label(v: float) -> str:
    return f"{v:g}"


def scatter_svg(points, hba1c=(), title: str = "", y_label: str = "value") -> str:
    """Render ``points`` = [(x, y, DiseaseClass)] and ``hba1c`` = [(x, value, DiseaseClass)].

    Parameter values are circles on the left axis; HbA1c values are
    diamonds on the right axis. Output depends only on the inputs.
    """
    xs = [p[0] for p in points] + [h[0] for h in hba1c]
    if not xs:
        raise ValueError("nothing to plot")
    x_ticks = _nice_ticks(min(xs), max(xs))
    y_vals = [p[1] for p in points] or [0.0, 1.0]
    y_ticks = _nice_ticks(min(0.0, min(y_vals)), max(y_vals))
    h_vals = [h[1] for h in hba1c] or [4.0, 7.0]
    h_ticks = _nice_ticks(min(4.0, min(h_vals)), max(7.0, max(h_vals)))

    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def sx(x):
        return LEFT + (x - x_ticks[0]) / (x_ticks[-1] - x_ticks[0]) * pw

    def sy(y, ticks):
        return TOP + ph - (y - ticks[0]) / (ticks[-1] - ticks[0]) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:.2f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for t in x_ticks:
        x = sx(t)
        out.append(f'<line x1="{_fmt(x)}" y1="{TOP + ph}" x2="{_fmt(x)}" y2="{TOP + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{_fmt(x)}" y="{TOP + ph + 18}" text-anchor="middle">{_label(t)}</text>')
    for t in y_ticks:
        y = sy(t, y_ticks)
        out.append(f'<line x1="{LEFT - 5}" y1="{_fmt(y)}" x2="{LEFT}" y2="{_fmt(y)}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 8}" y="{_fmt(y + 4)}" text-anchor="end">{_label(t)}</text>')
    for t in h_ticks:
        y = sy(t, h_ticks)
        out.append(f'<line x1="{LEFT + pw}" y1="{_fmt(y)}" x2="{LEFT + pw + 5}" y2="{_fmt(y)}" stroke="gray"/>')
        out.append(f'<text x="{LEFT + pw + 8}" y="{_fmt(y + 4)}" fill="gray">{_label(t)}</text>')
    out.append(f'<text x="{WIDTH / 2:.2f}" y="{HEIGHT - 20}" text-anchor="middle">Year</text>')
    out.append(f'<text x="18" y="{TOP + ph / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 18 {TOP + ph / 2:.2f})">{escape(y_label)}</text>')
    out.append(f'<text x="{WIDTH - 14}" y="{TOP + ph / 2:.2f}" text-anchor="middle" fill="gray" '
               f'transform="rotate(90 {WIDTH - 14} {TOP + ph / 2:.2f})">HbA1c (%)</text>')
    for x, y, cls in points:
        out.append(f'<circle class="param {DiseaseClass(cls).label}" cx="{_fmt(sx(x))}" '
                   f'cy="{_fmt(sy(y, y_ticks))}" r="5" fill="{CLASS_COLORS[DiseaseClass(cls)]}"/>')
    for x, v, cls in hba1c:
        cx, cy = sx(x), sy(v, h_ticks)
        out.append(f'<path class="hba1c {DiseaseClass(cls).label}" d="M {_fmt(cx)} {_fmt(cy - 6)} '
                   f'L {_fmt(cx + 6)} {_fmt(cy)} L {_fmt(cx)} {_fmt(cy + 6)} L {_fmt(cx - 6)} {_fmt(cy)} Z" '
                   f'fill="none" stroke="{CLASS_COLORS[DiseaseClass(cls)]}" stroke-width="2"/>')
    lx = LEFT + 10
    for k, cls in enumerate(DiseaseClass):
        y = TOP + 14 + 16 * k
        out.append(f'<circle cx="{lx}" cy="{y - 4}" r="4" fill="{CLASS_COLORS[cls]}"/>')
        out.append(f'<text x="{lx + 10}" y="{y}">{cls.label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
