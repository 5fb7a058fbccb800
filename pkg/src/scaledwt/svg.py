"""Minimal deterministic SVG line charts.

Output depends only on the data, so reruns produce byte-identical files.
"""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf",
           "#7f7f7f")
MAX_POINTS = 2000


def _nice_ticks(lo, hi, count=5):
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return []
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-12 * abs(step):
        ticks.append(0.0 if abs(t) < 1e-12 * step else t)
        t += step
    return ticks


def _fmt(v):
    return f"{v:.6g}"


def line_chart(series, title="", xlabel="", ylabel="", width=720, height=320):
    """``series`` is a list of (label, x, y); returns the SVG document as text."""
    left, right, top, bottom = 70, 150, 30, 45
    pw, ph = width - left - right, height - top - bottom
    xs = [np.asarray(s[1], float) for s in series]
    ys = [np.asarray(s[2], float) for s in series]
    finite_x = np.concatenate([x[np.isfinite(x)] for x in xs]) if xs else np.array([0.0])
    finite_y = np.concatenate([y[np.isfinite(y)] for y in ys]) if ys else np.array([0.0])
    x0, x1 = (float(finite_x.min()), float(finite_x.max())) if finite_x.size else (0.0, 1.0)
    y0, y1 = (float(finite_y.min()), float(finite_y.max())) if finite_y.size else (0.0, 1.0)
    if x1 <= x0:
        x1 = x0 + 1.0
    if y1 <= y0:
        pad = max(abs(y0) * 0.05, 1e-3)
        y0, y1 = y0 - pad, y1 + pad
    else:
        pad = 0.05 * (y1 - y0)
        y0, y1 = y0 - pad, y1 + pad

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{left + pw / 2:.1f}" y="18" text-anchor="middle" font-size="13">'
           f'{escape(title)}</text>']
    for t in _nice_ticks(x0, x1):
        X = px(t)
        out.append(f'<line x1="{X:.2f}" y1="{top}" x2="{X:.2f}" y2="{top + ph}" '
                   f'stroke="#e0e0e0"/>')
        out.append(f'<text x="{X:.2f}" y="{top + ph + 15}" text-anchor="middle">{_fmt(t)}</text>')
    for t in _nice_ticks(y0, y1):
        Y = py(t)
        out.append(f'<line x1="{left}" y1="{Y:.2f}" x2="{left + pw}" y2="{Y:.2f}" '
                   f'stroke="#e0e0e0"/>')
        out.append(f'<text x="{left - 6}" y="{Y + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" '
               f'stroke="black"/>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">'
               f'{escape(xlabel)}</text>')
    out.append(f'<text transform="translate(16,{top + ph / 2:.1f}) rotate(-90)" '
               f'text-anchor="middle">{escape(ylabel)}</text>')
    for i, ((label, _, _), x, y) in enumerate(zip(series, xs, ys)):
        color = PALETTE[i % len(PALETTE)]
        stride = max(1, int(math.ceil(x.size / MAX_POINTS)))
        pts = [(px(a), py(b)) for a, b in zip(x[::stride], y[::stride])
               if math.isfinite(a) and math.isfinite(b)]
        if pts:
            path = " ".join(f"{a:.2f},{b:.2f}" for a, b in pts)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" '
                       f'points="{path}"/>')
        ly = top + 12 + 16 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 30}" '
                   f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 34}" y="{ly}">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_chart(path, series, **kw):
    with open(path, "w", newline="\n") as fh:
        fh.write(line_chart(series, **kw))
