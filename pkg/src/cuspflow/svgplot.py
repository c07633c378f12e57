"""Standalone SVG line charts (no plotting dependency)."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 400
MARGIN = (70, 20, 30, 50)  # left, right, top, bottom
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step) * step
    out = []
    x = start
    while x <= hi + 1e-9 * step:
        out.append(round(x, 12))
        x += step
    return out


def _num(x: float) -> str:
    return f"{x:.2f}"


def line_chart(series: dict[str, tuple[np.ndarray, np.ndarray]], title: str,
               xlabel: str = "t", ylabel: str = "", log_y: bool = False) -> str:
    """Render named ``(x, y)`` series as an SVG document string.

    With ``log_y`` the axis is ``log10`` and non-positive samples are dropped.
    Output depends only on the inputs, so it is byte-stable across runs.
    """
    clean = {}
    for name, (x, y) in series.items():
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        ok = np.isfinite(x) & np.isfinite(y)
        if log_y:
            ok &= y > 0
        if np.any(ok):
            clean[name] = (x[ok], np.log10(y[ok]) if log_y else y[ok])
    left, right, top, bottom = MARGIN
    pw, ph = WIDTH - left - right, HEIGHT - top - bottom
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="18" text-anchor="middle" font-size="14" '
        f'font-family="sans-serif">{escape(title)}</text>',
    ]
    if not clean:
        parts.append(f'<text x="{WIDTH / 2}" y="{HEIGHT / 2}" text-anchor="middle" '
                     'font-family="sans-serif">no data</text></svg>')
        return "\n".join(parts) + "\n"
    xs = np.concatenate([v[0] for v in clean.values()])
    ys = np.concatenate([v[1] for v in clean.values()])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1 - (y - y0) / (y1 - y0)) * ph

    parts.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    for t in _ticks(x0, x1):
        parts.append(f'<line x1="{_num(px(t))}" y1="{top + ph}" x2="{_num(px(t))}" '
                     f'y2="{top + ph + 5}" stroke="black"/>')
        parts.append(f'<text x="{_num(px(t))}" y="{top + ph + 18}" text-anchor="middle" '
                     f'font-size="11" font-family="sans-serif">{t:g}</text>')
    yt = [float(k) for k in range(math.ceil(y0), math.floor(y1) + 1)] if log_y else _ticks(y0, y1)
    if log_y and len(yt) < 2:
        yt = _ticks(y0, y1)
    for t in yt:
        label = f"1e{t:g}" if log_y and float(t).is_integer() else f"{t:g}"
        parts.append(f'<line x1="{left - 5}" y1="{_num(py(t))}" x2="{left + pw}" '
                     f'y2="{_num(py(t))}" stroke="#dddddd"/>')
        parts.append(f'<text x="{left - 8}" y="{_num(py(t) + 4)}" text-anchor="end" '
                     f'font-size="11" font-family="sans-serif">{label}</text>')
    parts.append(f'<text x="{left + pw / 2}" y="{HEIGHT - 8}" text-anchor="middle" '
                 f'font-size="12" font-family="sans-serif">{escape(xlabel)}</text>')
    ytitle = (f"log10 {ylabel}" if log_y else ylabel).strip()
    parts.append(f'<text x="14" y="{top + ph / 2}" text-anchor="middle" font-size="12" '
                 f'font-family="sans-serif" transform="rotate(-90 14 {top + ph / 2})">'
                 f'{escape(ytitle)}</text>')
    for k, (name, (x, y)) in enumerate(clean.items()):
        color = COLORS[k % len(COLORS)]
        pts = " ".join(f"{_num(px(a))},{_num(py(b))}" for a, b in zip(x, y))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = top + 14 + 16 * k
        parts.append(f'<line x1="{left + pw - 150}" y1="{ly}" x2="{left + pw - 130}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw - 125}" y="{ly + 4}" font-size="11" '
                     f'font-family="sans-serif">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
