"""Minimal hand-written SVG line plots (linear or log axes)."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#7f7f7f"]
W, H = 640, 420
ML, MR, MT, MB = 70, 150, 40, 55


def _ticks(lo, hi, log):
    if log:
        return [10.0**k for k in range(math.floor(lo), math.ceil(hi) + 1)]
    span = hi - lo or 1.0
    step = 10 ** math.floor(math.log10(span / 5))
    for m in (1, 2, 5, 10):
        if span / (m * step) <= 6:
            step *= m
            break
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def _fmt_tick(v):
    return f"{v:.0e}" if (abs(v) >= 1e4 or (0 < abs(v) < 1e-2)) else f"{v:g}"


def line_plot(series: dict, title: str = "", xlabel: str = "", ylabel: str = "",
              logx: bool = False, logy: bool = False, dashed: set | None = None) -> str:
    """``series`` maps a label to ``(xs, ys)``; non-positive values are skipped on log axes."""
    dashed = dashed or set()

    def tx(v):
        return math.log10(v) if logx else v

    def ty(v):
        return math.log10(v) if logy else v

    clean = {}
    for name, (xs, ys) in series.items():
        pts = [(float(x), float(y)) for x, y in zip(xs, ys)
               if math.isfinite(x) and math.isfinite(y) and (not logx or x > 0) and (not logy or y > 0)]
        clean[name] = pts
    allx = [tx(x) for pts in clean.values() for x, _ in pts] or [0.0, 1.0]
    ally = [ty(y) for pts in clean.values() for _, y in pts] or [0.0, 1.0]
    x0, x1 = min(allx), max(allx)
    y0, y1 = min(ally), max(ally)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = W - ML - MR, H - MT - MB

    def px(v):
        return ML + (tx(v) - x0) / (x1 - x0) * pw

    def py(v):
        return MT + ph - (ty(v) - y0) / (y1 - y0) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
        'font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<rect x="{ML}" y="{MT}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
        f'<text x="{W / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="{ML + pw / 2:.1f}" y="{H - 12}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="16" y="{MT + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {MT + ph / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for v in _ticks(x0, x1, logx):
        if x0 - 1e-9 <= (math.log10(v) if logx else v) <= x1 + 1e-9:
            X = px(v)
            out.append(f'<line x1="{X:.2f}" y1="{MT + ph}" x2="{X:.2f}" y2="{MT + ph + 5}" stroke="black"/>')
            out.append(f'<text x="{X:.2f}" y="{MT + ph + 18}" text-anchor="middle">{_fmt_tick(v)}</text>')
    for v in _ticks(y0, y1, logy):
        if y0 - 1e-9 <= (math.log10(v) if logy else v) <= y1 + 1e-9:
            Y = py(v)
            out.append(f'<line x1="{ML - 5}" y1="{Y:.2f}" x2="{ML}" y2="{Y:.2f}" stroke="black"/>')
            out.append(f'<text x="{ML - 8}" y="{Y + 4:.2f}" text-anchor="end">{_fmt_tick(v)}</text>')
    for k, (name, pts) in enumerate(clean.items()):
        color = PALETTE[k % len(PALETTE)]
        dash = ' stroke-dasharray="5,4"' if name in dashed else ""
        if pts:
            coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
            out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.6"{dash}/>')
            for x, y in pts:
                out.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="2.2" fill="{color}"/>')
        ly = MT + 14 + 16 * k
        out.append(f'<line x1="{W - MR + 10}" y1="{ly}" x2="{W - MR + 30}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="2"{dash}/>')
        out.append(f'<text x="{W - MR + 35}" y="{ly + 4}">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
