"""Minimal self-contained SVG line charts."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf", "#000000"]


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-12 * step:
        out.append(v)
        v += step
    return out


def _fmt(v):
    return f"{v:.3g}"


def line_chart(series, title="", xlabel="", ylabel="", logy=False, width=640, height=420) -> str:
    """``series`` is a list of ``(label, xs, ys, dashed)`` tuples."""
    pad_l, pad_r, pad_t, pad_b = 70, 170, 36, 50
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b
    pts = []
    for _, xs, ys, _ in series:
        for x, y in zip(xs, ys):
            if math.isfinite(x) and math.isfinite(y) and (y > 0 or not logy):
                pts.append((x, math.log10(y) if logy else y))
    if not pts:
        pts = [(0.0, 0.0), (1.0, 1.0)]
    x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
    y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + (1.0 if y0 == 0 else abs(y0) * 0.1)

    def sx(x):
        return pad_l + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return pad_t + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{pad_l + pw / 2:.1f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
    ]
    for tx in _ticks(x0, x1):
        out.append(f'<line x1="{sx(tx):.1f}" y1="{pad_t + ph}" x2="{sx(tx):.1f}" y2="{pad_t + ph + 4}" stroke="#444"/>')
        out.append(f'<text x="{sx(tx):.1f}" y="{pad_t + ph + 16}" text-anchor="middle">{_fmt(tx)}</text>')
    for ty in _ticks(y0, y1):
        label = _fmt(10**ty) if logy else _fmt(ty)
        out.append(f'<line x1="{pad_l - 4}" y1="{sy(ty):.1f}" x2="{pad_l}" y2="{sy(ty):.1f}" stroke="#444"/>')
        out.append(f'<text x="{pad_l - 6}" y="{sy(ty) + 4:.1f}" text-anchor="end">{label}</text>')
    out.append(f'<text x="{pad_l + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text transform="translate(16,{pad_t + ph / 2:.1f}) rotate(-90)" text-anchor="middle">'
               f'{escape(ylabel + (" (log)" if logy else ""))}</text>')
    for i, (label, xs, ys, dashed) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        coords = [
            f"{sx(x):.2f},{sy(math.log10(y) if logy else y):.2f}"
            for x, y in zip(xs, ys)
            if math.isfinite(x) and math.isfinite(y) and (y > 0 or not logy)
        ]
        dash = ' stroke-dasharray="6,4"' if dashed else ""
        if coords:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{" ".join(coords)}"/>')
        ly = pad_t + 12 + 16 * i
        lx = pad_l + pw + 10
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 22}" y2="{ly}" stroke="{color}" stroke-width="1.5"{dash}/>')
        out.append(f'<text x="{lx + 27}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
