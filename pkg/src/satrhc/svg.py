"""Minimal deterministic SVG line plots (no plotting dependency).

Output is a plain polyline chart with axes, ticks and a legend.  Numbers
are formatted with repr-style shortest round trips, so identical data
always produces identical bytes.
"""

import math

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v):
    return f"{v:.6g}"


def _ticks(lo, hi, count=5):
    if not math.isfinite(lo) or not math.isfinite(hi):
        lo, hi = 0.0, 1.0
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    raw = span / count
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    start = math.ceil(lo / step) * step
    ticks = []
    v = start
    while v <= hi + 1e-12 * span:
        ticks.append(v)
        v += step
    return ticks


def write_line_plot(path, series, title="", xlabel="", ylabel="",
                    width=720, height=460, log_y=False):
    """Write a line chart; `series` is a list of (label, xs, ys)."""
    left, right, top, bottom = 70, 20, 34, 46
    pw, ph = width - left - right, height - top - bottom

    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys if math.isfinite(y)]
    if log_y:
        ys_all = [y for y in ys_all if y > 0]
    if not xs_all or not ys_all:
        xs_all, ys_all = [0.0, 1.0], [0.0, 1.0]
    x_lo, x_hi = min(xs_all), max(xs_all)
    if log_y:
        y_lo, y_hi = math.log10(min(ys_all)), math.log10(max(ys_all))
    else:
        y_lo, y_hi = min(ys_all), max(ys_all)
    if x_hi <= x_lo:
        x_hi = x_lo + 1.0
    if y_hi <= y_lo:
        y_hi = y_lo + 1.0

    def px(x):
        return left + (x - x_lo) / (x_hi - x_lo) * pw

    def py(y):
        if log_y:
            y = math.log10(y) if y > 0 else y_lo
        return top + ph - (y - y_lo) / (y_hi - y_lo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14" '
        f'font-family="sans-serif">{title}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" '
        f'stroke="#333" stroke-width="1"/>',
    ]
    for tx in _ticks(x_lo, x_hi):
        out.append(f'<line x1="{_fmt(px(tx))}" y1="{top + ph}" x2="{_fmt(px(tx))}" '
                   f'y2="{top + ph + 5}" stroke="#333"/>')
        out.append(f'<text x="{_fmt(px(tx))}" y="{top + ph + 18}" text-anchor="middle" '
                   f'font-size="11" font-family="sans-serif">{_fmt(tx)}</text>')
    for ty in _ticks(y_lo, y_hi):
        yy = top + ph - (ty - y_lo) / (y_hi - y_lo) * ph
        label = 10.0 ** ty if log_y else ty
        out.append(f'<line x1="{left - 5}" y1="{_fmt(yy)}" x2="{left}" '
                   f'y2="{_fmt(yy)}" stroke="#333"/>')
        out.append(f'<text x="{left - 8}" y="{_fmt(yy + 4)}" text-anchor="end" '
                   f'font-size="11" font-family="sans-serif">{_fmt(label)}</text>')
    out.append(f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" '
               f'font-size="12" font-family="sans-serif">{xlabel}</text>')
    out.append(f'<text x="16" y="{top + ph / 2}" text-anchor="middle" font-size="12" '
               f'font-family="sans-serif" transform="rotate(-90 16 {top + ph / 2})">'
               f'{ylabel}</text>')

    for i, (label, xs, ys) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(xs, ys)
                       if math.isfinite(y) and (not log_y or y > 0))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                   f'stroke-width="1.5"/>')
        ly = top + 16 + 16 * i
        out.append(f'<line x1="{left + 10}" y1="{ly - 4}" x2="{left + 34}" '
                   f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + 40}" y="{ly}" font-size="11" '
                   f'font-family="sans-serif">{label}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out))
