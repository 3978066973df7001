"""Static SVG charts for result CSVs.

Hand-rolled rather than pulled from a plotting stack for one reason:
byte-determinism. The same CSV must produce the same SVG, byte for byte,
on any machine, because plot outputs participate in reproducibility
checks. Everything here is fixed-size, fixed-precision, and renderer
independent.

Three chart kinds, matching the result files the trainer writes:
  sweep    - line plot with CI whiskers (columns value, mean_acc, ci95)
  ablation - grouped bars with CI whiskers (columns variant, mean_acc, ci95)
  curve    - one accuracy line per split over epochs (epoch, split, mean_acc)
"""

from __future__ import annotations

import csv
import io
from xml.sax.saxutils import escape

from .errors import FormatError

WIDTH, HEIGHT = 640, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 24, 44, 56
PLOT_W = WIDTH - MARGIN_L - MARGIN_R
PLOT_H = HEIGHT - MARGIN_T - MARGIN_B

PALETTE = ("#2b6cb0", "#c05621", "#2f855a", "#805ad5", "#b83280")

AXIS_STYLE = 'stroke="#444" stroke-width="1"'
GRID_STYLE = 'stroke="#ddd" stroke-width="1"'
TEXT = 'font-family="sans-serif" font-size="12" fill="#222"'


def _fmt(x):
    return f"{x:.2f}"


def _tick_values(lo, hi, target=5):
    """Round tick positions covering [lo, hi]; deterministic."""
    span = hi - lo
    if span <= 0:
        span = abs(hi) if hi != 0 else 1.0
        lo, hi = lo - span / 2, hi + span / 2
        span = hi - lo
    raw = span / target
    mag = 10.0 ** int(f"{raw:e}".split("e")[1])
    for mult in (1.0, 2.0, 5.0, 10.0):
        step = mult * mag
        if span / step <= target + 0.5:
            break
    first = step * int(lo / step)
    if first > lo + 1e-12 * span:
        first -= step
    ticks = []
    v = first
    while v <= hi + step * 0.501:
        ticks.append(v)
        v += step
    return ticks


def _num_label(v):
    s = f"{v:.6g}"
    return s


class _Canvas:
    def __init__(self, title, xlabel, ylabel):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2:.0f}" y="24" text-anchor="middle" font-family="sans-serif" '
            f'font-size="15" fill="#111">{escape(title)}</text>',
            f'<text x="{MARGIN_L + PLOT_W / 2:.0f}" y="{HEIGHT - 14}" text-anchor="middle" '
            f"{TEXT}>{escape(xlabel)}</text>",
            f'<text x="18" y="{MARGIN_T + PLOT_H / 2:.0f}" text-anchor="middle" {TEXT} '
            f'transform="rotate(-90 18 {MARGIN_T + PLOT_H / 2:.0f})">{escape(ylabel)}</text>',
        ]

    def y_axis(self, lo, hi):
        ticks = _tick_values(lo, hi)
        self.lo_y, self.hi_y = ticks[0], ticks[-1]
        for v in ticks:
            y = self.ypix(v)
            self.parts.append(
                f'<line x1="{MARGIN_L}" y1="{_fmt(y)}" x2="{MARGIN_L + PLOT_W}" '
                f'y2="{_fmt(y)}" {GRID_STYLE}/>'
            )
            self.parts.append(
                f'<text x="{MARGIN_L - 8}" y="{_fmt(y + 4)}" text-anchor="end" {TEXT}>'
                f"{_num_label(v)}</text>"
            )
        self.parts.append(
            f'<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" '
            f'y2="{MARGIN_T + PLOT_H}" {AXIS_STYLE}/>'
        )
        self.parts.append(
            f'<line x1="{MARGIN_L}" y1="{MARGIN_T + PLOT_H}" x2="{MARGIN_L + PLOT_W}" '
            f'y2="{MARGIN_T + PLOT_H}" {AXIS_STYLE}/>'
        )

    def ypix(self, v):
        f = (v - self.lo_y) / (self.hi_y - self.lo_y)
        return MARGIN_T + PLOT_H * (1.0 - f)

    def whisker(self, x, y, half, color):
        if half <= 0:
            return
        y0, y1 = self.ypix(y - half), self.ypix(y + half)
        for yy in (y0, y1):
            self.parts.append(
                f'<line x1="{_fmt(x - 4)}" y1="{_fmt(yy)}" x2="{_fmt(x + 4)}" '
                f'y2="{_fmt(yy)}" stroke="{color}" stroke-width="1.5"/>'
            )
        self.parts.append(
            f'<line x1="{_fmt(x)}" y1="{_fmt(y0)}" x2="{_fmt(x)}" y2="{_fmt(y1)}" '
            f'stroke="{color}" stroke-width="1.5"/>'
        )

    def finish(self):
        self.parts.append("</svg>")
        return "\n".join(self.parts) + "\n"


def _y_range(values, halves):
    lows = [v - c for v, c in zip(values, halves)]
    highs = [v + c for v, c in zip(values, halves)]
    lo, hi = min(lows), max(highs)
    pad = (hi - lo) * 0.08 if hi > lo else max(abs(hi), 1e-3) * 0.1
    return lo - pad, hi + pad


def line_plot(points, *, title, xlabel, ylabel):
    """points: [(x, y, ci_half)] sorted by x; returns SVG text."""
    if not points:
        raise FormatError("line plot needs at least one point")
    pts = sorted(points)
    c = _Canvas(title, xlabel, ylabel)
    xs = [p[0] for p in pts]
    lo_x, hi_x = min(xs), max(xs)
    if hi_x == lo_x:
        lo_x, hi_x = lo_x - 0.5, hi_x + 0.5
    c.y_axis(*_y_range([p[1] for p in pts], [p[2] for p in pts]))

    def xpix(v):
        return MARGIN_L + PLOT_W * (v - lo_x) / (hi_x - lo_x)

    for v in _tick_values(lo_x, hi_x):
        if v < lo_x - 1e-9 or v > hi_x + 1e-9:
            continue
        x = xpix(v)
        c.parts.append(
            f'<text x="{_fmt(x)}" y="{MARGIN_T + PLOT_H + 18}" text-anchor="middle" {TEXT}>'
            f"{_num_label(v)}</text>"
        )
    color = PALETTE[0]
    coords = " ".join(f"{_fmt(xpix(x))},{_fmt(c.ypix(y))}" for x, y, _ in pts)
    c.parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
    for x, y, half in pts:
        c.whisker(xpix(x), y, half, color)
        c.parts.append(
            f'<circle cx="{_fmt(xpix(x))}" cy="{_fmt(c.ypix(y))}" r="3.5" fill="{color}"/>'
        )
    return c.finish()


def bar_plot(bars, *, title, ylabel):
    """bars: [(label, y, ci_half)] in display order; returns SVG text."""
    if not bars:
        raise FormatError("bar plot needs at least one bar")
    c = _Canvas(title, "", ylabel)
    values = [b[1] for b in bars]
    halves = [b[2] for b in bars]
    lo, hi = _y_range(values, halves)
    c.y_axis(min(lo, 0.0), hi)
    n = len(bars)
    slot = PLOT_W / n
    bw = slot * 0.6
    base = c.ypix(max(c.lo_y, 0.0))
    for i, (label, y, half) in enumerate(bars):
        color = PALETTE[i % len(PALETTE)]
        xc = MARGIN_L + slot * (i + 0.5)
        top = c.ypix(y)
        c.parts.append(
            f'<rect x="{_fmt(xc - bw / 2)}" y="{_fmt(min(top, base))}" width="{_fmt(bw)}" '
            f'height="{_fmt(abs(base - top))}" fill="{color}" fill-opacity="0.85"/>'
        )
        c.whisker(xc, y, half, "#333")
        c.parts.append(
            f'<text x="{_fmt(xc)}" y="{MARGIN_T + PLOT_H + 18}" text-anchor="middle" {TEXT}>'
            f"{escape(str(label))}</text>"
        )
    return c.finish()


def curve_plot(series, *, title, xlabel, ylabel):
    """series: {name: [(x, y)]}; one line per name, legend in draw order."""
    if not series or all(not v for v in series.values()):
        raise FormatError("curve plot needs at least one point")
    c = _Canvas(title, xlabel, ylabel)
    all_pts = [p for pts in series.values() for p in pts]
    xs = [p[0] for p in all_pts]
    lo_x, hi_x = min(xs), max(xs)
    if hi_x == lo_x:
        lo_x, hi_x = lo_x - 0.5, hi_x + 0.5
    c.y_axis(*_y_range([p[1] for p in all_pts], [0.0] * len(all_pts)))

    def xpix(v):
        return MARGIN_L + PLOT_W * (v - lo_x) / (hi_x - lo_x)

    for v in _tick_values(lo_x, hi_x):
        if v < lo_x - 1e-9 or v > hi_x + 1e-9:
            continue
        c.parts.append(
            f'<text x="{_fmt(xpix(v))}" y="{MARGIN_T + PLOT_H + 18}" text-anchor="middle" '
            f"{TEXT}>{_num_label(v)}</text>"
        )
    for i, (name, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{_fmt(xpix(x))},{_fmt(c.ypix(y))}" for x, y in sorted(pts))
        c.parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>'
        )
        lx = MARGIN_L + PLOT_W - 120
        ly = MARGIN_T + 10 + 16 * i
        c.parts.append(
            f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" stroke="{color}" stroke-width="2"/>'
        )
        c.parts.append(f'<text x="{lx + 24}" y="{ly + 4}" {TEXT}>{escape(str(name))}</text>')
    return c.finish()


def _read_csv(text, kind, required):
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise FormatError(f"{kind} plot: CSV has no data rows")
    have = rows[0].keys()
    for col in required:
        if col not in have:
            raise FormatError(f"{kind} plot: CSV is missing column {col!r}")
    return rows


def plot_csv(text, kind):
    """Render a result CSV to SVG text; schema chosen by kind."""
    if kind == "sweep":
        rows = _read_csv(text, kind, ("value", "mean_acc", "ci95"))
        pts = [(float(r["value"]), float(r["mean_acc"]), float(r["ci95"])) for r in rows]
        name = rows[0].get("param", "value")
        return line_plot(pts, title=f"validation accuracy vs {name}", xlabel=name,
                         ylabel="accuracy")
    if kind == "ablation":
        rows = _read_csv(text, kind, ("variant", "mean_acc", "ci95"))
        bars = [(r["variant"], float(r["mean_acc"]), float(r["ci95"])) for r in rows]
        return bar_plot(bars, title="test accuracy by variant", ylabel="accuracy")
    if kind == "curve":
        rows = _read_csv(text, kind, ("epoch", "split", "mean_acc"))
        series = {}
        for r in rows:
            series.setdefault(r["split"], []).append((float(r["epoch"]), float(r["mean_acc"])))
        return curve_plot(series, title="accuracy over training", xlabel="epoch",
                          ylabel="accuracy")
    raise FormatError(f"unknown plot kind {kind!r}, expected sweep, ablation, or curve")
