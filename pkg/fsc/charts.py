"""
Minimal self-contained SVG line charts for retention and degradation curves.
"""

import math
from html import escape
from pathlib import Path

WIDTH = 640
HEIGHT = 420
MARGIN = {"left": 70, "right": 150, "top": 40, "bottom": 60}
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")
TICKS = 5


def _fmt(value: float) -> str:
    if value == 0:
        return "0"
    if abs(value) >= 1000 or abs(value) < 0.01:
        return f"{value:.2g}"
    return f"{value:.3g}"


def line_chart_svg(
    series: dict[str, list[tuple[float, float]]],
    x_label: str,
    y_label: str,
    title: str = "",
    log_x: bool = False,
) -> str:
    """Render named (x, y) series as polylines with labeled axes and ticks"""
    points = [p for values in series.values() for p in values]
    if not points:
        raise ValueError("nothing to plot")
    if log_x and any(x <= 0 for x, _ in points):
        raise ValueError("log axis needs positive x values")

    def tx(x: float) -> float:
        return math.log2(x) if log_x else x

    xs = [tx(x) for x, _ in points]
    ys = [y for _, y in points]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(0.0, min(ys)), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1
    if y_hi == y_lo:
        y_hi = y_lo + 1

    plot_w = WIDTH - MARGIN["left"] - MARGIN["right"]
    plot_h = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x: float) -> float:
        return MARGIN["left"] + (tx(x) - x_lo) / (x_hi - x_lo) * plot_w

    def py(y: float) -> float:
        return MARGIN["top"] + (1 - (y - y_lo) / (y_hi - y_lo)) * plot_h

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        out.append(
            f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>'
        )

    x0, y0 = MARGIN["left"], MARGIN["top"] + plot_h
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + plot_w}" y2="{y0}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{MARGIN["top"]}" x2="{x0}" y2="{y0}" stroke="black"/>')

    x_ticks = sorted({x for x, _ in points}) if log_x else [
        x_lo + i * (x_hi - x_lo) / TICKS for i in range(TICKS + 1)
    ]
    for x in x_ticks:
        sx = px(x)
        out.append(f'<line x1="{sx:.1f}" y1="{y0}" x2="{sx:.1f}" y2="{y0 + 5}" stroke="black"/>')
        out.append(f'<text x="{sx:.1f}" y="{y0 + 18}" text-anchor="middle">{_fmt(x)}</text>')
    for i in range(TICKS + 1):
        y = y_lo + i * (y_hi - y_lo) / TICKS
        sy = py(y)
        out.append(f'<line x1="{x0 - 5}" y1="{sy:.1f}" x2="{x0}" y2="{sy:.1f}" stroke="black"/>')
        out.append(
            f'<text x="{x0 - 8}" y="{sy + 4:.1f}" text-anchor="end">{_fmt(y)}</text>'
        )

    out.append(
        f'<text x="{x0 + plot_w / 2:.1f}" y="{HEIGHT - 15}" text-anchor="middle">{escape(x_label)}</text>'
    )
    out.append(
        f'<text x="18" y="{MARGIN["top"] + plot_h / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {MARGIN["top"] + plot_h / 2:.1f})">{escape(y_label)}</text>'
    )

    for k, (name, values) in enumerate(series.items()):
        color = COLORS[k % len(COLORS)]
        ordered = sorted(values)
        coords = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in ordered)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in ordered:
            out.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="{color}"/>')
        ly = MARGIN["top"] + 16 * k + 8
        lx = WIDTH - MARGIN["right"] + 12
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly + 4}">{escape(name)}</text>')

    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_chart(path, svg: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg)
