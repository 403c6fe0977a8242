"""Accuracy vs. keep-ratio line chart as a standalone SVG document."""
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import InvalidArgumentError

WIDTH = 640
HEIGHT = 420
MARGIN_LEFT = 70
MARGIN_RIGHT = 170
MARGIN_TOP = 40
MARGIN_BOTTOM = 60
TICKS = 5

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def _series(rows: Sequence, x: str, y: str, group: str) -> Dict[str, List[Tuple[float, float]]]:
    """group -> [(x, mean y)] sorted by x; repeated x values (seeds) are averaged."""
    collected: Dict[str, Dict[float, List[float]]] = {}
    for row in rows:
        collected.setdefault(str(getattr(row, group)), {}).setdefault(float(getattr(row, x)), []).append(
            float(getattr(row, y))
        )
    return {
        name: [(vx, float(np.mean(vals))) for vx, vals in sorted(points.items())]
        for name, points in sorted(collected.items())
    }


def _span(values: Sequence[float]) -> Tuple[float, float]:
    low, high = min(values), max(values)
    if high - low < 1e-12:
        return low - 0.5, high + 0.5
    return low, high


def emit_svg_lines(
    rows: Sequence,
    x: str = "keep_ratio",
    y: str = "acc1",
    group: str = "strategy",
    title: str = "Accuracy vs. keep ratio",
) -> str:
    """
    One polyline per group on linear axes, a circle on every vertex and a legend.

    The output depends only on the rows, so equal input gives byte-identical SVG.

    Raises:
    InvalidArgumentError: rows is empty.
    """
    if not rows:
        raise InvalidArgumentError("emit_svg_lines needs at least one row")
    series = _series(rows, x, y, group)
    x_low, x_high = _span([p[0] for pts in series.values() for p in pts])
    y_low, y_high = _span([p[1] for pts in series.values() for p in pts])
    plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

    def px(value: float) -> float:
        return MARGIN_LEFT + (value - x_low) / (x_high - x_low) * plot_w

    def py(value: float) -> float:
        return MARGIN_TOP + plot_h - (value - y_low) / (y_high - y_low) * plot_h

    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>',
        f'<text x="{WIDTH / 2:.2f}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{_escape(title)}</text>',
    ]
    # axes
    x0, y0 = MARGIN_LEFT, MARGIN_TOP + plot_h
    lines.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + plot_w}" y2="{y0}" stroke="#333333"/>')
    lines.append(f'<line x1="{x0}" y1="{MARGIN_TOP}" x2="{x0}" y2="{y0}" stroke="#333333"/>')
    for i in range(TICKS + 1):
        vx = x_low + (x_high - x_low) * i / TICKS
        vy = y_low + (y_high - y_low) * i / TICKS
        lines.append(
            f'<text x="{px(vx):.2f}" y="{y0 + 18}" text-anchor="middle" font-family="sans-serif" font-size="11">{vx:.2f}</text>'
        )
        lines.append(
            f'<text x="{x0 - 8}" y="{py(vy) + 4:.2f}" text-anchor="end" font-family="sans-serif" font-size="11">{vy:.3f}</text>'
        )
        lines.append(
            f'<line x1="{x0}" y1="{py(vy):.2f}" x2="{x0 + plot_w}" y2="{py(vy):.2f}" stroke="#eeeeee"/>'
        )
    lines.append(
        f'<text x="{x0 + plot_w / 2:.2f}" y="{HEIGHT - 16}" text-anchor="middle" font-family="sans-serif" font-size="13">{_escape(x)}</text>'
    )
    lines.append(
        f'<text x="18" y="{MARGIN_TOP + plot_h / 2:.2f}" text-anchor="middle" font-family="sans-serif" font-size="13" '
        f'transform="rotate(-90 18 {MARGIN_TOP + plot_h / 2:.2f})">{_escape(y)}</text>'
    )

    for index, (name, points) in enumerate(series.items()):
        color = PALETTE[index % len(PALETTE)]
        coords = " ".join(f"{px(vx):.2f},{py(vy):.2f}" for vx, vy in points)
        lines.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        for vx, vy in points:
            lines.append(f'<circle cx="{px(vx):.2f}" cy="{py(vy):.2f}" r="3" fill="{color}"/>')
        ly = MARGIN_TOP + 10 + index * 20
        lx = WIDTH - MARGIN_RIGHT + 20
        lines.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        lines.append(
            f'<text x="{lx + 26}" y="{ly + 4}" font-family="sans-serif" font-size="12">{_escape(name)}</text>'
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def write_svg(path, document: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(document)
