"""Static SVG line charts for feature shapes.

A figure is a grid of panels (rows x columns). Every panel records its data
range and pixel box as ``data-*`` attributes, so polyline coordinates can be
recomputed from the plotted series:

    px = left + (x - x0) / (x1 - x0) * width
    py = top + height - (y - y0) / (y1 - y0) * height
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

PANEL_W = 260
PANEL_H = 160
MARGIN_L = 56
MARGIN_R = 16
MARGIN_T = 34
MARGIN_B = 36
HEADER = 28
N_TICKS = 5


@dataclass(frozen=True)
class Panel:
    title: str
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    note: str = ""  # shown instead of a curve when there is no series

    @property
    def empty(self) -> bool:
        return self.x is None or len(self.x) == 0


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    if v == 0:
        return "0"
    return f"{v:.3g}"


def padded_range(values, pad: float = 0.05) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < 1e-12:
        half = max(abs(lo) * 0.1, 0.5)
        return lo - half, hi + half
    span = hi - lo
    return lo - pad * span, hi + pad * span


def project(x, y, box, x_range, y_range):
    """Map data coordinates into the pixel box ``(left, top, width, height)``."""
    left, top, width, height = box
    x0, x1 = x_range
    y0, y1 = y_range
    px = left + (np.asarray(x, dtype=float) - x0) / (x1 - x0) * width
    py = top + height - (np.asarray(y, dtype=float) - y0) / (y1 - y0) * height
    return px, py


def _panel_svg(panel: Panel, box, y_range) -> list[str]:
    left, top, width, height = box
    out = []
    if panel.empty:
        out.append(f'<g class="panel empty" data-left="{_fmt(left)}" data-top="{_fmt(top)}" '
                   f'data-width="{_fmt(width)}" data-height="{_fmt(height)}">')
        out.append(f'<rect x="{_fmt(left)}" y="{_fmt(top)}" width="{_fmt(width)}" height="{_fmt(height)}" '
                   'fill="#fafafa" stroke="#cccccc"/>')
        out.append(f'<text x="{_fmt(left + width / 2)}" y="{_fmt(top + height / 2)}" text-anchor="middle" '
                   f'font-size="11" fill="#888888">{escape(panel.note or "not in model")}</text>')
        out.append(f'<text x="{_fmt(left)}" y="{_fmt(top - 8)}" font-size="12">{escape(panel.title)}</text>')
        out.append("</g>")
        return out
    x_range = padded_range(panel.x, pad=0.0)
    out.append(
        f'<g class="panel" data-title="{escape(panel.title)}" data-x0="{float(x_range[0])!r}" data-x1="{float(x_range[1])!r}" '
        f'data-y0="{float(y_range[0])!r}" data-y1="{float(y_range[1])!r}" data-left="{_fmt(left)}" data-top="{_fmt(top)}" '
        f'data-width="{_fmt(width)}" data-height="{_fmt(height)}">'
    )
    out.append(f'<rect x="{_fmt(left)}" y="{_fmt(top)}" width="{_fmt(width)}" height="{_fmt(height)}" '
               'fill="white" stroke="#444444"/>')
    if y_range[0] < 0 < y_range[1]:
        _, zy = project([x_range[0]], [0.0], box, x_range, y_range)
        out.append(f'<line x1="{_fmt(left)}" y1="{_fmt(zy[0])}" x2="{_fmt(left + width)}" y2="{_fmt(zy[0])}" '
                   'stroke="#bbbbbb" stroke-dasharray="3,3"/>')
    for v in np.linspace(*x_range, N_TICKS):
        px, _ = project([v], [y_range[0]], box, x_range, y_range)
        out.append(f'<line x1="{_fmt(px[0])}" y1="{_fmt(top + height)}" x2="{_fmt(px[0])}" '
                   f'y2="{_fmt(top + height + 4)}" stroke="#444444"/>')
        out.append(f'<text x="{_fmt(px[0])}" y="{_fmt(top + height + 15)}" text-anchor="middle" '
                   f'font-size="9">{_tick_label(v)}</text>')
    for v in np.linspace(*y_range, N_TICKS):
        _, py = project([x_range[0]], [v], box, x_range, y_range)
        out.append(f'<line x1="{_fmt(left - 4)}" y1="{_fmt(py[0])}" x2="{_fmt(left)}" y2="{_fmt(py[0])}" '
                   'stroke="#444444"/>')
        out.append(f'<text x="{_fmt(left - 6)}" y="{_fmt(py[0] + 3)}" text-anchor="end" '
                   f'font-size="9">{_tick_label(v)}</text>')
    px, py = project(panel.x, panel.y, box, x_range, y_range)
    points = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(px, py))
    out.append(f'<polyline fill="none" stroke="#1f5fa8" stroke-width="1.5" points="{points}"/>')
    out.append(f'<text x="{_fmt(left)}" y="{_fmt(top - 8)}" font-size="12">{escape(panel.title)}</text>')
    out.append("</g>")
    return out


def render(grid: Sequence[Sequence[Panel]], column_titles: Sequence[str] = (), title: str = "",
           shared_y: bool = True) -> str:
    """Render ``grid[row][col]`` panels into one SVG document.

    With ``shared_y`` all panels use a common y range, so shape magnitudes can
    be compared across panels (a nullified shape shows as a flat line).
    """
    rows = len(grid)
    cols = max((len(r) for r in grid), default=0)
    if rows == 0 or cols == 0:
        raise ValueError("nothing to plot")
    series = [p.y for r in grid for p in r if not p.empty]
    common = padded_range(np.concatenate(series)) if series and shared_y else None
    cell_w = MARGIN_L + PANEL_W + MARGIN_R
    cell_h = MARGIN_T + PANEL_H + MARGIN_B
    top0 = HEADER + (18 if column_titles else 0)
    width = cols * cell_w
    height = top0 + rows * cell_h
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{width / 2:.2f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>')
    for j, ct in enumerate(column_titles):
        out.append(f'<text x="{j * cell_w + cell_w / 2:.2f}" y="{HEADER + 10}" text-anchor="middle" '
                   f'font-size="12" font-weight="bold">{escape(ct)}</text>')
    for i, row in enumerate(grid):
        for j, panel in enumerate(row):
            box = (j * cell_w + MARGIN_L, top0 + i * cell_h + MARGIN_T, PANEL_W, PANEL_H)
            y_range = common if common is not None else (padded_range(panel.y) if not panel.empty else (0, 1))
            out.extend(_panel_svg(panel, box, y_range))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write(path, grid, column_titles=(), title="", shared_y=True) -> None:
    Path(path).write_text(render(grid, column_titles, title, shared_y), encoding="utf-8")

