"""Minimal standalone SVG charts.

Deliberately tiny: fixed canvas, linear axes with five ticks, polylines,
points, and box glyphs. Numbers are formatted with fixed precision so a chart
built from identical data is byte-identical.
"""

from __future__ import annotations

import os
from pathlib import Path

from .errors import ContractError

WIDTH, HEIGHT = 640, 480
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 20, 40, 50
SERIES_COLORS = ("#1f6fb4", "#d2542c", "#3a8f4d", "#8a4d9e")


def _fmt(x: float) -> str:
    return format(float(x), ".2f")


class SvgChart:
    def __init__(self, title: str, xlabel: str, ylabel: str):
        self.title = title
        self.xlabel = xlabel
        self.ylabel = ylabel
        self.elements: list[str] = []
        self.legend: list[tuple[str, str]] = []
        self._xlim = None
        self._ylim = None

    def set_limits(self, xs, ys) -> None:
        xs = [float(x) for x in xs]
        ys = [float(y) for y in ys]
        if not xs or not ys:
            raise ContractError("cannot plot empty data")
        x0, x1 = min(xs), max(xs)
        y0, y1 = min(ys), max(ys)
        if x1 == x0:
            x0, x1 = x0 - 0.5, x1 + 0.5
        if y1 == y0:
            y0, y1 = y0 - 0.5, y1 + 0.5
        padx = 0.05 * (x1 - x0)
        pady = 0.05 * (y1 - y0)
        self._xlim = (x0 - padx, x1 + padx)
        self._ylim = (y0 - pady, y1 + pady)

    def _px(self, x: float) -> float:
        x0, x1 = self._xlim
        return MARGIN_L + (x - x0) / (x1 - x0) * (WIDTH - MARGIN_L - MARGIN_R)

    def _py(self, y: float) -> float:
        y0, y1 = self._ylim
        return HEIGHT - MARGIN_B - (y - y0) / (y1 - y0) * (HEIGHT - MARGIN_T - MARGIN_B)

    def polyline(self, xs, ys, label: str) -> None:
        color = SERIES_COLORS[len(self.legend) % len(SERIES_COLORS)]
        points = " ".join(f"{_fmt(self._px(x))},{_fmt(self._py(y))}" for x, y in zip(xs, ys))
        self.elements.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>'
        )
        self.legend.append((label, color))

    def points(self, xs, ys, label: str) -> None:
        color = SERIES_COLORS[len(self.legend) % len(SERIES_COLORS)]
        for x, y in zip(xs, ys):
            self.elements.append(
                f'<circle cx="{_fmt(self._px(x))}" cy="{_fmt(self._py(y))}" r="1.6" '
                f'fill="{color}" fill-opacity="0.45"/>'
            )
        self.legend.append((label, color))

    def box(self, x_center: float, q1: float, q2: float, q3: float, lo: float, hi: float, label: str) -> None:
        color = SERIES_COLORS[len(self.legend) % len(SERIES_COLORS)]
        half = 0.18
        xl, xr = self._px(x_center - half), self._px(x_center + half)
        xm = self._px(x_center)
        self.elements.append(
            f'<rect x="{_fmt(xl)}" y="{_fmt(self._py(q3))}" width="{_fmt(xr - xl)}" '
            f'height="{_fmt(self._py(q1) - self._py(q3))}" fill="{color}" fill-opacity="0.35" '
            f'stroke="{color}"/>'
        )
        for y in (q2,):
            self.elements.append(
                f'<line x1="{_fmt(xl)}" y1="{_fmt(self._py(y))}" x2="{_fmt(xr)}" '
                f'y2="{_fmt(self._py(y))}" stroke="{color}" stroke-width="2"/>'
            )
        for y in (lo, hi):
            self.elements.append(
                f'<line x1="{_fmt(xm)}" y1="{_fmt(self._py(y))}" x2="{_fmt(xm)}" '
                f'y2="{_fmt(self._py(q1 if y == lo else q3))}" stroke="{color}"/>'
            )
        self.legend.append((label, color))

    def _ticks(self, lo: float, hi: float) -> list[float]:
        return [lo + i * (hi - lo) / 4 for i in range(5)]

    def render(self) -> str:
        if self._xlim is None:
            raise ContractError("set_limits must be called before render")
        parts = [
            '<?xml version="1.0" encoding="UTF-8"?>',
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH // 2}" y="24" text-anchor="middle" font-size="15" '
            f'font-family="sans-serif">{self.title}</text>',
        ]
        x_axis_y = HEIGHT - MARGIN_B
        parts.append(
            f'<line x1="{MARGIN_L}" y1="{x_axis_y}" x2="{WIDTH - MARGIN_R}" y2="{x_axis_y}" stroke="black"/>'
        )
        parts.append(
            f'<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{x_axis_y}" stroke="black"/>'
        )
        for tx in self._ticks(*self._xlim):
            px = self._px(tx)
            parts.append(f'<line x1="{_fmt(px)}" y1="{x_axis_y}" x2="{_fmt(px)}" y2="{x_axis_y + 5}" stroke="black"/>')
            parts.append(
                f'<text x="{_fmt(px)}" y="{x_axis_y + 18}" text-anchor="middle" font-size="11" '
                f'font-family="sans-serif">{format(tx, ".3g")}</text>'
            )
        for ty in self._ticks(*self._ylim):
            py = self._py(ty)
            parts.append(f'<line x1="{MARGIN_L - 5}" y1="{_fmt(py)}" x2="{MARGIN_L}" y2="{_fmt(py)}" stroke="black"/>')
            parts.append(
                f'<text x="{MARGIN_L - 8}" y="{_fmt(py + 4)}" text-anchor="end" font-size="11" '
                f'font-family="sans-serif">{format(ty, ".3g")}</text>'
            )
        parts.append(
            f'<text x="{(MARGIN_L + WIDTH - MARGIN_R) // 2}" y="{HEIGHT - 12}" text-anchor="middle" '
            f'font-size="13" font-family="sans-serif">{self.xlabel}</text>'
        )
        parts.append(
            f'<text x="18" y="{(MARGIN_T + HEIGHT - MARGIN_B) // 2}" text-anchor="middle" '
            f'font-size="13" font-family="sans-serif" transform="rotate(-90 18 '
            f'{(MARGIN_T + HEIGHT - MARGIN_B) // 2})">{self.ylabel}</text>'
        )
        parts.extend(self.elements)
        for i, (label, color) in enumerate(self.legend):
            y = MARGIN_T + 14 + 16 * i
            parts.append(f'<rect x="{WIDTH - 170}" y="{y - 9}" width="10" height="10" fill="{color}"/>')
            parts.append(
                f'<text x="{WIDTH - 155}" y="{y}" font-size="12" font-family="sans-serif">{label}</text>'
            )
        parts.append("</svg>")
        return "\n".join(parts) + "\n"

    def write(self, path: Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.render(), encoding="utf-8")
        os.replace(tmp, path)
