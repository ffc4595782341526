"""Dependency-free SVG line and bar charts for the sweep reports."""

from __future__ import annotations

from typing import Mapping, Sequence
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
W, H = 820, 480
LEFT, RIGHT, TOP, BOTTOM = 70, 190, 40, 60


def _frame(title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
    ]


def _y_axis(parts: list[str], ymax: float, label: str) -> None:
    ph = H - TOP - BOTTOM
    for i in range(6):
        v = ymax * i / 5
        y = TOP + ph - ph * i / 5
        parts.append(f'<line x1="{LEFT}" x2="{W - RIGHT}" y1="{y:.1f}" y2="{y:.1f}" stroke="#ddd"/>')
        parts.append(f'<text x="{LEFT - 6}" y="{y + 4:.1f}" text-anchor="end">{v:.0f}</text>')
    parts.append(
        f'<text x="16" y="{TOP + ph / 2}" transform="rotate(-90 16 {TOP + ph / 2})" text-anchor="middle">{escape(label)}</text>'
    )


def _legend(parts: list[str], names: Sequence[str]) -> None:
    for i, name in enumerate(names):
        y = TOP + 18 * i
        colour = PALETTE[i % len(PALETTE)]
        parts.append(f'<rect x="{W - RIGHT + 15}" y="{y}" width="12" height="12" fill="{colour}"/>')
        parts.append(f'<text x="{W - RIGHT + 32}" y="{y + 10}">{escape(name)}</text>')


def line_chart(
    xs: Sequence[float],
    series: Mapping[str, Sequence[float]],
    title: str = "",
    x_label: str = "",
    y_label: str = "",
) -> str:
    parts = _frame(title)
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM
    ymax = max((max(v) for v in series.values() if len(v)), default=1) or 1
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    span = (x1 - x0) or 1.0
    _y_axis(parts, ymax, y_label)
    for i in range(6):
        v = x0 + span * i / 5
        x = LEFT + pw * i / 5
        parts.append(f'<text x="{x:.1f}" y="{H - BOTTOM + 18}" text-anchor="middle">{v:g}</text>')
    parts.append(f'<text x="{LEFT + pw / 2}" y="{H - 18}" text-anchor="middle">{escape(x_label)}</text>')
    for i, (name, ys) in enumerate(series.items()):
        pts = " ".join(
            f"{LEFT + pw * (x - x0) / span:.1f},{TOP + ph - ph * y / ymax:.1f}" for x, y in zip(xs, ys)
        )
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{PALETTE[i % len(PALETTE)]}" stroke-width="2"/>')
    _legend(parts, list(series))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def bar_chart(categories: Sequence[str], series: Mapping[str, Sequence[float]], title: str = "") -> str:
    parts = _frame(title)
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM
    ymax = max((max(v) for v in series.values() if len(v)), default=1) or 1
    _y_axis(parts, ymax, "packets")
    n, k = max(len(categories), 1), max(len(series), 1)
    slot = pw / n
    bw = slot * 0.8 / k
    for j, (name, values) in enumerate(series.items()):
        colour = PALETTE[j % len(PALETTE)]
        for i, v in enumerate(values):
            h = ph * v / ymax
            x = LEFT + slot * i + slot * 0.1 + bw * j
            parts.append(f'<rect x="{x:.1f}" y="{TOP + ph - h:.1f}" width="{bw:.1f}" height="{h:.1f}" fill="{colour}"/>')
    for i, cat in enumerate(categories):
        x = LEFT + slot * (i + 0.5)
        parts.append(
            f'<text x="{x:.1f}" y="{H - BOTTOM + 14}" text-anchor="end" transform="rotate(-30 {x:.1f} {H - BOTTOM + 14})">{escape(cat)}</text>'
        )
    _legend(parts, list(series))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
