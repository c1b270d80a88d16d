"""Minimal self-contained log-log SVG plots (polylines, axes, guide line)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

W, H = 640, 440
LEFT, RIGHT, TOP, BOTTOM = 70, 20, 40, 50
COLORS = ("#1f4e9c", "#c0392b", "#2e7d32", "#6a1b9a")


@dataclass
class Series:
    x: np.ndarray
    y: np.ndarray
    label: str
    dashed: bool = False


def _decades(lo, hi):
    return list(range(math.floor(lo), math.ceil(hi) + 1))


def loglog(path, series: list[Series], title: str, xlabel: str, ylabel: str) -> None:
    """Write a log-log plot of positive data to ``path``."""
    pts = [(np.log10(s.x[(s.x > 0) & (s.y > 0)]), np.log10(s.y[(s.x > 0) & (s.y > 0)]))
           for s in series]
    xs = np.concatenate([p[0] for p in pts])
    ys = np.concatenate([p[1] for p in pts])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM

    def px(v):
        return LEFT + (v - x0) / (x1 - x0) * pw

    def py(v):
        return TOP + (y1 - v) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="22" text-anchor="middle" font-size="14">{_esc(title)}</text>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for d in _decades(x0, x1):
        if x0 <= d <= x1:
            out.append(f'<line x1="{px(d):.2f}" y1="{TOP + ph}" x2="{px(d):.2f}" '
                       f'y2="{TOP + ph + 5}" stroke="black"/>')
            out.append(f'<text x="{px(d):.2f}" y="{TOP + ph + 18}" '
                       f'text-anchor="middle">1e{d}</text>')
    for d in _decades(y0, y1):
        if y0 <= d <= y1:
            out.append(f'<line x1="{LEFT - 5}" y1="{py(d):.2f}" x2="{LEFT}" '
                       f'y2="{py(d):.2f}" stroke="black"/>')
            out.append(f'<text x="{LEFT - 8}" y="{py(d) + 4:.2f}" '
                       f'text-anchor="end">1e{d}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.1f}" y="{H - 10}" '
               f'text-anchor="middle">{_esc(xlabel)}</text>')
    out.append(f'<text x="16" y="{TOP + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {TOP + ph / 2:.1f})">{_esc(ylabel)}</text>')
    for i, ((lx, ly), s) in enumerate(zip(pts, series)):
        color = COLORS[i % len(COLORS)]
        coords = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(lx, ly))
        dash = ' stroke-dasharray="6,4"' if s.dashed else ""
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                   f'stroke-width="1.5"{dash}/>')
        out.append(f'<text x="{LEFT + pw - 8}" y="{TOP + 18 + 16 * i}" text-anchor="end" '
                   f'fill="{color}">{_esc(s.label)}</text>')
    out.append("</svg>")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(out) + "\n")


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
