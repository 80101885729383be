"""Minimal deterministic SVG charts (line, grouped bar, scatter)."""

from __future__ import annotations

from html import escape
from typing import Sequence

W, H = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 64, 150, 36, 48
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")


def _n(v: float) -> str:
    s = f"{v:.2f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _label(v: float) -> str:
    if abs(v) >= 1000 or v == int(v):
        return f"{v:.0f}"
    return f"{v:.3g}"


class _Frame:
    def __init__(self, title: str, xlabel: str, ylabel: str, xr: tuple[float, float], yr: tuple[float, float]):
        self.x0, self.x1 = xr
        self.y0, self.y1 = yr
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1
        if self.y1 == self.y0:
            self.y1 = self.y0 + 1
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
            'font-family="sans-serif" font-size="11">',
            f'<rect width="{W}" height="{H}" fill="white"/>',
            f'<text x="{W / 2 - RIGHT / 2:.0f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
            f'<text x="{LEFT + (W - LEFT - RIGHT) / 2:.0f}" y="{H - 10}" text-anchor="middle">{escape(xlabel)}</text>',
            f'<text x="14" y="{TOP + (H - TOP - BOTTOM) / 2:.0f}" text-anchor="middle" '
            f'transform="rotate(-90 14 {TOP + (H - TOP - BOTTOM) / 2:.0f})">{escape(ylabel)}</text>',
            f'<line x1="{LEFT}" y1="{H - BOTTOM}" x2="{W - RIGHT}" y2="{H - BOTTOM}" stroke="black"/>',
            f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{H - BOTTOM}" stroke="black"/>',
        ]
        for t in _ticks(self.y0, self.y1):
            y = self.py(t)
            self.parts.append(f'<line x1="{LEFT - 4}" y1="{_n(y)}" x2="{LEFT}" y2="{_n(y)}" stroke="black"/>')
            self.parts.append(f'<text x="{LEFT - 6}" y="{_n(y + 4)}" text-anchor="end">{_label(t)}</text>')
        self.legend = 0

    def px(self, x: float) -> float:
        return LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)

    def py(self, y: float) -> float:
        return H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)

    def xticks(self) -> None:
        for t in _ticks(self.x0, self.x1):
            x = self.px(t)
            self.parts.append(f'<line x1="{_n(x)}" y1="{H - BOTTOM}" x2="{_n(x)}" y2="{H - BOTTOM + 4}" stroke="black"/>')
            self.parts.append(f'<text x="{_n(x)}" y="{H - BOTTOM + 16}" text-anchor="middle">{_label(t)}</text>')

    def add_legend(self, name: str, color: str, dashed: bool = False) -> None:
        y = TOP + 8 + 18 * self.legend
        x = W - RIGHT + 12
        dash = ' stroke-dasharray="5,3"' if dashed else ""
        self.parts.append(f'<line x1="{x}" y1="{y}" x2="{x + 20}" y2="{y}" stroke="{color}" stroke-width="2"{dash}/>')
        self.parts.append(f'<text x="{x + 26}" y="{y + 4}">{escape(name)}</text>')
        self.legend += 1

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _range(values: Sequence[float], zero: bool = False) -> tuple[float, float]:
    vals = [v for v in values if v is not None]
    if not vals:
        return 0.0, 1.0
    lo, hi = min(vals), max(vals)
    if zero:
        lo = min(lo, 0.0)
    return lo, hi


def line_chart(series: dict[str, tuple[Sequence[float], Sequence[float]]], title: str,
               xlabel: str, ylabel: str) -> str:
    xs = [x for s in series.values() for x in s[0]]
    ys = [y for s in series.values() for y in s[1]]
    f = _Frame(title, xlabel, ylabel, _range(xs), _range(ys, zero=True))
    f.xticks()
    for i, (name, (sx, sy)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        dashed = i % 2 == 1
        pts = " ".join(f"{_n(f.px(x))},{_n(f.py(y))}" for x, y in zip(sx, sy))
        dash = ' stroke-dasharray="5,3"' if dashed else ""
        if pts:
            f.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"{dash}/>')
        f.add_legend(name, color, dashed)
    return f.render()


def bar_chart(categories: Sequence[str], series: dict[str, Sequence[float]], title: str,
              xlabel: str, ylabel: str) -> str:
    ys = [v for vals in series.values() for v in vals]
    f = _Frame(title, xlabel, ylabel, (0.0, float(max(1, len(categories)))), _range(ys, zero=True))
    k = max(1, len(series))
    slot = (W - LEFT - RIGHT) / max(1, len(categories))
    bw = slot * 0.8 / k
    for c, cat in enumerate(categories):
        cx = LEFT + slot * (c + 0.5)
        f.parts.append(f'<text x="{_n(cx)}" y="{H - BOTTOM + 16}" text-anchor="middle">{escape(str(cat))}</text>')
    for i, (name, vals) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        for c, v in enumerate(vals):
            x = LEFT + slot * c + slot * 0.1 + bw * i
            y, y0 = f.py(v), f.py(0.0)
            f.parts.append(f'<rect x="{_n(x)}" y="{_n(min(y, y0))}" width="{_n(bw)}" '
                           f'height="{_n(abs(y0 - y))}" fill="{color}"/>')
        f.add_legend(name, color)
    return f.render()


def scatter_chart(points: Sequence[tuple[str, float, float]], title: str, xlabel: str, ylabel: str) -> str:
    """Labelled points with the parity diagonal."""
    vals = [p[1] for p in points] + [p[2] for p in points]
    lo, hi = _range(vals, zero=True)
    f = _Frame(title, xlabel, ylabel, (lo, hi), (lo, hi))
    f.xticks()
    f.parts.append(f'<line x1="{_n(f.px(lo))}" y1="{_n(f.py(lo))}" x2="{_n(f.px(hi))}" y2="{_n(f.py(hi))}" '
                   'stroke="gray" stroke-dasharray="4,4"/>')
    for i, (name, x, y) in enumerate(points):
        color = PALETTE[i % len(PALETTE)]
        f.parts.append(f'<circle cx="{_n(f.px(x))}" cy="{_n(f.py(y))}" r="5" fill="{color}"/>')
        f.add_legend(name, color)
    return f.render()
