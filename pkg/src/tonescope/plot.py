"""Hand-written SVG of per-epoch training curves.

Everything is derived from ``history.csv`` rows so a plot can be regenerated
from a run directory alone. Coordinates are printed with two decimals, which
keeps the output byte-stable.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

from tonescope.fairness import DEFAULT_EPSILON, UNDEFINED, independence_band

WIDTH, HEIGHT = 720, 400
LEFT, RIGHT, TOP, BOTTOM = 60, 150, 30, 50
Y_MAX = 1.3
SERIES = (
    ("train_loss", "training loss", "#444444"),
    ("tone_di", "tone DI", "#c0392b"),
    ("control_di", "control DI", "#2471a3"),
)


def _value(text: str) -> Optional[float]:
    if text is None or text == "" or text == UNDEFINED:
        return None
    return float(text)


def _fmt(v: float) -> str:
    return f"{v:.2f}"


class _Axes:
    def __init__(self, n_epochs: int) -> None:
        self.lo, self.hi = 1, max(n_epochs, 2)
        self.w = WIDTH - LEFT - RIGHT
        self.h = HEIGHT - TOP - BOTTOM

    def x(self, epoch: float) -> float:
        return LEFT + (epoch - self.lo) / (self.hi - self.lo) * self.w

    def y(self, value: float) -> float:
        v = min(max(value, 0.0), Y_MAX)
        return TOP + (1.0 - v / Y_MAX) * self.h


def _segments(points):
    """Split at undefined values so gaps are not bridged."""
    seg = []
    for p in points:
        if p is None:
            if seg:
                yield seg
            seg = []
        else:
            seg.append(p)
    if seg:
        yield seg


def _ticks(hi: int) -> list[int]:
    step = 1
    for s in (1, 2, 5, 10, 20, 25, 50, 100, 200, 250, 500):
        step = s
        if hi / s <= 10:
            break
    ticks = [1] + list(range(step, hi + 1, step))
    return sorted(set(ticks))


def render_curves(rows: Sequence[dict], epsilon: float = DEFAULT_EPSILON, title: str = "") -> str:
    """SVG text for loss, tone DI and control DI against epoch."""
    epochs = [int(r["epoch"]) for r in rows]
    ax = _Axes(max(epochs) if epochs else 1)
    lo, hi = independence_band(epsilon)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{LEFT}" y="{_fmt(ax.y(hi))}" width="{ax.w}" height="{_fmt(ax.y(lo) - ax.y(hi))}" '
        f'fill="#2ecc71" fill-opacity="0.15"/>',
    ]
    for bound in (lo, hi):
        out.append(
            f'<line x1="{LEFT}" y1="{_fmt(ax.y(bound))}" x2="{LEFT + ax.w}" y2="{_fmt(ax.y(bound))}" '
            f'stroke="#27ae60" stroke-dasharray="4 3"/>'
        )
        out.append(
            f'<text x="{LEFT + ax.w + 4}" y="{_fmt(ax.y(bound) + 4)}" fill="#27ae60">{bound:.2f}</text>'
        )
    # axes
    out.append(f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ax.h}" stroke="black"/>')
    out.append(f'<line x1="{LEFT}" y1="{TOP + ax.h}" x2="{LEFT + ax.w}" y2="{TOP + ax.h}" stroke="black"/>')
    for i in range(14):
        v = i / 10
        y = _fmt(ax.y(v))
        out.append(f'<line x1="{LEFT - 4}" y1="{y}" x2="{LEFT}" y2="{y}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 8}" y="{_fmt(ax.y(v) + 4)}" text-anchor="end">{v:.1f}</text>')
    for e in _ticks(ax.hi):
        x = _fmt(ax.x(e))
        out.append(f'<line x1="{x}" y1="{TOP + ax.h}" x2="{x}" y2="{TOP + ax.h + 4}" stroke="black"/>')
        out.append(f'<text x="{x}" y="{TOP + ax.h + 16}" text-anchor="middle">{e}</text>')
    out.append(f'<text x="{LEFT + ax.w / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle">epoch</text>')
    if title:
        out.append(f'<text x="{LEFT}" y="{TOP - 10}" font-size="13">{_escape(title)}</text>')

    for i, (key, label, colour) in enumerate(SERIES):
        pts = []
        for r, e in zip(rows, epochs):
            v = _value(r.get(key))
            pts.append(None if v is None else (ax.x(e), ax.y(v)))
        for seg in _segments(pts):
            if len(seg) == 1:
                cx, cy = seg[0]
                out.append(f'<circle cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="2" fill="{colour}"/>')
            else:
                coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in seg)
                out.append(f'<polyline points="{coords}" fill="none" stroke="{colour}" stroke-width="1.5"/>')
        ly = TOP + 10 + 18 * i
        lx = LEFT + ax.w + 40
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 22}" y="{ly + 4}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def write_curves(history_csv_path, svg_path=None, epsilon: float = DEFAULT_EPSILON) -> Path:
    """Render ``curves.svg`` next to (or at ``svg_path`` from) a history.csv."""
    from tonescope.trainer import read_history_csv

    src = Path(history_csv_path)
    dest = Path(svg_path) if svg_path is not None else src.with_name("curves.svg")
    dest.write_text(render_curves(read_history_csv(src), epsilon), encoding="utf-8")
    return dest
