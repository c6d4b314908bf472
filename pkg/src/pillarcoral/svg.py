"""Tiny deterministic SVG plots for the stats bundle."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .errors import IoError

WIDTH, HEIGHT, MARGIN = 480, 320, 40


def _doc(body: list[str], title: str) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">')
    t = f'<text x="{WIDTH / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>'
    return "\n".join([head, t, *body, "</svg>"]) + "\n"


def _save(text: str, path) -> Path:
    path = Path(path)
    try:
        path.write_text(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def bar_chart(labels: Sequence[str], values: Sequence[float], title: str, path) -> Path:
    n = max(len(values), 1)
    top = max([float(v) for v in values] + [1e-12])
    slot = (WIDTH - 2 * MARGIN) / n
    body = []
    for i, (lab, v) in enumerate(zip(labels, values)):
        h = (HEIGHT - 2 * MARGIN) * float(v) / top
        x = MARGIN + i * slot + 0.1 * slot
        y = HEIGHT - MARGIN - h
        body.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{0.8 * slot:.2f}" height="{h:.2f}" fill="#4a7ab5"/>')
        body.append(f'<text x="{x + 0.4 * slot:.2f}" y="{HEIGHT - MARGIN + 14}" text-anchor="middle" '
                    f'font-size="11">{escape(str(lab))}</text>')
        body.append(f'<text x="{x + 0.4 * slot:.2f}" y="{y - 3:.2f}" text-anchor="middle" font-size="10">{v:g}</text>')
    return _save(_doc(body, title), path)


def heatmap(values: np.ndarray, title: str, path) -> Path:
    """Rows are drawn bottom-up so row 0 (nearest range bin) sits at the bottom."""
    values = np.asarray(values, dtype=np.float64)
    rows, cols = values.shape
    top = values.max() if values.size and values.max() > 0 else 1.0
    cw = (WIDTH - 2 * MARGIN) / cols
    ch = (HEIGHT - 2 * MARGIN) / rows
    body = []
    for i in range(rows):
        for j in range(cols):
            shade = int(round(255 * (1.0 - values[i, j] / top)))
            y = HEIGHT - MARGIN - (i + 1) * ch
            body.append(f'<rect x="{MARGIN + j * cw:.2f}" y="{y:.2f}" width="{cw:.2f}" height="{ch:.2f}" '
                        f'fill="rgb({shade},{shade},255)"/>')
    return _save(_doc(body, title), path)


def scatter(xs: Sequence[float], ys: Sequence[float], groups: Sequence[str], title: str, path) -> Path:
    palette = ["#c0392b", "#2471a3", "#229954", "#7d3c98"]
    names = sorted(set(groups))
    xmax = max(list(xs) + [1e-12])
    ymax = max(list(ys) + [1e-12])
    body = [f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
            f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>']
    for x, y, g in zip(xs, ys, groups):
        px = MARGIN + (WIDTH - 2 * MARGIN) * x / xmax
        py = HEIGHT - MARGIN - (HEIGHT - 2 * MARGIN) * y / ymax
        body.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="2" fill="{palette[names.index(g) % len(palette)]}"/>')
    for k, g in enumerate(names):
        body.append(f'<text x="{WIDTH - MARGIN}" y="{MARGIN + 14 * k}" text-anchor="end" font-size="11" '
                    f'fill="{palette[k % len(palette)]}">{escape(g)}</text>')
    return _save(_doc(body, title), path)
