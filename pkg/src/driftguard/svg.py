"""Tiny dependency-free SVG emitters for the report artifacts.

Output is deterministic: coordinates are rounded to two decimals and no
timestamps or ids are embedded.
"""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

W, H, PAD = 480, 320, 40


def _doc(body: list[str], title: str) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">'
    )
    return "\n".join([head, f'<text x="{W / 2}" y="16" text-anchor="middle">{escape(title)}</text>', *body, "</svg>", ""])


def _axes() -> list[str]:
    return [
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
    ]


def _sx(u: float) -> float:
    return round(PAD + u * (W - 2 * PAD), 2)


def _sy(v: float) -> float:
    return round(H - PAD - v * (H - 2 * PAD), 2)


def reliability(confidence: Sequence[float], accuracy: Sequence[float], counts: Sequence[int], title="Reliability") -> str:
    """Per-bin accuracy against mean confidence, with the identity diagonal."""
    body = _axes()
    body.append(f'<line x1="{_sx(0)}" y1="{_sy(0)}" x2="{_sx(1)}" y2="{_sy(1)}" stroke="grey" stroke-dasharray="4"/>')
    pts = [(c, a) for c, a, n in zip(confidence, accuracy, counts) if n > 0]
    if pts:
        path = " ".join(f"{_sx(c)},{_sy(a)}" for c, a in pts)
        body.append(f'<polyline points="{path}" fill="none" stroke="steelblue" stroke-width="2"/>')
        body += [f'<circle cx="{_sx(c)}" cy="{_sy(a)}" r="3" fill="steelblue"/>' for c, a in pts]
    body.append(f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle">confidence</text>')
    body.append(f'<text x="12" y="{H / 2}" transform="rotate(-90 12 {H / 2})" text-anchor="middle">accuracy</text>')
    return _doc(body, title)


def timeline(values: Sequence[float | None], closed: Sequence[bool], lo: float, hi: float, ymax: float, title="Entropy") -> str:
    """EMA entropy per micro-batch; closed-gate batches shaded, gate band dashed."""
    body = _axes()
    n = max(len(values), 1)
    step = 1.0 / n
    for k, shut in enumerate(closed):
        if shut:
            body.append(
                f'<rect x="{_sx(k * step)}" y="{PAD}" width="{round(step * (W - 2 * PAD), 2)}" '
                f'height="{H - 2 * PAD}" fill="mistyrose"/>'
            )
    for bound in (lo, hi):
        y = _sy(bound / ymax)
        body.append(f'<line x1="{PAD}" y1="{y}" x2="{W - PAD}" y2="{y}" stroke="grey" stroke-dasharray="4"/>')
    points = [(k, v) for k, v in enumerate(values) if v is not None]
    if points:
        path = " ".join(f"{_sx((k + 0.5) * step)},{_sy(v / ymax)}" for k, v in points)
        body.append(f'<polyline points="{path}" fill="none" stroke="darkred" stroke-width="1.5"/>')
    body.append(f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle">micro-batch</text>')
    return _doc(body, title)


def heatmap(matrix: Sequence[Sequence[float]], labels: Sequence[str], title="Confusion") -> str:
    """Row-normalized matrix as grey cells, true stage on rows."""
    n = len(labels)
    cell = (H - 2 * PAD) / max(n, 1)
    x0 = (W - n * cell) / 2
    body = []
    for i, row in enumerate(matrix):
        for j, v in enumerate(row):
            shade = int(round(255 * (1 - min(max(float(v), 0.0), 1.0))))
            x, y = round(x0 + j * cell, 2), round(PAD + i * cell, 2)
            body.append(f'<rect x="{x}" y="{y}" width="{round(cell, 2)}" height="{round(cell, 2)}" fill="rgb({shade},{shade},{shade})"/>')
            ink = "white" if shade < 128 else "black"
            body.append(
                f'<text x="{round(x + cell / 2, 2)}" y="{round(y + cell / 2 + 4, 2)}" text-anchor="middle" fill="{ink}">{float(v):.2f}</text>'
            )
    for k, name in enumerate(labels):
        body.append(f'<text x="{round(x0 - 6, 2)}" y="{round(PAD + (k + 0.5) * cell + 4, 2)}" text-anchor="end">{escape(name)}</text>')
        body.append(f'<text x="{round(x0 + (k + 0.5) * cell, 2)}" y="{round(PAD - 4, 2)}" text-anchor="middle">{escape(name)}</text>')
    return _doc(body, title)
