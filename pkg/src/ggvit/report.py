"""Plain-text tables and an SVG heatmap for the evaluation outputs."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def text_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    def fmt(cells):
        return "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines += [fmt(r) for r in rows]
    return "\n".join(lines)


def matrix_table(qualities: list[int], accuracy: np.ndarray) -> str:
    headers = ["train\\test"] + [f"q{q}" for q in qualities]
    rows = [[f"q{qi}"] + [f"{accuracy[i][j]:.2f}" for j in range(len(qualities))]
            for i, qi in enumerate(qualities)]
    return text_table(headers, rows)


def proportions_table(rows: dict[str, np.ndarray]) -> str:
    headers = ["train/test", "X0", "X1", "X2", "X3", "X4"]
    body = [[name] + [f"{v:.2f}" for v in shares] for name, shares in rows.items()]
    return text_table(headers, body)


def _heat_color(v: float) -> str:
    """0..1 -> blue-to-red hex ramp."""
    v = min(max(v, 0.0), 1.0)
    r = int(round(40 + 200 * v))
    b = int(round(240 - 200 * v))
    g = int(round(60 + 60 * (1 - abs(2 * v - 1))))
    return f"#{r:02x}{g:02x}{b:02x}"


def svg_heatmap(path: str | Path, qualities: list[int], accuracy: np.ndarray,
                title: str = "accuracy (%)") -> None:
    """Deterministic standalone SVG: one cell per train/test quality pair."""
    n = len(qualities)
    cell, margin, top = 80, 70, 40
    width = margin + n * cell + 20
    height = top + margin // 2 + n * cell + 30
    lo, hi = float(accuracy.min()), float(accuracy.max())
    span = (hi - lo) or 1.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{margin}" y="20" font-family="monospace" font-size="14">{title}</text>',
    ]
    for j, q in enumerate(qualities):
        x = margin + j * cell + cell // 2
        parts.append(f'<text x="{x}" y="{top}" font-family="monospace" font-size="12" '
                     f'text-anchor="middle">test q{q}</text>')
    for i, qi in enumerate(qualities):
        y = top + 10 + i * cell + cell // 2
        parts.append(f'<text x="{margin - 8}" y="{y + 4}" font-family="monospace" '
                     f'font-size="12" text-anchor="end">train q{qi}</text>')
        for j in range(n):
            v = float(accuracy[i][j])
            x = margin + j * cell
            parts.append(
                f'<rect x="{x}" y="{top + 10 + i * cell}" width="{cell - 2}" '
                f'height="{cell - 2}" fill="{_heat_color((v - lo) / span)}"/>')
            parts.append(
                f'<text x="{x + cell // 2}" y="{y + 4}" font-family="monospace" '
                f'font-size="13" text-anchor="middle" fill="#ffffff">{v:.1f}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
