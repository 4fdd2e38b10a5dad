"""Minimal SVG scatter plot for 2-D embeddings (no plotting dependency)."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

SIZE = 800
MARGIN = 60
CLASS_COLORS = {0: "#2ca02c", 1: "#d62728"}
TRACE_COLOR = "#87cefa"
CLASS_NAMES = {0: "class 0", 1: "class 1"}


def scatter_svg(coords, source, labels, title: str = "Latent embedding") -> str:
    """One ``<circle>`` per row; training rows colored by class, trace rows light blue."""
    coords = np.asarray(coords, dtype=np.float64)
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    inner = SIZE - 2 * MARGIN
    px = MARGIN + (coords[:, 0] - lo[0]) / span[0] * inner
    py = SIZE - MARGIN - (coords[:, 1] - lo[1]) / span[1] * inner

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">',
        f'<rect width="{SIZE}" height="{SIZE}" fill="white"/>',
        f'<text x="{SIZE // 2}" y="30" text-anchor="middle" font-family="sans-serif" font-size="18">{escape(title)}</text>',
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{inner}" height="{inner}" fill="none" stroke="#999"/>',
    ]
    trace_pts = []
    for x, y, src, lab in zip(px, py, source, labels):
        if src == "trace":
            trace_pts.append((x, y))
            color, r = TRACE_COLOR, 4
        else:
            color, r = CLASS_COLORS.get(int(lab), "#555"), 5
        out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r}" fill="{color}" data-source="{src}"/>')
    if len(trace_pts) > 1:
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in trace_pts)
        out.append(f'<polyline points="{pts}" fill="none" stroke="{TRACE_COLOR}" stroke-width="1.5"/>')

    legend = [(CLASS_COLORS[0], CLASS_NAMES[0]), (CLASS_COLORS[1], CLASS_NAMES[1])]
    if trace_pts:
        legend.append((TRACE_COLOR, "navigation trace"))
    for i, (color, text) in enumerate(legend):
        y = MARGIN + 20 + 22 * i
        out.append(f'<circle cx="{MARGIN + 15}" cy="{y}" r="6" fill="{color}"/>')
        out.append(f'<text x="{MARGIN + 28}" y="{y + 5}" font-family="sans-serif" font-size="14">{escape(text)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
