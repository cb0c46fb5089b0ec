"""Attention heatmaps: one row per decoder step, one column per encoder frame.

Soft attention shows its weights, hard attention a single cell per row,
segmental attention the weights over each segment. Gold segment boundaries,
mapped to encoder frames, are drawn as vertical lines.
"""

from __future__ import annotations

import math
from html import escape

import numpy as np

from .scoring import teacher_forced
from .search import forced_align


def attention_matrix(model, record, align_beam=None):
    """Teacher-forced context weights ``[N+1, T']`` for one record.

    Latent models are run on the forced alignment of the reference labels.
    Returns ``(weights, targets, alignment)``.
    """
    y = list(record.labels) + [model.eos]
    enc = model.encode([record.features])
    alignment = None
    if model.variant.latent:
        alignment, _ = forced_align(model, record.features, y, beam_size=align_beam, enc=enc)
    steps = teacher_forced(model, enc, [y], None if alignment is None else [alignment])
    weights = np.stack([st.weights[0] for st in steps])
    return weights, y, alignment


def encoder_boundaries(bounds, total_pool):
    """Gold segment ends (1-based input frames) -> last encoder frame of each segment."""
    if not bounds:
        return []
    return [math.ceil(b / total_pool) for b in bounds]


def _colour(w):
    # white -> dark blue
    w = float(min(1.0, max(0.0, w)))
    return (int(round(255 * (1 - 0.85 * w))), int(round(255 * (1 - 0.75 * w))), int(round(255 * (1 - 0.35 * w))))


def to_svg(weights, row_labels=None, boundaries=None, cell=16, title=None):
    """Render ``weights`` as an SVG heatmap. Zero cells are left blank."""
    weights = np.asarray(weights)
    n, T = weights.shape
    left, top = 40, 24 if title else 8
    width, height = left + T * cell + 8, top + n * cell + 24
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="monospace" font-size="{cell * 0.6:.1f}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{left}" y="16">{escape(title)}</text>')
    for i in range(n):
        y = top + i * cell
        if row_labels is not None:
            out.append(f'<text x="2" y="{y + cell * 0.75:.1f}">{escape(str(row_labels[i]))}</text>')
        for t in range(T):
            w = weights[i, t]
            if w <= 0:
                continue
            r, g, b = _colour(w)
            out.append(
                f'<rect class="cell" data-row="{i}" data-col="{t + 1}" x="{left + t * cell}" y="{y}" '
                f'width="{cell}" height="{cell}" fill="rgb({r},{g},{b})"><title>{w:.3f}</title></rect>'
            )
    out.append(
        f'<rect x="{left}" y="{top}" width="{T * cell}" height="{n * cell}" fill="none" stroke="#888"/>'
    )
    for t_end in boundaries or []:
        x = left + t_end * cell
        out.append(
            f'<line class="boundary" x1="{x}" y1="{top}" x2="{x}" y2="{top + n * cell}" '
            f'stroke="#d62728" stroke-width="1.5" stroke-dasharray="3,2"/>'
        )
    for t in range(0, T, 5):
        out.append(f'<text x="{left + t * cell}" y="{top + n * cell + 16}">{t + 1}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def to_ppm(weights, boundaries=None, cell=8):
    """Binary PPM (P6) fallback of the same heatmap."""
    weights = np.asarray(weights)
    n, T = weights.shape
    img = np.full((n * cell, T * cell, 3), 255, dtype=np.uint8)
    for i in range(n):
        for t in range(T):
            if weights[i, t] > 0:
                img[i * cell : (i + 1) * cell, t * cell : (t + 1) * cell] = _colour(weights[i, t])
    for t_end in boundaries or []:
        x = min(t_end * cell, T * cell - 1)
        img[:, x] = (214, 39, 40)
    header = f"P6\n{T * cell} {n * cell}\n255\n".encode("ascii")
    return header + img.tobytes()
