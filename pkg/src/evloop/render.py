"""Heatmap overlays for human inspection.

A map is min-max normalised, looked up in a fixed 256-entry colour
table and alpha-blended at 0.5 over the grayscale image.
"""

from __future__ import annotations

import numpy as np

from .imaging import normalize_minmax, quantize, resize_bilinear
from .synthetic import to_uint8


def _build_table():
    # piecewise-linear blue -> cyan -> yellow -> red, quantised to 8 bits
    x = np.arange(256) / 255.0
    r = np.clip(1.5 - np.abs(4 * x - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * x - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * x - 1), 0, 1)
    return np.round(np.stack([r, g, b], axis=1) * 255).astype(np.uint8)


COLOR_TABLE = _build_table()
ALPHA = 0.5


def colorize(grid):
    """(H, W) map -> (H, W, 3) uint8 through :data:`COLOR_TABLE`."""
    return COLOR_TABLE[quantize(normalize_minmax(grid))]


def overlay(image, grid):
    """Blend the colourised map over the grayscale version of ``image``."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != np.shape(grid):
        grid = resize_bilinear(np.asarray(grid, dtype=np.float64), image.shape[:2])
    gray = image.mean(axis=-1) if image.ndim == 3 else image
    gray8 = to_uint8(gray).astype(np.float64)[..., None]
    out = ALPHA * colorize(grid).astype(np.float64) + (1 - ALPHA) * gray8
    return np.round(out).astype(np.uint8)


def side_by_side(image, grids, gap=4):
    """The image followed by one overlay per map, separated by white gaps."""
    panels = [to_uint8(np.asarray(image, dtype=np.float64))]
    if panels[0].ndim == 2:
        panels[0] = np.repeat(panels[0][..., None], 3, axis=2)
    panels += [overlay(image, g) for g in grids]
    h = panels[0].shape[0]
    sep = np.full((h, gap, 3), 255, np.uint8)
    row = [panels[0]]
    for p in panels[1:]:
        row += [sep, p]
    return np.concatenate(row, axis=1)
