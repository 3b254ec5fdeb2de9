"""Iterative visual-evidence augmentation.

Starting from a referable image, the loop repeatedly explains the
current prediction, binarises the map with Otsu, inpaints the selected
pixels and re-predicts, until the image is no longer referable or the
iteration budget is spent.  The per-iteration maps are fused with
weights ``exp(-alpha * t)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .attribution import AttributionConfig, ExplanationMap, explain
from .classifier import Model, predict
from .errors import FullCoverageError, ShapeError
from .imaging import binarize_otsu, inpaint, normalize_minmax

REASONS = ("below_threshold", "max_iterations", "empty_mask", "initially_nonreferable",
           "full_coverage")


@dataclass(frozen=True)
class AugmentConfig:
    th_pred: Optional[float] = None
    T_max: int = 20
    alpha: float = 0.6
    r_inp: int = 3
    attribution: AttributionConfig = field(default_factory=AttributionConfig)
    per_iteration_normalize: str = "off"

    def __post_init__(self):
        if self.T_max < 1:
            raise ValueError("T_max must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.per_iteration_normalize not in ("off", "minmax"):
            raise ValueError("per_iteration_normalize must be 'off' or 'minmax'")


@dataclass
class IterationRecord:
    t: int
    y_hat: float
    th_bin: float
    mask_pixels: int
    map_min: float
    map_max: float


@dataclass
class IterationTrace:
    iterations: list = field(default_factory=list)
    reason: str = ""
    final_y_hat: float = float("nan")
    alpha: float = 0.6
    T_max: int = 20
    th_pred: float = 0.0

    def __len__(self):
        return len(self.iterations)

    def to_dict(self):
        return {
            "iterations": [asdict(r) for r in self.iterations],
            "reason": self.reason,
            "final_y_hat": self.final_y_hat,
            "alpha": self.alpha,
            "T_max": self.T_max,
            "th_pred": self.th_pred,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


@dataclass
class AugmentResult:
    initial_map: ExplanationMap
    augmented_map: ExplanationMap
    trace: IterationTrace
    final_image: np.ndarray
    maps: list
    masks: list


def iteration_weights(n, alpha=0.6):
    """Fusion weights ``exp(-alpha * t)`` for t = 1..n."""
    return np.exp(-alpha * np.arange(1, n + 1))


def combine_maps(maps, alpha=0.6, shape=None):
    """Exponentially decaying sum of maps indexed from t = 1.

    An empty sequence gives a zero map of ``shape``.
    """
    grids = [m.grid if isinstance(m, ExplanationMap) else np.asarray(m, dtype=np.float64) for m in maps]
    if not grids:
        if shape is None:
            raise ValueError("combine_maps needs a shape for an empty sequence")
        return np.zeros(shape)
    first = grids[0].shape
    for g in grids:
        if g.shape != first:
            raise ShapeError(f"map shapes differ: {first} vs {g.shape}")
    out = np.zeros(first)
    for w, g in zip(iteration_weights(len(grids), alpha), grids):
        out += w * g
    return out


def augment(image, model: Model, cfg: AugmentConfig = AugmentConfig()) -> AugmentResult:
    """Run the augmentation loop on a preprocessed image."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != model.net.input_shape:
        raise ShapeError(f"image shape {image.shape} does not match model input {model.net.input_shape}")
    th_pred = model.th_pred if cfg.th_pred is None else cfg.th_pred
    method = cfg.attribution.method
    current = image.copy()
    y = predict(model, current)
    trace = IterationTrace(alpha=cfg.alpha, T_max=cfg.T_max, th_pred=th_pred)
    maps, masks = [], []

    if y < th_pred:
        trace.reason = "initially_nonreferable"
    t = 1
    while y >= th_pred and t < cfg.T_max:
        m = explain(model, current, cfg.attribution)
        binar = binarize_otsu(m.grid)
        maps.append(m)
        masks.append(binar.mask)
        trace.iterations.append(IterationRecord(t, float(y), float(binar.th_bin), int(binar.mask.sum()),
                                                float(m.grid.min()), float(m.grid.max())))
        if binar.degenerate or not binar.mask.any():
            trace.reason = "empty_mask"
            break
        try:
            current = inpaint(current, binar.mask, cfg.r_inp)
        except FullCoverageError:
            trace.reason = "full_coverage"
            break
        y = predict(model, current)
        t += 1
    if not trace.reason:
        trace.reason = "below_threshold" if y < th_pred else "max_iterations"
    trace.final_y_hat = float(y)

    grids = [m.grid for m in maps]
    if cfg.per_iteration_normalize == "minmax":
        grids = [normalize_minmax(g) for g in grids]
    fused = combine_maps(grids, cfg.alpha, shape=image.shape[:2])
    layer = maps[0].layer if maps else None
    initial = maps[0] if maps else ExplanationMap(np.zeros(image.shape[:2]), method, layer)
    return AugmentResult(
        initial_map=initial,
        augmented_map=ExplanationMap(fused, method, layer, cfg.per_iteration_normalize == "minmax"),
        trace=trace,
        final_image=current if current is not image else current.copy(),
        maps=maps,
        masks=masks,
    )
