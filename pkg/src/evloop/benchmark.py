"""Weakly-supervised localisation benchmark: initial vs augmented maps."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .attribution import AttributionConfig, explain
from .augmentation import AugmentConfig, augment
from .classifier import Model, predict
from .evaluation import LesionReference, detection_radius, froc_aggregate, froc_per_image
from .imaging import preprocess, warp_mask
from .synthetic import LESION_TYPES

log = logging.getLogger(__name__)


def thread_count():
    try:
        return max(1, int(os.environ.get("EVLOOP_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class ImageOutcome:
    index: int
    prediction: float
    referable: bool
    trace: object = None
    detections: dict = field(default_factory=dict)  # variant -> type -> list
    lesions: dict = field(default_factory=dict)     # type -> count


@dataclass
class LocalizationReport:
    method: str
    radius: int
    fp_rate: float
    n_images: int
    n_referable: int
    curves: dict                       # variant -> type -> FrocCurve
    outcomes: list

    def se_table(self):
        return {v: {k: c.se_at_10fp for k, c in per.items()} for v, per in self.curves.items()}

    def mean_se(self, variant):
        return float(np.mean([c.se_at_10fp for c in self.curves[variant].values()]))

    def relative_change(self):
        init, aug = self.mean_se("initial"), self.mean_se("augmented")
        return (aug - init) / init if init > 0 else float("inf") if aug > 0 else 0.0

    def summary(self):
        out = {
            "method": self.method,
            "r": self.radius,
            "fp_rate": self.fp_rate,
            "n_images": self.n_images,
            "n_referable": self.n_referable,
            "se_at_10fp": self.se_table(),
            "n_lesions": {k: c.n_lesions for k, c in self.curves["initial"].items()},
        }
        if "augmented" in self.curves:
            out["mean_se_at_10fp"] = {"initial": self.mean_se("initial"), "augmented": self.mean_se("augmented")}
            out["relative_change"] = self.relative_change()
            out["trace_lengths"] = [len(o.trace) for o in self.outcomes if o.referable and o.trace is not None]
        else:
            out["mean_se_at_10fp"] = {"initial": self.mean_se("initial")}
        return out


def _evaluate_one(i, image, masks, model, cfg, do_augment, radius, preprocessed):
    if preprocessed:
        x, geom = np.asarray(image, dtype=np.float64), None
    else:
        x, geom = preprocess(image, model.preprocessing, return_geometry=True)
    y = predict(model, x)
    out = ImageOutcome(i, float(y), bool(y >= model.th_pred))
    if not out.referable:
        return out
    if do_augment:
        res = augment(x, model, cfg)
        maps = {"initial": res.initial_map.grid, "augmented": res.augmented_map.grid}
        out.trace = res.trace
    else:
        maps = {"initial": explain(model, x, cfg.attribution).grid}
    for kind in LESION_TYPES:
        mask = masks[kind] if geom is None else warp_mask(masks[kind], geom)
        ref = LesionReference.from_mask(mask)
        out.lesions[kind] = ref.count
        for variant, grid in maps.items():
            out.detections.setdefault(variant, {})[kind] = froc_per_image(grid, ref, radius)
    return out


def evaluate_localization(model: Model, images, masks, method="guided_backprop", augment_maps=True,
                          radius_pct=1.4, fp_rate=10.0, aug_config: AugmentConfig | None = None,
                          preprocessed=False, threads=None, per_image=False) -> LocalizationReport:
    """FROC per lesion type over the images the model calls referable.

    ``masks`` is a list of ``{lesion_type: bool mask}`` in raw image
    space (or model space with ``preprocessed``).
    """
    cfg = aug_config or AugmentConfig()
    att = cfg.attribution
    if att.method != method:
        att = replace(att, method=method)
    if method in ("grad_cam", "guided_grad_cam") and att.grad_cam_layer is None:
        att = replace(att, grad_cam_layer=model.preset.grad_cam_layer)
    cfg = replace(cfg, attribution=att)
    radius = detection_radius(model.preset.input_size, radius_pct)
    args = [(i, im, mk, model, cfg, augment_maps, radius, preprocessed)
            for i, (im, mk) in enumerate(zip(images, masks))]
    workers = threads or thread_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outcomes = list(pool.map(lambda a: _evaluate_one(*a), args))
    else:
        outcomes = [_evaluate_one(*a) for a in args]
    ref = [o for o in outcomes if o.referable]
    if not ref:
        raise ValueError("no image was predicted referable; nothing to localise")
    variants = ("initial", "augmented") if augment_maps else ("initial",)
    curves = {}
    for v in variants:
        curves[v] = {}
        for kind in LESION_TYPES:
            counts = [o.lesions[kind] for o in ref]
            if sum(counts) == 0:
                log.warning("no %s lesions among referable images", kind)
                continue
            curves[v][kind] = froc_aggregate([o.detections[v][kind] for o in ref], counts, fp_rate,
                                             radius, per_image=per_image)
    return LocalizationReport(method, radius, fp_rate, len(outcomes), len(ref), curves, outcomes)
