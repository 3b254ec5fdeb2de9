"""Visual attribution: saliency, guided backprop, integrated gradients,
Grad-CAM and guided Grad-CAM.

Each method maps ``(model, image)`` to a nonnegative (H, W) map.  A
model is anything with a ``net`` attribute holding a
:class:`~evloop.autodiff.Network`, or the network itself.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Network
from .errors import CheckpointError, NumericError, ShapeError
from .imaging import resize_bilinear

METHODS = ("saliency", "guided_backprop", "integrated_gradients", "grad_cam", "guided_grad_cam")
CHANNEL_REDUCTIONS = ("max_abs", "mean_abs", "l2")


@dataclass
class ExplanationMap:
    grid: np.ndarray
    method: str
    layer: Optional[str] = None
    normalized: bool = False

    @property
    def shape(self):
        return self.grid.shape


@dataclass(frozen=True)
class AttributionConfig:
    method: str = "guided_backprop"
    ig_steps: int = 50
    ig_baseline: Optional[np.ndarray] = field(default=None, compare=False)
    grad_cam_layer: Optional[str] = None
    channel_reduce: str = "max_abs"
    ig_batch: int = 25

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attribution method {self.method!r}; valid: {', '.join(METHODS)}")
        if self.ig_steps < 1:
            raise ValueError("ig_steps must be >= 1")
        if self.channel_reduce not in CHANNEL_REDUCTIONS:
            raise ValueError(f"unknown channel reduction {self.channel_reduce!r}")


def _net(model) -> Network:
    return model if isinstance(model, Network) else model.net


def _check_image(net, image):
    image = np.asarray(image, dtype=np.float64)
    if image.shape != net.input_shape:
        raise ShapeError(f"image shape {image.shape} does not match model input {net.input_shape}")
    return image


def channel_reduce(values, how="max_abs"):
    """Collapse the channel axis of an (H, W, C) array to a nonnegative grid."""
    values = np.asarray(values, dtype=np.float64)
    if how == "max_abs":
        return np.abs(values).max(axis=-1)
    if how == "mean_abs":
        return np.abs(values).mean(axis=-1)
    if how == "l2":
        return np.sqrt((values ** 2).sum(axis=-1))
    raise ValueError(f"unknown channel reduction {how!r}")


def input_gradient(model, image, policy="standard"):
    net = _net(model)
    image = _check_image(net, image)
    _, cache = net.forward(image)
    return net.backward_to_input(cache, policy).astype(np.float64)


def saliency(model, image, cfg=AttributionConfig("saliency")):
    grad = input_gradient(model, image, "standard")
    return ExplanationMap(channel_reduce(grad, cfg.channel_reduce), "saliency")


def guided_backprop(model, image, cfg=AttributionConfig("guided_backprop")):
    grad = input_gradient(model, image, "guided")
    return ExplanationMap(channel_reduce(grad, cfg.channel_reduce), "guided_backprop")


def integrated_gradient_attributions(model, image, steps=50, baseline=None, batch=25):
    """Per-channel attributions ``(I - baseline) * mean gradient`` along the
    straight path, using the midpoint rule with ``steps`` samples."""
    net = _net(model)
    image = _check_image(net, image)
    baseline = np.zeros_like(image) if baseline is None else np.asarray(baseline, dtype=np.float64)
    if baseline.shape != image.shape:
        raise ShapeError(f"baseline shape {baseline.shape} does not match image {image.shape}")
    diff = image - baseline
    alphas = (np.arange(steps) + 0.5) / steps
    total = np.zeros_like(image)
    for lo in range(0, steps, batch):
        a = alphas[lo : lo + batch]
        path = baseline[None] + a[:, None, None, None] * diff[None]
        _, cache = net.forward(path)
        total += net.backward_to_input(cache, "standard").astype(np.float64).sum(axis=0)
    return diff * (total / steps)


def integrated_gradients(model, image, cfg=AttributionConfig("integrated_gradients")):
    attr = integrated_gradient_attributions(model, image, cfg.ig_steps, cfg.ig_baseline, cfg.ig_batch)
    return ExplanationMap(channel_reduce(attr, cfg.channel_reduce), "integrated_gradients")


def _cam_layer(model, cfg):
    layer = cfg.grad_cam_layer
    if layer is None:
        layer = getattr(getattr(model, "preset", None), "grad_cam_layer", None)
    if layer is None:
        raise ValueError("grad_cam needs a layer: set grad_cam_layer or use a model with a preset")
    return layer


def grad_cam_weights(activations, gradients):
    """Per-map weights: spatial mean of the output gradient."""
    return np.asarray(gradients, dtype=np.float64).mean(axis=(0, 1))


def grad_cam_combine(activations, weights):
    return np.maximum(np.asarray(activations, dtype=np.float64) @ np.asarray(weights), 0.0)


def grad_cam(model, image, cfg=AttributionConfig("grad_cam")):
    net = _net(model)
    image = _check_image(net, image)
    layer = _cam_layer(model, cfg)
    net.layer_index(layer)
    _, cache = net.forward(image)
    acts = net.activation(cache, layer)
    if acts.ndim != 3:
        raise ShapeError(f"grad_cam layer {layer!r} must produce spatial feature maps")
    grads = net.backward_to_layer(cache, layer)
    cam = grad_cam_combine(acts, grad_cam_weights(acts, grads))
    up = resize_bilinear(cam, image.shape[:2])
    return ExplanationMap(np.maximum(up, 0.0), "grad_cam", layer)


def guided_grad_cam(model, image, cfg=AttributionConfig("guided_grad_cam")):
    gbp = guided_backprop(model, image, cfg)
    cam = grad_cam(model, image, cfg)
    return ExplanationMap(gbp.grid * cam.grid, "guided_grad_cam", cam.layer)


_DISPATCH = {
    "saliency": saliency,
    "guided_backprop": guided_backprop,
    "integrated_gradients": integrated_gradients,
    "grad_cam": grad_cam,
    "guided_grad_cam": guided_grad_cam,
}


def explain(model, image, cfg: AttributionConfig | str = "guided_backprop") -> ExplanationMap:
    """Dispatch on ``cfg.method``."""
    if isinstance(cfg, str):
        cfg = AttributionConfig(cfg)
    out = _DISPATCH[cfg.method](model, image, cfg)
    if not np.all(np.isfinite(out.grid)):
        raise NumericError(f"{cfg.method} produced non-finite values")
    return out


def with_method(cfg: AttributionConfig, method: str) -> AttributionConfig:
    return replace(cfg, method=method)


# ---------------------------------------------------------------------------
# Map files: "EVMAP1", u16 version, u32 height, u32 width, f32 LE row-major
# ---------------------------------------------------------------------------

MAP_MAGIC = b"EVMAP1"
MAP_VERSION = 1
_MAP_HEADER = struct.Struct("<HII")


def save_map(path, grid):
    grid = np.asarray(grid.grid if isinstance(grid, ExplanationMap) else grid)
    if grid.ndim != 2:
        raise ShapeError(f"map must be 2-D, got shape {grid.shape}")
    h, w = grid.shape
    data = MAP_MAGIC + _MAP_HEADER.pack(MAP_VERSION, h, w) + grid.astype("<f4").tobytes()
    Path(path).write_bytes(data)


def load_map(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    n = len(MAP_MAGIC)
    if raw[:n] != MAP_MAGIC:
        raise CheckpointError(f"{path}: not an EVMAP1 file")
    if len(raw) < n + _MAP_HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    version, h, w = _MAP_HEADER.unpack_from(raw, n)
    if version != MAP_VERSION:
        raise CheckpointError(f"{path}: unsupported map version {version}")
    body = raw[n + _MAP_HEADER.size :]
    if len(body) != 4 * h * w:
        raise CheckpointError(f"{path}: expected {4 * h * w} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float32)
