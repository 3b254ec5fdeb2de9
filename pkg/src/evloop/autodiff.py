"""Small reverse-mode engine for sequential convolutional regressors.

Arrays are plain numpy ``ndarray`` objects in NHWC layout.  A
:class:`Network` is an ordered list of layers with named parameters; a
forward pass records a :class:`ForwardCache` that the backward routines
consume.  Only the fixed layer vocabulary below is supported, which is
all the attribution methods need.

The ReLU adjoint is switchable: ``"standard"`` is the exact derivative,
``"guided"`` additionally zeroes negative upstream signal (guided
backpropagation).  Every other layer always uses its exact adjoint.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    CheckpointError,
    InvalidCacheError,
    LayerLookupError,
    NumericError,
    ShapeError,
)

POLICIES = ("standard", "guided")


# ---------------------------------------------------------------------------
# Layer specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    """One entry of a network recipe.

    ``kind`` is one of conv2d, relu, maxpool2d, dense, global_avg_pool,
    dropout, flatten.  ``options`` holds the kind-specific settings.
    """

    name: str
    kind: str
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        opts = self.options
        if self.kind == "conv2d":
            if opts.get("kernel", 0) < 1 or opts.get("stride", 1) < 1:
                raise ValueError(f"{self.name}: kernel and stride must be >= 1")
            if opts.get("out_channels", 0) < 1:
                raise ValueError(f"{self.name}: out_channels must be >= 1")
        elif self.kind == "maxpool2d":
            if opts.get("kernel", 0) < 1 or opts.get("stride", 0) < 1:
                raise ValueError(f"{self.name}: kernel and stride must be >= 1")
        elif self.kind == "dropout":
            if not 0 <= opts.get("p", 0.5) < 1:
                raise ValueError(f"{self.name}: dropout p must be in [0, 1)")
        elif self.kind == "dense":
            if opts.get("out_features", 0) < 1:
                raise ValueError(f"{self.name}: out_features must be >= 1")
        elif self.kind not in ("relu", "global_avg_pool", "flatten"):
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def to_dict(self):
        return {"name": self.name, "kind": self.kind, **self.options}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        return cls(d.pop("name"), d.pop("kind"), d)


def conv2d(name, out_channels, kernel=3, stride=1, padding="same"):
    return LayerSpec(name, "conv2d", {"out_channels": out_channels, "kernel": kernel,
                                      "stride": stride, "padding": padding})


def relu(name):
    return LayerSpec(name, "relu")


def maxpool2d(name, kernel=2, stride=None):
    return LayerSpec(name, "maxpool2d", {"kernel": kernel, "stride": stride or kernel})


def dense(name, out_features):
    return LayerSpec(name, "dense", {"out_features": out_features})


def global_avg_pool(name):
    return LayerSpec(name, "global_avg_pool")


def dropout(name, p=0.5):
    return LayerSpec(name, "dropout", {"p": p})


def flatten(name):
    return LayerSpec(name, "flatten")


# ---------------------------------------------------------------------------
# Layer kernels.  Each takes the per-item shape and works on batches.
# ---------------------------------------------------------------------------


def _conv_padding(spec, kernel):
    pad = spec.options.get("padding", "same")
    if pad == "same":
        return (kernel - 1) // 2
    if pad == "valid":
        return 0
    return int(pad)


class _Layer:
    params: tuple = ()

    def __init__(self, spec: LayerSpec, in_shape: tuple):
        self.spec = spec
        self.name = spec.name
        self.in_shape = in_shape
        self.out_shape = self._infer(in_shape)

    def _infer(self, in_shape):
        return in_shape

    def init_params(self, rng, dtype):
        return {}


class _Conv(_Layer):
    params = ("weight", "bias")

    def _infer(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"{self.name}: conv2d expects (H, W, C) input, got {in_shape}")
        o = self.spec.options
        self.k, self.s = o["kernel"], o.get("stride", 1)
        self.pad = _conv_padding(self.spec, self.k)
        self.cin, self.cout = in_shape[2], o["out_channels"]
        h = (in_shape[0] + 2 * self.pad - self.k) // self.s + 1
        w = (in_shape[1] + 2 * self.pad - self.k) // self.s + 1
        if h < 1 or w < 1:
            raise ShapeError(f"{self.name}: input {in_shape} too small for kernel {self.k}")
        return (h, w, self.cout)

    def init_params(self, rng, dtype):
        fan_in = self.k * self.k * self.cin
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (self.k, self.k, self.cin, self.cout))
        return {"weight": w.astype(dtype), "bias": np.zeros(self.cout, dtype)}

    def _cols(self, x):
        if self.pad:
            p = self.pad
            x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        ho, wo = self.out_shape[:2]
        win = sliding_window_view(x, (self.k, self.k), axis=(1, 2))
        win = win[:, : (ho - 1) * self.s + 1 : self.s, : (wo - 1) * self.s + 1 : self.s]
        # (N, Ho, Wo, C, kh, kw) -> (N*Ho*Wo, kh*kw*C)
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, self.k * self.k * self.cin)
        return cols

    def forward(self, x, p, train, rng):
        cols = self._cols(x)
        w = p["weight"].reshape(-1, self.cout)
        y = cols @ w + p["bias"]
        return y.reshape((x.shape[0],) + self.out_shape), cols

    def backward(self, dy, x, cols, p, policy, need_params):
        n = dy.shape[0]
        ho, wo = self.out_shape[:2]
        dy2 = dy.reshape(-1, self.cout)
        grads = {}
        if need_params:
            grads["weight"] = (cols.T @ dy2).reshape(p["weight"].shape)
            grads["bias"] = dy2.sum(axis=0)
        dcols = (dy2 @ p["weight"].reshape(-1, self.cout).T).reshape(
            n, ho, wo, self.k, self.k, self.cin)
        hp, wp = self.in_shape[0] + 2 * self.pad, self.in_shape[1] + 2 * self.pad
        dxp = np.zeros((n, hp, wp, self.cin), dtype=dy.dtype)
        s = self.s
        for i in range(self.k):
            for j in range(self.k):
                dxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[:, :, :, i, j]
        if self.pad:
            q = self.pad
            dxp = dxp[:, q:-q, q:-q]
        return dxp, grads


class _Relu(_Layer):
    def forward(self, x, p, train, rng):
        return np.maximum(x, 0), None

    def backward(self, dy, x, ctx, p, policy, need_params):
        if policy == "guided":
            return dy * ((x > 0) & (dy > 0)), {}
        return dy * (x > 0), {}


class _MaxPool(_Layer):
    def _infer(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"{self.name}: maxpool2d expects (H, W, C) input, got {in_shape}")
        self.k, self.s = self.spec.options["kernel"], self.spec.options["stride"]
        h = (in_shape[0] - self.k) // self.s + 1
        w = (in_shape[1] - self.k) // self.s + 1
        if h < 1 or w < 1:
            raise ShapeError(f"{self.name}: input {in_shape} too small for pooling {self.k}")
        return (h, w, in_shape[2])

    def forward(self, x, p, train, rng):
        ho, wo = self.out_shape[:2]
        win = sliding_window_view(x, (self.k, self.k), axis=(1, 2))
        win = win[:, : (ho - 1) * self.s + 1 : self.s, : (wo - 1) * self.s + 1 : self.s]
        flat = win.reshape(win.shape[:4] + (-1,))
        # argmax picks the first maximum in row-major window order
        arg = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return y, arg

    def backward(self, dy, x, arg, p, policy, need_params):
        ho, wo = self.out_shape[:2]
        dx = np.zeros_like(x, dtype=dy.dtype)
        s = self.s
        for i in range(self.k):
            for j in range(self.k):
                hit = arg == i * self.k + j
                dx[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dy * hit
        return dx, {}


class _Dense(_Layer):
    params = ("weight", "bias")

    def _infer(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"{self.name}: dense expects flat input, got {in_shape}; add a flatten layer")
        self.fin, self.fout = in_shape[0], self.spec.options["out_features"]
        return (self.fout,)

    def init_params(self, rng, dtype):
        w = rng.normal(0.0, np.sqrt(2.0 / self.fin), (self.fin, self.fout))
        return {"weight": w.astype(dtype), "bias": np.zeros(self.fout, dtype)}

    def forward(self, x, p, train, rng):
        return x @ p["weight"] + p["bias"], None

    def backward(self, dy, x, ctx, p, policy, need_params):
        grads = {}
        if need_params:
            grads = {"weight": x.T @ dy, "bias": dy.sum(axis=0)}
        return dy @ p["weight"].T, grads


class _GlobalAvgPool(_Layer):
    def _infer(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"{self.name}: global_avg_pool expects (H, W, C), got {in_shape}")
        return (in_shape[2],)

    def forward(self, x, p, train, rng):
        return x.mean(axis=(1, 2)), None

    def backward(self, dy, x, ctx, p, policy, need_params):
        h, w = self.in_shape[:2]
        dx = np.broadcast_to(dy[:, None, None, :] / (h * w), x.shape).copy()
        return dx, {}


class _Dropout(_Layer):
    def forward(self, x, p, train, rng):
        prob = self.spec.options.get("p", 0.5)
        if not train or prob == 0:
            return x, None
        keep = (rng.random(x.shape) >= prob).astype(x.dtype) / (1.0 - prob)
        return x * keep, keep

    def backward(self, dy, x, keep, p, policy, need_params):
        return (dy if keep is None else dy * keep), {}


class _Flatten(_Layer):
    def _infer(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, p, train, rng):
        return x.reshape(x.shape[0], -1), None

    def backward(self, dy, x, ctx, p, policy, need_params):
        return dy.reshape(x.shape), {}


_KINDS = {
    "conv2d": _Conv,
    "relu": _Relu,
    "maxpool2d": _MaxPool,
    "dense": _Dense,
    "global_avg_pool": _GlobalAvgPool,
    "dropout": _Dropout,
    "flatten": _Flatten,
}


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    """Activations recorded by :meth:`Network.forward`.

    ``inputs[i]`` / ``outputs[i]`` are the batched input and output of
    layer ``i``; ``prediction`` is the (N,) output vector.
    """

    inputs: list
    outputs: list
    contexts: list
    prediction: np.ndarray
    version: int
    batched: bool
    start: int = 0


class Network:
    """Sequential network over a fixed layer vocabulary.

    Parameters live in ``self.params`` keyed ``"<layer>.<param>"``.  Any
    mutation through :meth:`set_parameters` or :func:`train_step` bumps
    ``version``, which invalidates older forward caches.
    """

    def __init__(self, layers: Sequence[LayerSpec], input_shape, *, seed=0,
                 dtype=np.float32, params: dict | None = None):
        names = [s.name for s in layers]
        if len(set(names)) != len(names):
            raise ValueError(f"layer names must be unique: {names}")
        if not layers:
            raise ValueError("network needs at least one layer")
        self.specs = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.dtype = np.dtype(dtype)
        self.training = False
        self.version = 0
        self.rng = np.random.default_rng(seed)
        self.layers = []
        shape = self.input_shape
        for spec in self.specs:
            layer = _KINDS[spec.kind](spec, shape)
            self.layers.append(layer)
            shape = layer.out_shape
        if shape != (1,):
            raise ShapeError(f"network must end in a single output node, got shape {shape}")
        self._index = {l.name: i for i, l in enumerate(self.layers)}
        init_rng = np.random.default_rng(seed)
        self.params = {}
        for layer in self.layers:
            for k, v in layer.init_params(init_rng, self.dtype).items():
                self.params[f"{layer.name}.{k}"] = v
        if params is not None:
            self.set_parameters(params)

    # -- bookkeeping -------------------------------------------------------

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def layer_index(self, layer_id):
        try:
            return self._index[layer_id]
        except KeyError:
            raise LayerLookupError(
                f"unknown layer {layer_id!r}; known layers: {list(self._index)}") from None

    def layer_params(self, layer):
        return {k: self.params[f"{layer.name}.{k}"] for k in layer.params}

    def set_parameters(self, params: dict):
        for key, value in params.items():
            if key not in self.params:
                raise KeyError(f"unknown parameter {key!r}")
            value = np.asarray(value, dtype=self.dtype)
            if value.shape != self.params[key].shape:
                raise ShapeError(f"{key}: expected {self.params[key].shape}, got {value.shape}")
            self.params[key] = value.copy()
        self.version += 1

    def astype(self, dtype):
        """Return a copy of the network in another precision."""
        net = Network(self.specs, self.input_shape, dtype=dtype)
        net.set_parameters({k: v.astype(dtype) for k, v in self.params.items()})
        return net

    def copy(self):
        net = Network(self.specs, self.input_shape, dtype=self.dtype)
        net.set_parameters(self.params)
        net.training = self.training
        return net

    # -- passes ------------------------------------------------------------

    def _prepare(self, x, shape):
        x = np.asarray(x)
        batched = x.ndim == len(shape) + 1
        if x.shape[batched:] != shape:
            raise ShapeError(f"expected input of shape {shape} (or batched), got {x.shape}")
        if batched:
            x = x.astype(self.dtype, copy=False)
        else:
            x = x.astype(self.dtype)[None]
        return x, batched

    def forward(self, x):
        """Run the network; returns ``(prediction, cache)``.

        For a single (H, W, C) input the prediction is a Python float;
        for a batch it is an (N,) array.
        """
        x, batched = self._prepare(x, self.input_shape)
        return self._run(x, 0, batched)

    def forward_from(self, layer_id, activation):
        """Evaluate the layers after ``layer_id`` given its output."""
        i = self.layer_index(layer_id)
        x, batched = self._prepare(activation, self.layers[i].out_shape)
        return self._run(x, i + 1, batched)

    def _run(self, x, start, batched):
        inputs, outputs, ctxs = [None] * start, [None] * start, [None] * start
        for layer in self.layers[start:]:
            with np.errstate(over="ignore", invalid="ignore"):
                y, ctx = layer.forward(x, self.layer_params(layer), self.training, self.rng)
            if not np.all(np.isfinite(y)):
                raise NumericError(f"non-finite activation in layer {layer.name!r}")
            inputs.append(x)
            outputs.append(y)
            ctxs.append(ctx)
            x = y
        pred = x[:, 0]
        cache = ForwardCache(inputs, outputs, ctxs, pred, self.version, batched, start)
        return (pred if batched else float(pred[0])), cache

    def _backward(self, cache, stop, policy, need_params, seed=None):
        if cache.version != self.version:
            raise InvalidCacheError("network parameters changed since this forward pass")
        if policy not in POLICIES:
            raise ValueError(f"unknown relu policy {policy!r}; expected one of {POLICIES}")
        if stop < cache.start:
            raise InvalidCacheError("cache does not cover the requested layer")
        n = cache.prediction.shape[0]
        g = np.ones((n, 1), dtype=self.dtype) if seed is None else seed.reshape(n, 1).astype(self.dtype)
        grads = {}
        for i in range(len(self.layers) - 1, stop - 1, -1):
            layer = self.layers[i]
            g, pg = layer.backward(g, cache.inputs[i], cache.contexts[i],
                                   self.layer_params(layer), policy, need_params)
            for k, v in pg.items():
                grads[f"{layer.name}.{k}"] = v
        return g, grads

    def backward_to_input(self, cache, policy="standard"):
        """Gradient of the output w.r.t. the network input.

        Batched caches give per-item gradients (items are independent).
        """
        g, _ = self._backward(cache, cache.start, policy, False)
        return g if cache.batched else g[0]

    def backward_to_layer(self, cache, layer_id, policy="standard"):
        """Gradient of the output w.r.t. the output of ``layer_id``."""
        i = self.layer_index(layer_id)
        g, _ = self._backward(cache, i + 1, policy, False)
        return g if cache.batched else g[0]

    def activation(self, cache, layer_id):
        out = cache.outputs[self.layer_index(layer_id)]
        return out if cache.batched else out[0]

    def parameter_gradients(self, cache, output_grad):
        """Parameter gradients for a given dLoss/dprediction vector."""
        _, grads = self._backward(cache, cache.start, "standard", True, seed=np.asarray(output_grad))
        return grads

    def predict(self, x):
        pred, _ = self.forward(x)
        return pred


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params: dict, grads: dict, state: AdamState) -> dict:
    """Return updated parameters after one bias-corrected Adam step.

    ``state`` is advanced in place.
    """
    state.step += 1
    t = state.step
    out = {}
    for key, g in grads.items():
        m = state.m.get(key, 0.0) * state.beta1 + (1 - state.beta1) * g
        v = state.v.get(key, 0.0) * state.beta2 + (1 - state.beta2) * g * g
        state.m[key], state.v[key] = m, v
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p = params[key]
        out[key] = (p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(np.asarray(p).dtype)
    return out


def train_step(net: Network, inputs, labels, state: AdamState) -> float:
    """One MSE regression step; returns the batch loss before the update."""
    inputs = np.asarray(inputs)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if labels.size == 0 or inputs.shape[0] == 0:
        raise ValueError("empty batch")
    if inputs.shape[0] != labels.size:
        raise ShapeError(f"{inputs.shape[0]} inputs but {labels.size} labels")
    if inputs.ndim == len(net.input_shape):
        raise ShapeError("train_step expects a batch of inputs")
    pred, cache = net.forward(inputs)
    err = pred.astype(np.float64) - labels
    loss = float(np.mean(err ** 2))
    if not np.isfinite(loss):
        raise NumericError("non-finite training loss")
    grads = net.parameter_gradients(cache, 2.0 * err / labels.size)
    new = adam_update(net.params, grads, state)
    net.params.update(new)
    net.version += 1
    return loss


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

MAGIC = b"EVNET1"
FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def dump_parameters(params: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HH", FORMAT_VERSION, len(params)))
    for name, arr in params.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", _DTYPE_TAGS[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def load_parameters(data: bytes) -> dict:
    view = memoryview(data)
    if bytes(view[:6]) != MAGIC:
        raise CheckpointError("not an EVNET1 checkpoint")
    pos = 6
    version, count = struct.unpack_from("<HH", view, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos : pos + n]).decode("utf-8")
            pos += n
            tag, rank = struct.unpack_from("<BB", view, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            dt = _TAG_DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(view):
                raise CheckpointError(f"{name}: truncated data")
            out[name] = np.frombuffer(view[pos : pos + nbytes], dtype=dt).reshape(dims).copy()
            pos += nbytes
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def save_checkpoint(net: Network, path):
    Path(path).write_bytes(dump_parameters(net.params))


def load_checkpoint(path) -> dict:
    return load_parameters(Path(path).read_bytes())
