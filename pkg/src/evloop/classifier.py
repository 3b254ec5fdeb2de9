"""Severity regressors: architecture presets, training, thresholds, bundles."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import NumericError, ShapeError, TrainingError, UndefinedROCError
from .evaluation import (
    confusion_matrix,
    grade_from_prediction,
    quadratic_weighted_kappa,
    roc,
    select_threshold,
    sensitivity_specificity,
)
from .imaging import PreprocessSpec, preprocess
from .synthetic import REFERABLE_GRADE

log = logging.getLogger(__name__)

PRESETS = ("vgg_mini", "deep_mini")


def _block(prefix, channels, n_conv, pool=True, first_padding="same"):
    layers = []
    for i in range(1, n_conv + 1):
        pad = first_padding if i == 1 else "same"
        layers += [ad.conv2d(f"{prefix}_conv{i}", channels, 3, 1, pad), ad.relu(f"{prefix}_relu{i}")]
    if pool:
        layers.append(ad.maxpool2d(f"{prefix}_pool", 2))
    return layers


def _vgg_mini():
    # stride 2 in the very first conv; valid padding opens the last block
    layers = [ad.conv2d("block1_conv1", 8, 3, 2), ad.relu("block1_relu1"),
              ad.conv2d("block1_conv2", 8, 3), ad.relu("block1_relu2"), ad.maxpool2d("block1_pool", 2)]
    layers += _block("block2", 16, 2)
    layers += _block("block3", 32, 2)
    layers += _block("block4", 32, 1)
    layers += _block("block5", 32, 1, first_padding="valid")
    layers += [ad.flatten("flatten"), ad.dense("fc1", 32), ad.relu("fc1_relu"),
               ad.dropout("fc1_dropout", 0.5), ad.dense("head", 1)]
    return layers, "block3_relu2"


def _deep_mini():
    layers = [ad.conv2d("stem_conv", 8, 3, 2), ad.relu("stem_relu"), ad.maxpool2d("stem_pool", 2)]
    layers += _block("block1", 12, 2)
    layers += _block("block2", 16, 2)
    layers += _block("block3", 24, 2)
    layers += _block("block4", 32, 2, pool=False)
    layers += [ad.global_avg_pool("gap"), ad.dropout("gap_dropout", 0.5), ad.dense("head", 1)]
    return layers, "block1_relu2"


@dataclass(frozen=True)
class ArchitecturePreset:
    name: str
    input_size: int
    layers: tuple
    grad_cam_layer: str

    def build(self, seed=0, dtype=np.float32) -> ad.Network:
        return ad.Network(self.layers, (self.input_size, self.input_size, 3), seed=seed, dtype=dtype)


def get_preset(name, input_size=128) -> ArchitecturePreset:
    if name == "vgg_mini":
        layers, cam = _vgg_mini()
    elif name == "deep_mini":
        layers, cam = _deep_mini()
    else:
        raise ValueError(f"unknown preset {name!r}; valid: {', '.join(PRESETS)}")
    return ArchitecturePreset(name, int(input_size), tuple(layers), cam)


def conv_blocks_after(preset: ArchitecturePreset, layer_id) -> int:
    """Number of distinct conv blocks between ``layer_id`` and the head."""
    names = [s.name for s in preset.layers]
    idx = names.index(layer_id)
    blocks = {s.name.split("_")[0] for s in preset.layers[idx + 1 :] if s.kind == "conv2d"}
    return len(blocks)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    class_balancing: bool = True
    augmentation: bool = True
    validation_fraction: float = 0.2

    def __post_init__(self):
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class Model:
    preset: ArchitecturePreset
    net: ad.Network
    preprocessing: PreprocessSpec
    th_pred: float
    metadata: dict = field(default_factory=dict)

    def predict(self, image, preprocess_input=False):
        return predict(self, image, preprocess_input)

    def referable(self, prediction):
        return prediction >= self.th_pred


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_auc: list = field(default_factory=list)
    best_epoch: int = -1


def stratified_split(grades, fraction, rng):
    grades = np.asarray(grades)
    val = []
    for g in np.unique(grades):
        idx = rng.permutation(np.flatnonzero(grades == g))
        val.extend(idx[: int(round(fraction * idx.size))])
    val = np.sort(np.array(val, dtype=int))
    train = np.setdiff1d(np.arange(grades.size), val)
    return train, val


def balanced_epoch(grades, rng):
    """Indices for one epoch with every grade equally represented.

    The epoch keeps the nominal size rounded down to a multiple of the
    number of grades present.
    """
    grades = np.asarray(grades)
    classes = np.unique(grades)
    per = grades.size // classes.size
    picks = [rng.choice(np.flatnonzero(grades == g), per, replace=True) for g in classes]
    return rng.permutation(np.concatenate(picks))


def augment_batch(batch, rng):
    """Random flips and quarter turns, one draw per image."""
    out = np.empty_like(batch)
    for i, img in enumerate(batch):
        if rng.random() < 0.5:
            img = img[:, ::-1]
        if rng.random() < 0.5:
            img = img[::-1]
        out[i] = np.rot90(img, int(rng.integers(4)))
    return out


def predict_batch(net: ad.Network, images, batch_size=64):
    net.eval()
    preds = [net.predict(images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    return np.concatenate(preds).astype(np.float64) if preds else np.zeros(0)


def fit(net: ad.Network, inputs, labels, config: TrainConfig, grades=None, val=None,
        on_epoch=None) -> TrainHistory:
    """Adam/MSE training loop.

    ``grades`` drives class balancing (defaults to ``labels``).  With
    ``val = (inputs, labels)`` the parameters of the epoch with the best
    validation AUC (referable vs not) are restored at the end.
    """
    rng = np.random.default_rng(config.seed)
    labels = np.asarray(labels, dtype=np.float64)
    grades = labels if grades is None else np.asarray(grades)
    state = ad.AdamState(lr=config.learning_rate)
    hist = TrainHistory()
    best_auc, best_params = -np.inf, None
    for epoch in range(config.epochs):
        order = balanced_epoch(grades, rng) if config.class_balancing else rng.permutation(labels.size)
        net.train()
        losses = []
        for lo in range(0, order.size, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            xb = inputs[idx]
            if config.augmentation:
                xb = augment_batch(xb, rng)
            loss = ad.train_step(net, xb, labels[idx], state)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            losses.append(loss)
        net.eval()
        hist.train_loss.append(float(np.mean(losses)))
        if val is not None:
            vp = predict_batch(net, val[0])
            hist.val_loss.append(float(np.mean((vp - val[1]) ** 2)))
            try:
                auc = roc(vp, val[1] >= REFERABLE_GRADE).auc
            except UndefinedROCError:
                auc = float("nan")
            hist.val_auc.append(auc)
            if auc > best_auc:
                best_auc, best_params = auc, {k: v.copy() for k, v in net.params.items()}
                hist.best_epoch = epoch
        if on_epoch is not None:
            on_epoch(epoch, hist)
    if best_params is not None:
        net.set_parameters(best_params)
    net.eval()
    return hist


def validation_metrics(preds, grades, th_pred):
    grades = np.asarray(grades)
    ref = grades >= REFERABLE_GRADE
    curve = roc(preds, ref)
    se, sp = sensitivity_specificity(preds, ref, th_pred)
    k = max(int(grades.max()) + 1, 4)
    try:
        kappa = quadratic_weighted_kappa(confusion_matrix(grades, grade_from_prediction(preds, k), k))
    except ArithmeticError:
        kappa = float("nan")
    return {"auc": curve.auc, "se": se, "sp": sp, "kappa": kappa}


def train(images, grades, preset: ArchitecturePreset | str = "vgg_mini",
          config: TrainConfig = TrainConfig(), preprocessing: PreprocessSpec | None = None,
          preprocessed=False, on_epoch=None):
    """Train a severity regressor and pick its referability threshold.

    ``images`` are raw phantoms unless ``preprocessed`` is set.  Returns
    ``(Model, TrainHistory)``.
    """
    if isinstance(preset, str):
        size = preprocessing.target_size if preprocessing else 128
        preset = get_preset(preset, size)
    preprocessing = preprocessing or PreprocessSpec(target_size=preset.input_size)
    grades = np.asarray(grades, dtype=int)
    if grades.size == 0 or np.unique(grades >= REFERABLE_GRADE).size < 2:
        raise TrainingError("training data must contain referable and non-referable images")
    if grades.size < 50:
        log.warning("only %d training images; metrics will be unreliable", grades.size)
    if preprocessed:
        x = np.asarray(images, dtype=np.float32)
    else:
        x = np.stack([preprocess(im, preprocessing) for im in images]).astype(np.float32)
    if x.shape[1:] != (preset.input_size, preset.input_size, 3):
        raise ShapeError(f"images of shape {x.shape[1:]} do not match preset input {preset.input_size}")

    rng = np.random.default_rng(config.seed)
    tr, va = stratified_split(grades, config.validation_fraction, rng)
    if tr.size == 0:
        raise TrainingError("validation split leaves no training data")
    if np.unique(grades[va] >= REFERABLE_GRADE).size < 2:
        raise TrainingError("validation split needs referable and non-referable images")
    if np.unique(grades[tr]).size < 2:
        raise TrainingError("training split needs at least two grades")

    net = preset.build(seed=config.seed)
    hist = fit(net, x[tr], grades[tr].astype(np.float64), config, val=(x[va], grades[va]),
               on_epoch=on_epoch)
    vp = predict_batch(net, x[va])
    th = select_threshold(vp, grades[va] >= REFERABLE_GRADE)
    metrics = validation_metrics(vp, grades[va], th)
    meta = {"seed": config.seed, "epochs": config.epochs, "train_config": asdict(config),
            "metrics": metrics, "n_train": int(tr.size), "n_val": int(va.size),
            "best_epoch": hist.best_epoch}
    return Model(preset, net, preprocessing, th, meta), hist


def predict(model: Model, image, preprocess_input=False) -> float:
    image = np.asarray(image, dtype=np.float64)
    if preprocess_input:
        image = preprocess(image, model.preprocessing)
    if image.shape != model.net.input_shape:
        raise ShapeError(f"image shape {image.shape} does not match model input {model.net.input_shape}")
    model.net.eval()
    return model.net.predict(image)


# ---------------------------------------------------------------------------
# Bundles: <dir>/model.evnet + <dir>/model.json
# ---------------------------------------------------------------------------


def save_model(model: Model, bundle_dir):
    d = Path(bundle_dir)
    d.mkdir(parents=True, exist_ok=True)
    ad.save_checkpoint(model.net, d / "model.evnet")
    side = {
        "preset": model.preset.name,
        "input_size": model.preset.input_size,
        "grad_cam_layer": model.preset.grad_cam_layer,
        "th_pred": model.th_pred,
        "preprocessing": model.preprocessing.to_dict(),
        "seed": model.metadata.get("seed", 0),
        "metrics": model.metadata.get("metrics", {}),
        "metadata": model.metadata,
    }
    (d / "model.json").write_text(json.dumps(side, indent=2, sort_keys=True))
    return d


def load_model(bundle_dir) -> Model:
    d = Path(bundle_dir)
    side = json.loads((d / "model.json").read_text())
    preset = get_preset(side["preset"], side["input_size"])
    if side.get("grad_cam_layer", preset.grad_cam_layer) != preset.grad_cam_layer:
        preset = ArchitecturePreset(preset.name, preset.input_size, preset.layers, side["grad_cam_layer"])
    params = ad.load_checkpoint(d / "model.evnet")
    dtype = next(iter(params.values())).dtype if params else np.float32
    net = preset.build(dtype=dtype)
    net.set_parameters(params)
    net.eval()
    return Model(preset, net, PreprocessSpec(**side["preprocessing"]), float(side["th_pred"]),
                 side.get("metadata", {}))
