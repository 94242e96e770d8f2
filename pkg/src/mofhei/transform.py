"""Conversion of a trained model into HE-friendly form.

Max-pooling layers become average pooling and activations become trainable
polynomials (or the square function), latest layer first, each followed by a
transfer-then-finetune recovery; dropout is stripped, batch norm folded into
the preceding parameterized layer, and the training-time softmax head dropped
(argmax is monotone under softmax, so HE inference never needs it).
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import NotHeFriendlyError
from .nncore import (
    AvgPool2D, Model, PolyAct, SquareAct, TrainConfig, evaluate, train,
)


@dataclass
class HefConfig:
    poly_degree: int = 2
    activation_mode: str = "poly"  # poly | square
    transfer_epochs: int = 100
    finetune_epochs: int = 100
    transfer_lr: float = 1e-3
    finetune_lr: float = 1e-4
    patience: int = 10
    coeff_init_scale: float = 0.01
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.poly_degree < 1:
            raise ValueError("poly_degree must be >= 1")
        if not self.transfer_lr > self.finetune_lr > 0:
            raise ValueError("need transfer_lr > finetune_lr > 0")
        if self.activation_mode not in ("poly", "square"):
            raise ValueError(f"unknown activation mode {self.activation_mode!r}")


@dataclass
class ConversionEntry:
    layer_index: int
    from_kind: str
    to_kind: str
    val_metric_before: float
    val_metric_after: float
    epochs_used: int


@dataclass
class ConversionLog:
    entries: list = field(default_factory=list)

    def to_json_obj(self):
        return [asdict(e) for e in self.entries]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_obj(), fh, indent=1)

    def __len__(self):
        return len(self.entries)


def infer_loss(model):
    """Training loss implied by the model's metadata or output head."""
    recorded = model.metadata.get("loss")
    if recorded:
        return recorded
    if not model.layers:
        return "mse"
    last = model.layers[-1].kind
    if last == "softmax":
        return "cross_entropy"
    if last == "sigmoid" and model.output_shape == (1,):
        return "binary_cross_entropy"
    if model.output_shape == (int(np.prod(model.input_shape)),):
        return "mse"  # reconstruction head: output matches flattened input
    if model.output_shape[-1] > 1 and last in ("dense", "polyact", "squareact", "relu"):
        # classification head whose squash was already dropped
        return "cross_entropy"
    return "mse"


def val_metric_kind(loss):
    return "mse" if loss == "mse" else "accuracy"


def _train_cfg(cfg, epochs, lr, loss):
    return TrainConfig(epochs=epochs, learning_rate=lr, patience_epochs=cfg.patience,
                       batch_size=cfg.batch_size, loss=loss, seed=cfg.seed)


def _rebuild(model, layers):
    return Model(model.input_shape, layers, seed=model.seed, metadata=model.metadata)


def _recover(model, changed_index, train_data, val_data, cfg, loss, coeff_only=False):
    """Post-conversion recovery: transfer phase, then a full fine-tune."""
    epochs = 0
    if cfg.transfer_epochs > 0:
        scope = {"trainable_only": {changed_index}} if coeff_only else \
                {"frozen_prefix": changed_index + 1}
        hist = train(model, train_data, val_data,
                     _train_cfg(cfg, cfg.transfer_epochs, cfg.transfer_lr, loss), **scope)
        epochs += len(hist)
    if cfg.finetune_epochs > 0:
        hist = train(model, train_data, val_data,
                     _train_cfg(cfg, cfg.finetune_epochs, cfg.finetune_lr, loss))
        epochs += len(hist)
    return epochs


def _convert_pooling(model, pool_index, train_data, val_data, cfg, loss):
    if model.layers[pool_index].kind != "maxpool2d":
        raise ValueError(f"layer {pool_index} is {model.layers[pool_index].kind}, "
                         "expected maxpool2d")
    old = model.layers[pool_index]
    layers = list(model.layers)
    layers[pool_index] = AvgPool2D(old.window, old.stride)
    work = _rebuild(model, layers)
    epochs = _recover(work, pool_index, train_data, val_data, cfg, loss)
    return work, epochs


def _convert_activation(model, act_index, mode, train_data, val_data, cfg, loss):
    kind = model.layers[act_index].kind
    if kind not in ("relu", "sigmoid"):
        raise ValueError(f"layer {act_index} is {kind}, expected an activation")
    layers = list(model.layers)
    if mode == "poly":
        layers[act_index] = PolyAct(cfg.poly_degree, init_scale=cfg.coeff_init_scale)
        work = _rebuild(model, layers)
        epochs = _recover(work, act_index, train_data, val_data, cfg, loss, coeff_only=True)
    else:
        layers[act_index] = SquareAct()
        work = _rebuild(model, layers)
        epochs = 0
        if cfg.finetune_epochs > 0:
            hist = train(work, train_data, val_data,
                         _train_cfg(cfg, cfg.finetune_epochs, cfg.finetune_lr, loss))
            epochs = len(hist)
    return work, epochs


def convert_pooling(model, pool_index, train_data, val_data, cfg):
    """Replace one max pool with average pooling (same window/strides) and
    retrain: subsequent layers first, then a full fine-tune."""
    work, _ = _convert_pooling(model.copy(), pool_index, train_data, val_data, cfg,
                               infer_loss(model))
    return work


def convert_activation(model, act_index, mode, train_data, val_data, cfg):
    """Replace one ReLU/Sigmoid with PolyAct (coefficient-only training, then
    fine-tune) or SquareAct (fine-tune only)."""
    work, _ = _convert_activation(model.copy(), act_index, mode, train_data, val_data,
                                  cfg, infer_loss(model))
    return work


def strip_dropout(model):
    """Drop all dropout layers; inference outputs are bit-identical."""
    layers = [l for l in model.layers if l.kind != "dropout"]
    return _rebuild(model, layers) if len(layers) != len(model.layers) else model.copy()


def fold_batchnorm(model):
    """Absorb each batch-norm into the immediately preceding Dense/Conv2D."""
    layers = list(model.copy().layers)
    out = []
    for layer in layers:
        if layer.kind != "batchnorm":
            out.append(layer)
            continue
        if not out or out[-1].kind not in ("dense", "conv2d"):
            raise NotHeFriendlyError(layers.index(layer), "batchnorm without a "
                                     "preceding parameterized layer")
        host = out[-1]
        inv = layer.gamma / np.sqrt(layer.moving_var + layer.eps)
        if host.kind == "dense":
            host.w *= inv
        else:
            host.w *= inv  # broadcasts over the trailing filter axis
        host.b[...] = (host.b - layer.moving_mean) * inv + layer.beta
    return _rebuild(model, out)


def make_he_friendly(model, train_data, val_data, cfg):
    """Full conversion pipeline; returns (hef_model, ConversionLog).

    Pools convert latest-first, then activations latest-first; softmax/dropout
    are dropped and batch norm folded. An already HE-friendly model is returned
    unchanged with an empty log.
    """
    log = ConversionLog()
    if model.is_he_friendly():
        return model, log

    loss = infer_loss(model)
    metric = val_metric_kind(loss)
    work = model.copy()

    pool_indices = [i for i, l in enumerate(work.layers) if l.kind == "maxpool2d"]
    for idx in sorted(pool_indices, reverse=True):
        before = evaluate(work, val_data, metric)
        work, epochs = _convert_pooling(work, idx, train_data, val_data, cfg, loss)
        log.entries.append(ConversionEntry(idx, "maxpool2d", "avgpool2d", before,
                                           evaluate(work, val_data, metric), epochs))

    act_indices = work.activation_indices()
    to_kind = "polyact" if cfg.activation_mode == "poly" else "squareact"
    for idx in sorted(act_indices, reverse=True):
        before = evaluate(work, val_data, metric)
        from_kind = work.layers[idx].kind
        work, epochs = _convert_activation(work, idx, cfg.activation_mode,
                                           train_data, val_data, cfg, loss)
        log.entries.append(ConversionEntry(idx, from_kind, to_kind, before,
                                           evaluate(work, val_data, metric), epochs))

    survivors = [l for l in work.layers if l.kind not in ("softmax", "dropout")]
    if len(survivors) != len(work.layers):
        work = _rebuild(work, survivors)
    if work.has_any(("batchnorm",)):
        work = fold_batchnorm(work)

    bad = work.non_he_friendly_layers()
    if bad:
        raise NotHeFriendlyError(*bad[0])

    final = evaluate(work, val_data, metric)
    work.metadata.update({"stage": "hef", "val_metric": final,
                          "activation_mode": cfg.activation_mode,
                          "loss": loss})
    return work, log
