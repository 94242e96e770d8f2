"""Training loop, optimizers, losses, and evaluation."""

import copy
from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingDivergedError


@dataclass
class Dataset:
    """Input/target pair; y is one-hot for classification, targets otherwise."""

    x: np.ndarray
    y: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if len(self.x) != len(self.y):
            raise ValueError(f"x/y length mismatch: {len(self.x)} vs {len(self.y)}")

    def __len__(self):
        return len(self.x)

    def subset(self, idx, name=None):
        return Dataset(self.x[idx], self.y[idx], name if name is not None else self.name)


@dataclass
class TrainConfig:
    epochs: int
    learning_rate: float = 1e-3
    patience_epochs: int = 10
    lr_halving_period: int = 5
    min_learning_rate: float = 1e-7
    batch_size: int = 64
    loss: str = "cross_entropy"  # cross_entropy | mse | binary_cross_entropy
    optimizer: str = "adam"  # adam | sgd_momentum
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.patience_epochs < 1:
            raise ValueError("patience_epochs must be >= 1")
        if self.learning_rate <= self.min_learning_rate:
            raise ValueError("learning_rate must exceed min_learning_rate")
        if self.loss not in ("cross_entropy", "mse", "binary_cross_entropy"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    val_metric: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def __len__(self):
        return len(self.loss)


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, lr):
        """params: key -> (array, grad); arrays updated in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1 - b1 ** self.t
        corr2 = 1 - b2 ** self.t
        for key, (arr, grad) in params.items():
            m = self.m.setdefault(key, np.zeros_like(arr))
            v = self.v.setdefault(key, np.zeros_like(arr))
            m *= b1
            m += (1 - b1) * grad
            v *= b2
            v += (1 - b2) * grad * grad
            arr -= lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


class SGDMomentum:
    def __init__(self, momentum=0.9):
        self.momentum = momentum
        self.v = {}

    def step(self, params, lr):
        for key, (arr, grad) in params.items():
            v = self.v.setdefault(key, np.zeros_like(arr))
            v *= self.momentum
            v -= lr * grad
            arr += v


def make_optimizer(name):
    return Adam() if name == "adam" else SGDMomentum()


def _loss_and_output_grad(out, y, loss, terminal_kind):
    """Loss value and the gradient to start backprop from.

    When the model ends in softmax (cross entropy) or sigmoid (binary cross
    entropy) the squash's backward is fused into the loss gradient and the
    caller must skip that layer; the second return flags this.
    """
    n = out.shape[0]
    if loss == "mse":
        diff = out - y
        return float((diff * diff).mean()), 2.0 * diff / diff.size, False

    if loss == "cross_entropy":
        if terminal_kind == "softmax":
            p, fused = out, True
        else:
            e = np.exp(out - out.max(axis=-1, keepdims=True))
            p, fused = e / e.sum(axis=-1, keepdims=True), False
        value = float(-(y * np.log(np.clip(p, 1e-12, None))).sum() / n)
        return value, (p - y) / n, fused

    # binary cross entropy
    if terminal_kind == "sigmoid":
        p, fused = out, True
    else:
        p, fused = 1.0 / (1.0 + np.exp(-out)), False
    p_c = np.clip(p, 1e-12, 1 - 1e-12)
    value = float(-(y * np.log(p_c) + (1 - y) * np.log(1 - p_c)).mean())
    return value, (p - y) / p.size, fused


def training_step(model, xb, yb, loss, optimizer, lr, update_indices=None, masks=None):
    """One forward/backward/update pass; returns the batch loss.

    ``update_indices``: layer indices whose parameters may move (None = all).
    ``masks``: layer index -> 0/1 array over the layer's 2-D weight view;
    masked weights read as zero in the forward pass, receive no gradient, and
    are restored bit-identically after the optimizer step.
    """
    masks = masks or {}
    for i, mask in masks.items():
        model.layers[i].mask = mask

    out = model.forward(xb, train_mode=True)
    terminal = model.layers[-1].kind if model.layers else None
    value, grad, fused = _loss_and_output_grad(out, yb, loss, terminal)
    if not np.isfinite(value):
        return value

    layers = model.layers[:-1] if fused else model.layers
    for layer in reversed(layers):
        grad = layer.backward(grad)

    params = {}
    saved = {}
    for i, layer in enumerate(model.layers):
        if update_indices is not None and i not in update_indices:
            continue
        for name, arr in layer.param_arrays().items():
            g = layer.grads.get(name)
            if g is None:
                continue
            params[(i, name)] = (arr, g)
        if i in masks and hasattr(model.layers[i], "weight_matrix"):
            layer = model.layers[i]
            wm = layer.weight_matrix()
            dead_w = np.where(masks[i] == 0)
            dead_b = np.where(~masks[i].any(axis=0))
            saved[i] = (wm, dead_w, wm[dead_w].copy(), layer.b, dead_b, layer.b[dead_b].copy())
    optimizer.step(params, lr)
    # optimizer momentum must never move a masked weight or a pruned bias
    for wm, dead_w, wvals, b, dead_b, bvals in saved.values():
        wm[dead_w] = wvals
        b[dead_b] = bvals
    return value


def _improved(curr, best, higher_is_better):
    if best is None:
        return True
    return curr > best + 1e-12 if higher_is_better else curr < best - 1e-12


def _snapshot(model):
    return [
        {name: arr.copy() for name, arr in list(l.param_arrays().items()) + list(l.state_arrays().items())}
        for l in model.layers
    ]


def _restore(model, snap):
    for layer, arrays in zip(model.layers, snap):
        both = {**layer.param_arrays(), **layer.state_arrays()}
        for name, arr in both.items():
            arr[...] = arrays[name]


def train(model, train_data, val_data, cfg, frozen_prefix=None, trainable_only=None,
          mask_hook=None):
    """Train ``model`` in place; returns the per-epoch history.

    Stops on max epochs or after ``patience_epochs`` epochs without validation
    improvement, whichever first; the learning rate halves every
    ``lr_halving_period`` consecutive non-improving epochs, floored at
    ``min_learning_rate``. The best-validation parameters are restored at the
    end. ``frozen_prefix`` freezes all layers before that index;
    ``trainable_only`` restricts updates to an explicit index set;
    ``mask_hook`` gates pruned weight blocks (see ``training_step``).
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("datasets must be non-empty")
    history = TrainHistory()
    if cfg.epochs == 0:
        return history

    if trainable_only is not None:
        update = set(trainable_only)
    elif frozen_prefix is not None:
        update = set(range(frozen_prefix, len(model.layers)))
    else:
        update = None

    masks = None
    if mask_hook is not None:
        masks = mask_hook.element_masks() if hasattr(mask_hook, "element_masks") else dict(mask_hook)

    rng = np.random.default_rng(cfg.seed)
    optimizer = make_optimizer(cfg.optimizer)
    higher_better = cfg.loss != "mse"
    metric = "mse" if cfg.loss == "mse" else "accuracy"

    lr = cfg.learning_rate
    best = None
    best_snap = None
    since_improve = 0

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_data))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            value = training_step(model, train_data.x[idx], train_data.y[idx],
                                  cfg.loss, optimizer, lr, update, masks)
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch, value)
            losses.append(value)

        val = evaluate(model, val_data, metric)
        history.loss.append(float(np.mean(losses)))
        history.val_metric.append(val)
        history.lr.append(lr)

        if _improved(val, best, higher_better):
            best = val
            best_snap = _snapshot(model)
            history.best_epoch = epoch
            since_improve = 0
        else:
            since_improve += 1
            if since_improve % cfg.lr_halving_period == 0:
                lr = max(lr / 2.0, cfg.min_learning_rate)
            if since_improve >= cfg.patience_epochs:
                history.stopped_early = True
                break

    if best_snap is not None:
        _restore(model, best_snap)
    return history


def evaluate(model, data, metric="accuracy"):
    """Accuracy (argmax; threshold 0.5 on single-unit outputs) or MSE."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    out = model.predict(data.x)
    if metric == "mse":
        return float(((out - data.y) ** 2).mean())
    if metric != "accuracy":
        raise ValueError(f"unknown metric {metric!r}")
    if out.shape[-1] == 1:
        pred = (out[:, 0] >= 0.5).astype(int)
        truth = (data.y[:, 0] >= 0.5).astype(int) if data.y.ndim > 1 else (data.y >= 0.5).astype(int)
    else:
        pred = out.argmax(axis=-1)
        truth = data.y.argmax(axis=-1)
    return float((pred == truth).mean())
