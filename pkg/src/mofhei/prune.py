"""Packing-aligned iterative block pruning and structural shrinking.

Weight matrices are partitioned into blocks (default: one block per column,
M x 1, matching batch packing where one plaintext carries one weight). Block
masks evolve over training on a cubic sparsity schedule; blocks are re-ranked
from scratch each pruning step by mean |weight|, so a block can revive before
the final step. Once the target sparsity is reached the masks freeze, and
``shrink`` deletes the all-zero columns (units/filters) plus the matching
rows of the following layer, then fine-tunes.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .nncore import Model, evaluate, train
from .nncore.layers import im2col as _gather_cols
from .nncore.train import make_optimizer, training_step
from .transform import infer_loss, val_metric_kind


@dataclass
class PruningSchedule:
    final_sparsity: float
    initial_sparsity: float = 0.0
    steps: int = 1  # number of pruning steps n
    start_step: int = 0  # t_0 in training steps
    delta_t: int = 1  # pruning frequency in training steps

    def __post_init__(self):
        if not 0.0 <= self.initial_sparsity <= self.final_sparsity < 1.0:
            raise ValueError("need 0 <= initial <= final sparsity < 1")
        if self.steps < 1 or self.delta_t < 1:
            raise ValueError("steps and delta_t must be >= 1")

    @property
    def freeze_at(self):
        return self.start_step + self.steps * self.delta_t


def schedule_sparsity(sched, t):
    """Cubic ramp from initial to final sparsity.

    s_t = s_f + (s_i - s_f) * (1 - (t - t_0)/(n*dt))^3, clamped to the
    [s_i, s_f] band; exact at both endpoints.
    """
    if t < sched.start_step:
        raise ValueError(f"step {t} precedes schedule start {sched.start_step}")
    if t == sched.start_step:
        return sched.initial_sparsity
    if t >= sched.freeze_at:
        return sched.final_sparsity
    frac = (t - sched.start_step) / (sched.steps * sched.delta_t)
    s = sched.final_sparsity + (sched.initial_sparsity - sched.final_sparsity) * (1 - frac) ** 3
    return float(min(max(s, sched.initial_sparsity), sched.final_sparsity))


@dataclass
class BlockMask:
    layer_index: int
    block_shape: tuple  # (bh, bw)
    weight_shape: tuple  # (rows, cols) of the 2-D weight view
    grid: np.ndarray = None  # (ceil(rows/bh), ceil(cols/bw)) of 0/1
    frozen: bool = False

    def __post_init__(self):
        bh, bw = self.block_shape
        rows, cols = self.weight_shape
        shape = (math.ceil(rows / bh), math.ceil(cols / bw))
        if self.grid is None:
            self.grid = np.ones(shape, dtype=np.int8)
        else:
            self.grid = np.asarray(self.grid, dtype=np.int8)
            if self.grid.shape != shape:
                raise ValueError(f"grid shape {self.grid.shape} != expected {shape}")

    @property
    def n_blocks(self):
        return self.grid.size

    def element_mask(self):
        """Expand the block grid to a (rows, cols) 0/1 array."""
        bh, bw = self.block_shape
        full = np.repeat(np.repeat(self.grid, bh, axis=0), bw, axis=1)
        rows, cols = self.weight_shape
        return full[:rows, :cols].astype(float)


@dataclass
class PruneState:
    schedule: PruningSchedule
    masks: list
    freeze_step: int = None

    def mask_for(self, layer_index):
        for m in self.masks:
            if m.layer_index == layer_index:
                return m
        raise KeyError(f"no mask for layer {layer_index}")

    def element_masks(self):
        return {m.layer_index: m.element_mask() for m in self.masks}

    def to_json_obj(self):
        return {
            "schedule": {
                "initial_sparsity": self.schedule.initial_sparsity,
                "final_sparsity": self.schedule.final_sparsity,
                "steps": self.schedule.steps,
                "start_step": self.schedule.start_step,
                "delta_t": self.schedule.delta_t,
            },
            "freeze_step": self.freeze_step,
            "masks": [
                {
                    "layer_index": m.layer_index,
                    "block_shape": list(m.block_shape),
                    "weight_shape": list(m.weight_shape),
                    "frozen": m.frozen,
                    "grid": ["".join(str(int(b)) for b in row) for row in m.grid],
                }
                for m in self.masks
            ],
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_obj(), fh, indent=1)

    @classmethod
    def from_json_obj(cls, obj):
        sched = PruningSchedule(
            final_sparsity=obj["schedule"]["final_sparsity"],
            initial_sparsity=obj["schedule"]["initial_sparsity"],
            steps=obj["schedule"]["steps"],
            start_step=obj["schedule"]["start_step"],
            delta_t=obj["schedule"]["delta_t"],
        )
        masks = [
            BlockMask(
                layer_index=m["layer_index"],
                block_shape=tuple(m["block_shape"]),
                weight_shape=tuple(m["weight_shape"]),
                grid=np.array([[int(c) for c in row] for row in m["grid"]], dtype=np.int8),
                frozen=m["frozen"],
            )
            for m in obj["masks"]
        ]
        return cls(sched, masks, obj.get("freeze_step"))

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_obj(json.load(fh))


def generate_block_masks(model, block_shapes=None):
    """All-ones masks for every prunable layer (Dense/Conv2D bar the output).

    Default block shape is one whole column, (rows, 1): column pruning for
    Dense, filter pruning for Conv2D via its (M, F) flattened view. The weight
    matrix is conceptually zero-padded up to block multiples.
    """
    block_shapes = block_shapes or {}
    masks = []
    for idx in model.prunable_indices():
        wm = model.layers[idx].weight_matrix()
        shape = tuple(block_shapes.get(idx, (wm.shape[0], 1)))
        if shape[0] < 1 or shape[1] < 1:
            raise ValueError(f"bad block shape {shape} for layer {idx}")
        masks.append(BlockMask(idx, shape, wm.shape))
    return masks


def _block_means(wm, block_shape):
    """Mean |w| per block over real (non-padding) cells."""
    bh, bw = block_shape
    rows, cols = wm.shape
    gr, gc = math.ceil(rows / bh), math.ceil(cols / bw)
    padded = np.zeros((gr * bh, gc * bw))
    padded[:rows, :cols] = np.abs(wm)
    sums = padded.reshape(gr, bh, gc, bw).sum(axis=(1, 3))
    row_counts = np.minimum(bh, rows - np.arange(gr) * bh)
    col_counts = np.minimum(bw, cols - np.arange(gc) * bw)
    return sums / np.outer(row_counts, col_counts)


def prune_step(masks, model, s_t):
    """Recompute every mask from scratch at sparsity level ``s_t``.

    Blocks are ranked by mean |weight| (ties by block row then column) and the
    floor(s_t * blocks) smallest are zeroed; at least one block survives per
    layer. Because ranking starts from the dense weights each time, a block
    pruned earlier can revive while the schedule is still running.
    """
    for mask in masks:
        if mask.frozen:
            raise ValueError(f"mask for layer {mask.layer_index} is frozen")
        means = _block_means(model.layers[mask.layer_index].weight_matrix(),
                             mask.block_shape)
        gr, gc = means.shape
        rows, cols = np.divmod(np.arange(means.size), gc)
        order = np.lexsort((cols, rows, means.ravel()))
        n_prune = min(int(math.floor(s_t * means.size)), means.size - 1)
        grid = np.ones(means.size, dtype=np.int8)
        grid[order[:n_prune]] = 0
        mask.grid = grid.reshape(gr, gc)
    return masks


def iterative_block_prune(model, sched, train_data, val_data, cfg, block_shapes=None):
    """Mask-gated training with scheduled pruning (returns model, PruneState).

    Pruning fires every ``delta_t`` optimizer steps from ``start_step`` until
    the schedule completes, after which masks freeze and ordinary early
    stopping (patience, LR halving, best-weight restore) takes over. Masked
    weights read as zero in the forward pass and receive no updates.
    """
    if not model.is_he_friendly():
        bad = model.non_he_friendly_layers()
        raise ValueError(f"model must be HE-friendly before pruning; found {bad}")
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("datasets must be non-empty")

    work = model.copy()
    masks = generate_block_masks(work, block_shapes)
    state = PruneState(sched, masks)
    loss = work.metadata.get("loss") or infer_loss(work)
    metric = val_metric_kind(loss)
    higher_better = metric != "mse"

    optimizer = make_optimizer(cfg.optimizer)
    rng = np.random.default_rng(cfg.seed)
    lr = cfg.learning_rate
    t = 0
    frozen = False
    best = None
    best_snap = None
    since_improve = 0
    element_masks = {m.layer_index: m.element_mask() for m in masks}

    def freeze(step):
        for m in masks:
            m.frozen = True
        state.freeze_step = step

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_data))
        for start in range(0, len(order), cfg.batch_size):
            if not frozen and t >= sched.start_step:
                if t >= sched.freeze_at:
                    prune_step(masks, work, schedule_sparsity(sched, sched.freeze_at))
                    freeze(t)
                    frozen = True
                    element_masks = {m.layer_index: m.element_mask() for m in masks}
                elif (t - sched.start_step) % sched.delta_t == 0:
                    prune_step(masks, work, schedule_sparsity(sched, t))
                    element_masks = {m.layer_index: m.element_mask() for m in masks}
            idx = order[start:start + cfg.batch_size]
            value = training_step(work, train_data.x[idx], train_data.y[idx],
                                  loss, optimizer, lr, None, element_masks)
            if not np.isfinite(value):
                from .errors import TrainingDivergedError
                raise TrainingDivergedError(epoch, value)
            t += 1

        if not frozen:
            continue
        val = evaluate(work, val_data, metric)
        improved = (best is None or
                    (val > best + 1e-12 if higher_better else val < best - 1e-12))
        if improved:
            best = val
            best_snap = [{k: v.copy() for k, v in l.param_arrays().items()}
                         for l in work.layers]
            since_improve = 0
        else:
            since_improve += 1
            if since_improve % cfg.lr_halving_period == 0:
                lr = max(lr / 2.0, cfg.min_learning_rate)
            if since_improve >= cfg.patience_epochs:
                break

    if not frozen:  # schedule longer than the training run: freeze at the end
        t_eff = min(max(t, sched.start_step), sched.freeze_at)
        prune_step(masks, work, schedule_sparsity(sched, t_eff))
        freeze(t)
        element_masks = {m.layer_index: m.element_mask() for m in masks}

    if best_snap is not None:
        for layer, arrays in zip(work.layers, best_snap):
            for name, arr in layer.param_arrays().items():
                arr[...] = arrays[name]
    for layer_index, em in element_masks.items():
        work.layers[layer_index].mask = em
    work.metadata.update({"stage": "pruned",
                          "layer_sparsity": sched.final_sparsity})
    return work, state


@dataclass
class ConvDenseShapes:
    filters: int
    kernel: tuple  # (I, J)
    channels: int  # K
    out_spatial: tuple  # (U, V)

    @property
    def m(self):
        return self.kernel[0] * self.kernel[1] * self.channels

    @property
    def n(self):
        return self.out_spatial[0] * self.out_spatial[1]


def conv_to_dense_view(conv):
    """Flattened (M, F) weight view of a built Conv2D plus its dimensions."""
    if conv.kind != "conv2d" or conv.input_shape is None:
        raise ValueError("need a built Conv2D layer")
    u, v, f = conv.output_shape
    shapes = ConvDenseShapes(f, conv.kernel, conv.input_shape[2], (u, v))
    return conv.weight_matrix(), shapes


def im2col(x, conv):
    """One instance (H, W, K) -> chunk matrix (N, M); rows enumerate stride
    positions row-major, columns the (I, J, K) cells; padding reads zero."""
    x = np.asarray(x, dtype=float)
    if x.shape != tuple(conv.input_shape):
        raise ValueError(f"input {x.shape} != conv input {conv.input_shape}")
    return _gather_cols(x[None], conv._idx)[0]


def shrink(model, state, train_data=None, val_data=None, cfg=None):
    """Delete pruned columns (units/filters) and the matching rows downstream.

    Requires frozen masks. Partially-masked blocks that do not empty a whole
    column are written back as literal zeros. When ``cfg`` is given, one
    fine-tuning round recovers the residual loss; the output layer is never
    pruned.
    """
    for m in state.masks:
        if not m.frozen:
            raise ValueError("masks must be frozen before shrinking")

    work = model.copy()
    for idx, em in state.element_masks().items():
        layer = work.layers[idx]
        layer.weight_matrix()[...] *= em
        layer.b[...] *= em.any(axis=0)
        layer.mask = None

    pruned = {m.layer_index for m in state.masks}
    kept_features = None  # surviving feature indices of the running tensor
    kept_channels = None  # surviving channel indices (image tensors)

    for idx, layer in enumerate(work.layers):
        if layer.kind == "dense":
            if kept_features is not None:
                layer.w = layer.w[kept_features, :]
            kept_features = None
            kept_channels = None
            if idx in pruned:
                cols = _kept_columns_from_weights(layer.w)
                if cols.size == 0:
                    raise ValueError(f"layer {idx} shrank to zero units")
                layer.w = layer.w[:, cols]
                layer.b = layer.b[cols]
                layer.units = layer.w.shape[1]
                kept_features = cols
            else:
                layer.units = layer.w.shape[1]
        elif layer.kind == "conv2d":
            if kept_channels is not None:
                layer.w = layer.w[:, :, kept_channels, :]
            kept_features = None
            kept_channels = None
            if idx in pruned:
                wm = layer.w.reshape(-1, layer.w.shape[-1])
                cols = _kept_columns_from_weights(wm)
                if cols.size == 0:
                    raise ValueError(f"layer {idx} shrank to zero filters")
                layer.w = layer.w[..., cols]
                layer.b = layer.b[cols]
                layer.filters = layer.w.shape[-1]
                kept_channels = cols
            else:
                layer.filters = layer.w.shape[-1]
        elif layer.kind == "flatten":
            if kept_channels is not None:
                kept_features = _flatten_kept(layer.input_shape, kept_channels)
                kept_channels = None
        # pooling/activation layers preserve the channel structure

    shrunk = Model(work.input_shape, work.layers, seed=work.seed, metadata=work.metadata)
    shrunk.metadata["stage"] = "shrunk"

    if cfg is not None and train_data is not None and cfg.epochs > 0:
        train(shrunk, train_data, val_data, cfg)
    return shrunk


def _kept_columns_from_weights(wm):
    return np.nonzero(np.abs(wm).sum(axis=0) > 0)[0]


def _flatten_kept(flat_input_shape, kept_channels):
    """Row indices of a post-flatten dense layer that survive channel removal.

    ``flat_input_shape`` is the flatten layer's original (U, V, C) input; the
    dense weight rows are indexed u*V*C + v*C + c in channel-last order.
    """
    u, v, c = flat_input_shape
    grid = np.arange(u * v * c).reshape(u, v, c)
    return grid[:, :, np.asarray(kept_channels)].ravel()


def sparsity_report(original, shrunk):
    """Per-layer and overall parameter sparsity between two models.

    Layers are matched pairwise over parameterized layers in order. Per-layer
    entries cover prunable layers; the overall figure spans every
    parameterized layer, so downstream row removals count too.
    """
    orig_idx = original.parameterized_indices()
    new_idx = shrunk.parameterized_indices()
    if len(orig_idx) != len(new_idx):
        raise ValueError("models have different parameterized layer counts")

    per_layer = []
    total_orig = 0
    total_kept = 0
    prunable = set(original.prunable_indices())
    for oi, ni in zip(orig_idx, new_idx):
        o = original.layers[oi]
        s = shrunk.layers[ni]
        n_orig = o.w.size + o.b.size
        n_kept = s.w.size + s.b.size
        total_orig += n_orig
        total_kept += n_kept
        if oi in prunable:
            units_attr = "units" if o.kind == "dense" else "filters"
            per_layer.append({
                "layer_index": oi,
                "kind": o.kind,
                "units_before": getattr(o, units_attr),
                "units_after": getattr(s, units_attr),
                "sparsity": 1.0 - n_kept / n_orig,
            })
    return {"per_layer": per_layer, "overall": 1.0 - total_kept / total_orig}
