"""Private-inference engine over the packed-op simulator.

``compile`` lowers an HE-friendly model into per-layer programs of
output-unit tasks (convolutions via their dense view: one task per output
element over M = I*J*K inputs, with padding positions referencing a shared
encrypted zero). ``execute`` runs the tasks over the slot matrix, skipping
zero-weight plaintexts while counting everything; ``analyze_cost`` produces
the same numbers statically, so executed + skipped counters must equal the
analysis exactly. Parallelism distributes tasks across workers; tasks write
disjoint outputs, so no locks are needed and results are worker-invariant.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import backends
from .errors import DepthBudgetError, NotHeFriendlyError
from .hesim import (
    OpCounters, PackedVec, batch_pack, ciphertext_bytes, plaintext_bytes, unpack,
)


@dataclass
class TaskLayer:
    """Dense layer or conv-as-dense: one task per output unit/element."""

    index: int
    kind: str
    units: int  # reported unit count: Q for dense, F (filters) for conv
    idx: np.ndarray  # (n_tasks, M) int32 input features; -1 = encrypted zero
    weights: np.ndarray  # (n_tasks, M)
    bias: np.ndarray  # (n_tasks,)
    depth_cost = 1

    @property
    def n_tasks(self):
        return self.idx.shape[0]

    @property
    def n_out(self):
        return self.n_tasks


@dataclass
class PoolLayer:
    index: int
    win: np.ndarray  # (n_out, k) int32 input features per output
    inv_k: float
    depth_cost = 1

    @property
    def n_out(self):
        return self.win.shape[0]


@dataclass
class ActLayer:
    index: int
    kind: str  # polyact | squareact
    n: int
    coeffs: np.ndarray = None

    @property
    def depth_cost(self):
        return 1 if self.kind == "squareact" else len(self.coeffs) - 1

    @property
    def n_out(self):
        return self.n


@dataclass
class PassLayer:
    index: int
    n: int
    depth_cost = 0

    @property
    def n_out(self):
        return self.n


@dataclass
class PiProgram:
    layers: list
    n_input_features: int
    n_output_features: int
    static_depth: int


def _conv_task_layer(index, layer):
    wm = layer.effective_weights()  # (M, F)
    f = layer.filters
    uv = layer._idx.shape[0]
    idx = np.ascontiguousarray(np.repeat(layer._idx, f, axis=0), dtype=np.int32)
    weights = np.ascontiguousarray(np.tile(wm.T, (uv, 1)))
    bias = np.ascontiguousarray(np.tile(layer.effective_bias(), uv))
    return TaskLayer(index, "conv2d", f, idx, weights, bias)


def _dense_task_layer(index, layer):
    w = layer.effective_weights()  # (M, Q)
    q = layer.units
    m = w.shape[0]
    idx = np.ascontiguousarray(np.tile(np.arange(m, dtype=np.int32), (q, 1)))
    return TaskLayer(index, "dense", q, idx, np.ascontiguousarray(w.T),
                     np.ascontiguousarray(layer.effective_bias()))


def _pool_layer(index, layer):
    c = layer.input_shape[2]
    spatial = layer._idx  # (U*V, k) over spatial positions
    win = (spatial[:, None, :] * c + np.arange(c, dtype=np.int32)[None, :, None])
    return PoolLayer(index, win.reshape(-1, spatial.shape[1]).astype(np.int32),
                     1.0 / spatial.shape[1])


def _lower(model):
    bad = model.non_he_friendly_layers()
    if bad:
        raise NotHeFriendlyError(*bad[0])
    layers = []
    depth = 0
    for i, layer in enumerate(model.layers):
        if layer.kind == "dense":
            layers.append(_dense_task_layer(i, layer))
        elif layer.kind == "conv2d":
            layers.append(_conv_task_layer(i, layer))
        elif layer.kind == "avgpool2d":
            layers.append(_pool_layer(i, layer))
        elif layer.kind == "polyact":
            layers.append(ActLayer(i, "polyact", int(np.prod(layer.output_shape)),
                                   layer.coeffs.copy()))
        elif layer.kind == "squareact":
            layers.append(ActLayer(i, "squareact", int(np.prod(layer.output_shape))))
        else:  # flatten
            layers.append(PassLayer(i, int(np.prod(layer.output_shape))))
        depth += layers[-1].depth_cost
    return PiProgram(layers, int(np.prod(model.input_shape)),
                     int(np.prod(model.output_shape)), depth)


def compile(model, cfg):
    """Lower an HE-friendly model to a packed-op program.

    Raises on non-HE-friendly layers and when the program's static
    multiplicative depth exceeds the configured budget.
    """
    program = _lower(model)
    if program.static_depth > cfg.max_depth:
        raise DepthBudgetError(
            f"program needs depth {program.static_depth} but the budget is "
            f"{cfg.max_depth}")
    return program


@dataclass
class LayerCost:
    index: int
    kind: str
    units: int
    ops: dict  # executed counts by op kind
    skipped_mul: int
    skipped_add: int
    total: int  # executed + skipped: the layer's full HE-operation count

    def executed(self):
        return sum(self.ops.values())


@dataclass
class CostReport:
    per_layer: list
    totals: dict  # executed counts by kind, summed over layers
    total_ops: int  # full cost including skipped ops
    executed_ops: int
    skipped_mul: int
    skipped_add: int
    static_depth: int
    peak_memory_bytes: int
    runtime: dict = field(default_factory=dict)

    def layer_by_index(self, index):
        for lc in self.per_layer:
            if lc.index == index:
                return lc
        raise KeyError(index)

    def prunable_layer_totals(self):
        return [lc.total for lc in self.per_layer if lc.kind in ("dense", "conv2d")]

    def to_json_obj(self):
        return {
            "per_layer": [
                {"layer": lc.index, "kind": lc.kind, "units": lc.units,
                 "ops": lc.ops, "skipped_mul": lc.skipped_mul,
                 "skipped_add": lc.skipped_add, "total": lc.total}
                for lc in self.per_layer
            ],
            "totals": self.totals,
            "total_ops": self.total_ops,
            "executed_ops": self.executed_ops,
            "skipped_mul": self.skipped_mul,
            "skipped_add": self.skipped_add,
            "static_depth": self.static_depth,
            "peak_memory_bytes": self.peak_memory_bytes,
            "runtime": self.runtime,
        }

    def to_csv(self):
        lines = ["layer,kind,units,heo"]
        for lc in self.per_layer:
            lines.append(f"{lc.index},{lc.kind},{lc.units},{lc.total}")
        lines.append(f"total,,,{self.total_ops}")
        return "\n".join(lines) + "\n"


def _task_layer_cost(prog):
    """Executed/skipped split of a task layer from its weight zero pattern."""
    nz = np.count_nonzero(prog.weights, axis=1)  # live terms per task
    m = prog.weights.shape[1]
    exec_mul = int(nz.sum())
    exec_add = int(np.maximum(nz - 1, 0).sum())
    exec_bias = int(np.count_nonzero(prog.bias))
    n = prog.n_tasks
    total = n * 2 * m
    ops = {"ct_pt_mul": exec_mul, "ct_ct_mul": 0, "ct_add": exec_add,
           "ct_pt_add": exec_bias}
    skipped_mul = n * m - exec_mul
    skipped_add = (n * (m - 1) - exec_add) + (n - exec_bias)
    return ops, skipped_mul, skipped_add, total


def _act_layer_cost(prog):
    if prog.kind == "squareact":
        ops = {"ct_pt_mul": 0, "ct_ct_mul": prog.n, "ct_add": 0, "ct_pt_add": 0}
        return ops, prog.n
    d = len(prog.coeffs) - 1
    ops = {"ct_pt_mul": d * prog.n, "ct_ct_mul": (d - 1) * prog.n,
           "ct_add": (d - 1) * prog.n, "ct_pt_add": prog.n}
    return ops, (3 * d - 1) * prog.n


def _layer_live_bytes(cfg, n_orig, n_in, in_level, n_out, out_level, is_first):
    """Deterministic live-set model for one layer's execution window.

    The caller-owned input ciphertexts stay live for the whole run; the
    layer's own inputs and the outputs built so far coexist at their levels;
    task-transient values (weight plaintexts, accumulator, product) add a
    small constant.
    """
    orig = n_orig * ciphertext_bytes(cfg.max_depth, cfg)
    inb = 0 if is_first else n_in * ciphertext_bytes(in_level, cfg)
    outb = n_out * ciphertext_bytes(out_level, cfg)
    temp = 4 * ciphertext_bytes(in_level, cfg) + 2 * plaintext_bytes(cfg)
    return orig + inb + outb + temp


def analyze_cost(model, cfg):
    """Closed-form HE-operation counts, depth, and peak memory; no execution.

    Unlike ``compile`` this never raises on depth: the report carries
    ``static_depth`` for the caller to compare against any budget.
    """
    program = _lower(model)
    per_layer = []
    totals = {k: 0 for k in OpCounters.KINDS}
    skipped_mul = 0
    skipped_add = 0
    total_ops = 0

    level = cfg.max_depth
    n_orig = program.n_input_features
    n_in = n_orig
    peak = 0

    for prog in program.layers:
        if isinstance(prog, TaskLayer):
            ops, s_mul, s_add, total = _task_layer_cost(prog)
            units = prog.units
        elif isinstance(prog, PoolLayer):
            k = prog.win.shape[1]
            ops = {"ct_pt_mul": prog.n_out, "ct_ct_mul": 0,
                   "ct_add": prog.n_out * (k - 1), "ct_pt_add": 0}
            s_mul = s_add = 0
            total = prog.n_out * k
            units = prog.n_out
        elif isinstance(prog, ActLayer):
            ops, total = _act_layer_cost(prog)
            s_mul = s_add = 0
            units = prog.n
        else:
            ops = {k: 0 for k in OpCounters.KINDS}
            s_mul = s_add = total = 0
            units = prog.n_out

        model_layer = model.layers[prog.index]
        out_level = max(level - prog.depth_cost, 0)
        peak = max(peak, _layer_live_bytes(cfg, n_orig, n_in, level,
                                           prog.n_out, out_level,
                                           prog.index == 0))
        per_layer.append(LayerCost(prog.index, model_layer.kind, units, ops,
                                   s_mul, s_add, total))
        for k, v in ops.items():
            totals[k] += v
        skipped_mul += s_mul
        skipped_add += s_add
        total_ops += total
        level = out_level
        n_in = prog.n_out

    executed = sum(totals.values())
    return CostReport(per_layer, totals, total_ops, executed, skipped_mul,
                      skipped_add, program.static_depth, peak)


def _run_task_layer(prog, slots, levels, workers, run_kernel):
    n_tasks = prog.n_tasks
    out = np.zeros((n_tasks, slots.shape[1]))
    out_levels = np.zeros(n_tasks, dtype=np.int64)
    pad_level = int(levels.min())
    bounds = np.linspace(0, n_tasks, min(workers, n_tasks) + 1).astype(int)
    chunk_counts = [np.zeros(6, dtype=np.int64) for _ in range(len(bounds) - 1)]

    def run(ci):
        return run_kernel(slots, levels, pad_level, prog.idx, prog.weights,
                          prog.bias, out, out_levels, chunk_counts[ci],
                          int(bounds[ci]), int(bounds[ci + 1]))

    if len(chunk_counts) <= 1:
        results = [run(0)] if chunk_counts else []
    else:
        with ThreadPoolExecutor(max_workers=len(chunk_counts)) as pool:
            results = list(pool.map(run, range(len(chunk_counts))))
    for bad in results:
        if bad >= 0:
            raise DepthBudgetError("ciphertext level exhausted", layer_index=prog.index)
    merged = np.zeros(6, dtype=np.int64)
    for c in chunk_counts:
        merged += c
    return out, out_levels, merged


def execute(program, packed_input, workers=1, cfg=None, counters=None):
    """Run a compiled program over packed inputs; returns (outputs, counters).

    Results and merged counters are identical for every worker count: tasks
    write disjoint outputs and per-chunk counters merge by summation.
    """
    if len(packed_input) != program.n_input_features:
        raise ValueError(f"program expects {program.n_input_features} input "
                         f"ciphertexts, got {len(packed_input)}")
    if workers < 1:
        raise ValueError("workers must be >= 1")
    counters = counters if counters is not None else OpCounters()
    run_kernel = backends.run_dense_tasks

    slots = np.ascontiguousarray(np.stack([v.slots for v in packed_input]))
    levels = np.array([v.level for v in packed_input], dtype=np.int64)
    orig_levels = levels.copy()
    first = True

    for prog in program.layers:
        in_level = int(levels.min())
        if isinstance(prog, TaskLayer):
            slots_new, levels_new, counts = _run_task_layer(
                prog, slots, levels, workers, run_kernel)
            counters.ct_pt_mul += int(counts[0])
            counters.ct_ct_mul += int(counts[1])
            counters.ct_add += int(counts[2])
            counters.ct_pt_add += int(counts[3])
            counters.skipped_mul += int(counts[4])
            counters.skipped_add += int(counts[5])
        elif isinstance(prog, PoolLayer):
            win_levels = levels[prog.win]
            if win_levels.min() < 1:
                raise DepthBudgetError("ciphertext level exhausted",
                                       layer_index=prog.index)
            gathered = slots[prog.win]  # (n_out, k, b)
            slots_new = gathered.sum(axis=1) * prog.inv_k
            levels_new = win_levels.min(axis=1) - 1
            k = prog.win.shape[1]
            counters.ct_add += prog.n_out * (k - 1)
            counters.ct_pt_mul += prog.n_out
        elif isinstance(prog, ActLayer):
            need = prog.depth_cost
            if levels.min() < need:
                raise DepthBudgetError("ciphertext level exhausted",
                                       layer_index=prog.index)
            if prog.kind == "squareact":
                slots_new = slots * slots
                counters.ct_ct_mul += prog.n
            else:
                d = len(prog.coeffs) - 1
                power = slots
                acc = prog.coeffs[1] * slots
                for k in range(2, d + 1):
                    power = power * slots
                    acc = acc + prog.coeffs[k] * power
                acc = acc + prog.coeffs[0]
                slots_new = acc
                counters.ct_ct_mul += (d - 1) * prog.n
                counters.ct_pt_mul += d * prog.n
                counters.ct_add += (d - 1) * prog.n
                counters.ct_pt_add += prog.n
            levels_new = levels - need
        else:  # PassLayer
            slots_new, levels_new = slots, levels

        if not isinstance(prog, PassLayer):
            if cfg is not None:
                orig_b = sum(ciphertext_bytes(int(l), cfg) for l in orig_levels)
                in_b = 0 if first else sum(ciphertext_bytes(int(l), cfg) for l in levels)
                out_b = sum(ciphertext_bytes(int(l), cfg) for l in levels_new)
                temp = 4 * ciphertext_bytes(in_level, cfg) + 2 * plaintext_bytes(cfg)
                counters.peak_live_bytes = max(counters.peak_live_bytes,
                                               int(orig_b + in_b + out_b + temp))
            slots, levels = np.ascontiguousarray(slots_new), levels_new
            first = False
        else:
            slots, levels = slots_new, levels_new

    out = [PackedVec("ct", slots[i].copy(), level=int(levels[i]))
           for i in range(slots.shape[0])]
    return out, counters


def infer(model, batch, cfg, workers=1):
    """Packed end-to-end inference: pack, execute, unpack.

    Batches larger than the slot capacity run in chunks; counters accumulate
    across chunks (sums; peak memory by max). Returns predictions shaped like
    the plaintext forward pass, plus a cost report with runtime counters.
    """
    t0 = time.perf_counter()
    batch = np.asarray(batch, dtype=float)
    n = batch.shape[0]
    flat = batch.reshape(n, -1)
    program = compile(model, cfg)
    report = analyze_cost(model, cfg)

    counters = OpCounters()
    chunks = []
    n_chunks = 0
    for start in range(0, n, cfg.slots):
        part = flat[start:start + cfg.slots]
        packed = batch_pack(part, cfg)
        out_vecs, counters = execute(program, packed, workers=workers, cfg=cfg,
                                     counters=counters)
        chunks.append(unpack(out_vecs, part.shape[0]))
        n_chunks += 1

    preds = np.concatenate(chunks, axis=0).reshape(n, *model.output_shape)
    report.runtime = {
        "counters": counters.as_dict(),
        "wall_time_s": time.perf_counter() - t0,
        "workers": workers,
        "batch_chunks": n_chunks,
        "backend": backends.BACKEND_NAME,
    }
    return preds, report
