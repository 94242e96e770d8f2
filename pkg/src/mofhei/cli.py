"""Command-line pipeline driver.

Every stage reads a model file and writes a new one; nothing on disk is
mutated in place. Exit codes: 2 bad arguments, 3 parse error, 4 depth budget
exceeded, 5 training divergence.
"""

import argparse
import json
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import architectures, datasets, pi, prune as prune_mod, transform
from .errors import (
    DatasetError, DepthBudgetError, ModelFormatError, TrainingDivergedError,
)
from .hesim import PackingConfig
from .nncore import TrainConfig, evaluate, load_model, save_model, train
from .transform import HefConfig, infer_loss, val_metric_kind

EXIT_BAD_ARGS = 2
EXIT_PARSE = 3
EXIT_DEPTH = 4
EXIT_DIVERGED = 5


def load_config(path):
    if not path:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def resolve_dataset(spec, seed, samples, for_arch=None):
    """(train, val, test) for 'mnist', 'egss', or 'synthetic:<kind>'."""
    if spec == "mnist":
        splits = datasets.load_mnist_dir(seed=seed)
    elif spec == "egss":
        root = datasets.data_dir()
        candidates = [os.path.join(root, n)
                      for n in ("egss.csv", "Data_for_UCI_named.csv")]
        found = [c for c in candidates if os.path.exists(c)]
        if not found:
            raise DatasetError(f"no EGSS csv under {root} (looked for "
                               f"{[os.path.basename(c) for c in candidates]})")
        splits = datasets.load_egss_csv(found[0], seed=seed)
    elif spec.startswith("synthetic:"):
        kind = spec.split(":", 1)[1]
        n_val = max(samples // 5, 1)
        splits = (datasets.synthetic(kind, samples, seed=seed),
                  datasets.synthetic(kind, n_val, seed=seed + 1),
                  datasets.synthetic(kind, n_val, seed=seed + 2))
    else:
        raise DatasetError(f"unknown dataset spec {spec!r}")
    if for_arch and for_arch.startswith("ae"):
        splits = tuple(datasets.autoencoder_view(ds) for ds in splits)
    return splits


def packing_config(args, cfg_file):
    section = dict(cfg_file.get("crypto", {}))
    for key in ("pmd", "cm_bits", "max_depth", "slots"):
        flag = getattr(args, key, None)
        if flag is not None:
            section[key] = flag
    return PackingConfig(**section) if section else PackingConfig()


def train_config(args, cfg_file, loss, defaults=None):
    section = dict(defaults or {})
    section.update(cfg_file.get("train", {}))
    for key in ("epochs", "learning_rate", "batch_size", "patience_epochs"):
        flag = getattr(args, key, None)
        if flag is not None:
            section[key] = flag
    section.setdefault("epochs", 50)
    section["loss"] = loss
    section["seed"] = args.seed
    return TrainConfig(**section)


def write_json(path, obj, seed):
    obj = dict(obj)
    obj.setdefault("seed", seed)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1)


def cmd_train(args):
    cfg_file = load_config(args.config)
    if args.model:
        model = load_model(args.model)
        arch = model.metadata.get("arch", "")
    else:
        builder = architectures.BUILDERS.get(args.arch)
        if builder is None:
            raise DatasetError(f"unknown architecture {args.arch!r}")
        model = builder(seed=args.seed)
        arch = args.arch
    loss = "mse" if arch.startswith("ae") else infer_loss(model)
    tr, va, te = resolve_dataset(args.dataset, args.seed, args.samples, arch)
    cfg = train_config(args, cfg_file, loss)
    history = train(model, tr, va, cfg)
    metric = val_metric_kind(loss)
    score = evaluate(model, te, metric)
    model.metadata.update({"stage": "trained", "loss": loss,
                           "test_metric": score, "seed": args.seed})
    save_model(model, args.out)
    if args.history:
        write_json(args.history, {"loss": history.loss, "val_metric": history.val_metric,
                                  "lr": history.lr, "test_metric": score,
                                  "metric": metric}, args.seed)
    print(f"trained {arch or args.model}: test {metric}={score:.4f} "
          f"({len(history)} epochs) -> {args.out}")


def cmd_make_hefriendly(args):
    cfg_file = load_config(args.config)
    model = load_model(args.model)
    arch = model.metadata.get("arch", "")
    tr, va, te = resolve_dataset(args.dataset, args.seed, args.samples, arch)
    section = dict(cfg_file.get("hef", {}))
    if args.activation:
        section["activation_mode"] = args.activation
    if args.poly_degree is not None:
        section["poly_degree"] = args.poly_degree
    section["seed"] = args.seed
    hef_cfg = HefConfig(**section)
    hef, log = transform.make_he_friendly(model, tr, va, hef_cfg)
    metric = val_metric_kind(model.metadata.get("loss") or infer_loss(model))
    score = evaluate(hef, te, metric)
    hef.metadata.update({"test_metric": score, "seed": args.seed})
    save_model(hef, args.out)
    if args.log:
        log.save(args.log)
    print(f"he-friendly: {len(log)} conversions, test {metric}={score:.4f} "
          f"-> {args.out}")


def _parse_block_shape(text):
    if not text:
        return None
    try:
        r, c = text.lower().split("x")
        return int(r), int(c)
    except ValueError as exc:
        raise DatasetError(f"bad --block-shape {text!r}, expected RxC") from exc


def cmd_prune(args):
    cfg_file = load_config(args.config)
    model = load_model(args.model)
    arch = model.metadata.get("arch", "")
    tr, va, te = resolve_dataset(args.dataset, args.seed, args.samples, arch)
    section = dict(cfg_file.get("prune", {}))
    loss = model.metadata.get("loss") or infer_loss(model)
    epochs = args.epochs or section.get("epochs", 30)
    cfg = TrainConfig(epochs=epochs,
                      learning_rate=section.get("learning_rate", 1e-3),
                      batch_size=section.get("batch_size", 64),
                      patience_epochs=section.get("patience_epochs", 10),
                      loss=loss, seed=args.seed)
    steps_per_epoch = max(1, int(np.ceil(len(tr) / cfg.batch_size)))
    n_steps = args.steps or section.get("steps") or max(1, int(0.6 * epochs))
    delta_t = args.delta_t or section.get("delta_t") or steps_per_epoch
    sched = prune_mod.PruningSchedule(final_sparsity=args.sparsity,
                                      steps=n_steps, delta_t=delta_t)
    shape = _parse_block_shape(args.block_shape)
    block_shapes = {i: shape for i in model.prunable_indices()} if shape else None
    pruned, state = prune_mod.iterative_block_prune(model, sched, tr, va, cfg,
                                                    block_shapes)
    metric = val_metric_kind(loss)
    score = evaluate(pruned, te, metric)
    pruned.metadata.update({"test_metric": score, "seed": args.seed})
    save_model(pruned, args.out)
    state.save(args.state)
    print(f"pruned at {args.sparsity:.0%}: test {metric}={score:.4f} "
          f"-> {args.out} (+ {args.state})")


def cmd_shrink(args):
    cfg_file = load_config(args.config)
    model = load_model(args.model)
    state = prune_mod.PruneState.load(args.state)
    arch = model.metadata.get("arch", "")
    tr, va, te = resolve_dataset(args.dataset, args.seed, args.samples, arch)
    loss = model.metadata.get("loss") or infer_loss(model)
    section = dict(cfg_file.get("prune", {}))
    epochs = args.epochs if args.epochs is not None else section.get("finetune_epochs", 20)
    cfg = TrainConfig(epochs=epochs, learning_rate=section.get("finetune_lr", 1e-4),
                      batch_size=section.get("batch_size", 64),
                      patience_epochs=section.get("patience_epochs", 10),
                      loss=loss, seed=args.seed) if epochs > 0 else None
    shrunk = prune_mod.shrink(model, state, tr, va, cfg)
    metric = val_metric_kind(loss)
    score = evaluate(shrunk, te, metric)
    shrunk.metadata.update({"test_metric": score, "seed": args.seed})
    save_model(shrunk, args.out)
    print(f"shrunk: test {metric}={score:.4f} -> {args.out}")


def cmd_infer_plain(args):
    model = load_model(args.model)
    arch = model.metadata.get("arch", "")
    _, _, te = resolve_dataset(args.dataset, args.seed, args.samples, arch)
    n = min(args.batch or len(te), len(te))
    preds = model.predict(te.x[:n])
    metric = val_metric_kind(model.metadata.get("loss") or infer_loss(model))
    score = evaluate(model, te.subset(np.arange(n)), metric)
    write_json(args.out, {"predictions": preds.reshape(n, -1).tolist(),
                          "metric": metric, "score": score}, args.seed)
    print(f"plain inference on {n} samples: {metric}={score:.4f} -> {args.out}")


def cmd_infer_he(args):
    cfg_file = load_config(args.config)
    model = load_model(args.model)
    arch = model.metadata.get("arch", "")
    _, _, te = resolve_dataset(args.dataset, args.seed, args.samples, arch)
    cfg = packing_config(args, cfg_file)
    n = min(args.batch or cfg.slots, len(te))
    preds, report = pi.infer(model, te.x[:n], cfg, workers=args.workers)
    write_json(args.out, {"predictions": preds.reshape(n, -1).tolist(),
                          "runtime": report.runtime}, args.seed)
    if args.report:
        write_json(args.report, report.to_json_obj(), args.seed)
    plain = model.predict(te.x[:n])
    agree = np.abs(preds - plain).max()
    print(f"he inference on {n} samples with {args.workers} workers "
          f"({report.runtime['backend']} backend): max|he-plain|={agree:.2e}, "
          f"{report.runtime['counters']['executed_total']} ops -> {args.out}")


def cmd_analyze_cost(args):
    cfg_file = load_config(args.config)
    model = load_model(args.model)
    cfg = packing_config(args, cfg_file)
    report = pi.analyze_cost(model, cfg)
    write_json(args.out, report.to_json_obj(), args.seed)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
    print(f"total HE ops: {report.total_ops} (depth {report.static_depth}, "
          f"peak memory {report.peak_memory_bytes / 2**30:.2f} GiB) -> {args.out}")


def build_comparison(hef_path, pruned_paths, cfg, seed, dataset=None, samples=2000):
    """Table-shaped comparison of an HE-friendly baseline vs pruned models."""
    hef = load_model(hef_path)
    base = pi.analyze_cost(hef, cfg)
    prunable_idx = set(hef.prunable_indices())
    base_prunable = [lc for lc in base.per_layer if lc.index in prunable_idx]

    def metric_of(model):
        if model.metadata.get("test_metric") is not None:
            return float(model.metadata["test_metric"])
        if dataset is None:
            return None
        arch = model.metadata.get("arch", "")
        _, _, te = resolve_dataset(dataset, seed, samples, arch)
        return evaluate(model, te,
                        val_metric_kind(model.metadata.get("loss") or infer_loss(model)))

    report = {
        "schema": "mofhei-report-v1",
        "seed": seed,
        "baseline": {
            "model": os.path.basename(hef_path),
            "total_heo": base.total_ops,
            "peak_memory_bytes": base.peak_memory_bytes,
            "metric": metric_of(hef),
            "per_layer": [{"layer": lc.index, "kind": lc.kind, "units": lc.units,
                           "heo": lc.total} for lc in base_prunable],
        },
        "pruned": [],
    }
    for path in pruned_paths:
        model = load_model(path)
        rep = pi.analyze_cost(model, cfg)
        prunable = [lc for lc in rep.per_layer
                    if lc.index in set(model.prunable_indices())]
        sparsity = prune_mod.sparsity_report(hef, model)
        per_layer = []
        for b, p in zip(base_prunable, prunable):
            per_layer.append({
                "layer": b.index, "kind": b.kind, "units": p.units,
                "reduction_factor": round(b.units / p.units, 2) if p.units else None,
                "heo": p.total,
            })
        report["pruned"].append({
            "model": os.path.basename(path),
            "sparsity_overall": sparsity["overall"],
            "total_heo": rep.total_ops,
            "heo_reduction": 1.0 - rep.total_ops / base.total_ops,
            "peak_memory_bytes": rep.peak_memory_bytes,
            "memory_reduction": 1.0 - rep.peak_memory_bytes / base.peak_memory_bytes,
            "metric": metric_of(model),
            "per_layer": per_layer,
        })
    return report


def comparison_csv(report):
    lines = ["model,sparsity,total_heo,heo_reduction,peak_memory_bytes,metric"]
    b = report["baseline"]
    lines.append(f"{b['model']},,{b['total_heo']},,{b['peak_memory_bytes']},"
                 f"{'' if b['metric'] is None else b['metric']}")
    for p in report["pruned"]:
        lines.append(f"{p['model']},{p['sparsity_overall']:.3f},{p['total_heo']},"
                     f"{p['heo_reduction']:.3f},{p['peak_memory_bytes']},"
                     f"{'' if p['metric'] is None else p['metric']}")
    return "\n".join(lines) + "\n"


def cmd_report(args):
    cfg_file = load_config(args.config)
    cfg = packing_config(args, cfg_file)
    report = build_comparison(args.hef, args.pruned or [], cfg, args.seed,
                              dataset=args.dataset, samples=args.samples)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(comparison_csv(report))
    print(f"report over {len(report['pruned'])} pruned model(s) -> {args.out}")


def _add_common(p, dataset=True):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--samples", type=int, default=2000,
                   help="training samples for synthetic datasets")
    if dataset:
        p.add_argument("--dataset", required=True,
                       help="mnist | egss | synthetic:<kind>")


def build_parser():
    parser = argparse.ArgumentParser(prog="mofhei", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from scratch or continue")
    p.add_argument("--arch", choices=sorted(architectures.BUILDERS))
    p.add_argument("--model", help="existing model to continue training")
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="write per-epoch history JSON here")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--patience-epochs", dest="patience_epochs", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("make-hefriendly", help="convert to HE-friendly form")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--activation", choices=["poly", "square"])
    p.add_argument("--poly-degree", dest="poly_degree", type=int)
    p.add_argument("--log", help="write the conversion log JSON here")
    _add_common(p)
    p.set_defaults(func=cmd_make_hefriendly)

    p = sub.add_parser("prune", help="iterative block pruning over training")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--state", required=True, help="PruneState JSON output path")
    p.add_argument("--sparsity", type=float, required=True)
    p.add_argument("--block-shape", dest="block_shape", help="RxC block shape")
    p.add_argument("--steps", type=int, help="number of pruning steps")
    p.add_argument("--delta-t", dest="delta_t", type=int,
                   help="pruning frequency in training steps")
    p.add_argument("--epochs", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("shrink", help="remove pruned units and fine-tune")
    p.add_argument("--model", required=True)
    p.add_argument("--state", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, help="fine-tune epochs (0 disables)")
    _add_common(p)
    p.set_defaults(func=cmd_shrink)

    p = sub.add_parser("infer-plain", help="plaintext inference")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_infer_plain)

    p = sub.add_parser("infer-he", help="simulated private inference")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="write the cost report JSON here")
    p.add_argument("--batch", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--pmd", type=int)
    p.add_argument("--cm-bits", dest="cm_bits", type=int)
    p.add_argument("--max-depth", dest="max_depth", type=int)
    p.add_argument("--slots", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_infer_he)

    p = sub.add_parser("analyze-cost", help="static HE-operation cost analysis")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.add_argument("--pmd", type=int)
    p.add_argument("--cm-bits", dest="cm_bits", type=int)
    p.add_argument("--max-depth", dest="max_depth", type=int)
    p.add_argument("--slots", type=int)
    _add_common(p, dataset=False)
    p.set_defaults(func=cmd_analyze_cost)

    p = sub.add_parser("report", help="merge stage outputs into one comparison")
    p.add_argument("--hef", required=True, help="HE-friendly baseline model")
    p.add_argument("--pruned", action="append", default=[],
                   help="pruned/shrunk model (repeatable)")
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.add_argument("--dataset", help="evaluate metrics on this dataset")
    p.add_argument("--pmd", type=int)
    p.add_argument("--cm-bits", dest="cm_bits", type=int)
    p.add_argument("--max-depth", dest="max_depth", type=int)
    p.add_argument("--slots", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--samples", type=int, default=2000)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (ModelFormatError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except DepthBudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEPTH
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


if __name__ == "__main__":
    sys.exit(main())
