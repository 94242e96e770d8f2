"""Benchmark: compiled vs pure-python packed dense-task kernel.

Runs the dense workloads of the HE-friendly LeNet shape (conv layers via
their dense view) over a packed batch and reports ops/second per backend.

    python benchmarks/bench_kernels.py [--slots 64] [--workers 1 2]
"""

import argparse
import time

import numpy as np

from mofhei import pi
from mofhei.architectures import lenet5_hef
from mofhei.backends import get_backend
from mofhei.hesim import PackingConfig, batch_pack


def run_once(model, cfg, workers, backend_name):
    import mofhei.backends as backends_mod
    name, kernel = get_backend(backend_name)
    saved = backends_mod.run_dense_tasks
    backends_mod.run_dense_tasks = kernel
    try:
        program = pi.compile(model, cfg)
        x = np.random.default_rng(0).normal(size=(cfg.slots, *model.input_shape))
        packed = batch_pack(x.reshape(cfg.slots, -1), cfg)
        t0 = time.perf_counter()
        _, counters = pi.execute(program, packed, workers=workers, cfg=cfg)
        dt = time.perf_counter() - t0
    finally:
        backends_mod.run_dense_tasks = saved
    return dt, counters.executed_total()


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--slots", type=int, default=64)
    ap.add_argument("--workers", type=int, nargs="+", default=[1, 2])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    cfg = PackingConfig.for_depth(16, pmd=max(2 * args.slots, 128), slots=args.slots)
    model = lenet5_hef(seed=0)

    print(f"workload: HE-friendly LeNet, {args.slots} slots")
    header = f"{'backend':8s} {'workers':7s} {'ops':>9s} {'best s':>8s} {'Mops/s':>8s}"
    print(header)
    print("-" * len(header))
    rows = {}
    for backend in ("pure", "cython"):
        try:
            get_backend(backend)
        except ImportError:
            print(f"{backend:8s} (not built)")
            continue
        for workers in args.workers:
            best = None
            ops = 0
            for _ in range(args.repeat):
                dt, ops = run_once(model, cfg, workers, backend)
                best = dt if best is None else min(best, dt)
            rows[(backend, workers)] = best
            print(f"{backend:8s} {workers:<7d} {ops:>9d} {best:>8.3f} "
                  f"{ops / best / 1e6:>8.2f}")
    for workers in args.workers:
        if ("pure", workers) in rows and ("cython", workers) in rows:
            speedup = rows[("pure", workers)] / rows[("cython", workers)]
            print(f"speedup at {workers} worker(s): {speedup:.1f}x")


if __name__ == "__main__":
    main()
