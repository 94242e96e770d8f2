"""Backend selection for the packed dense-task kernel.

The compiled Cython kernel is used when its extension module built; setting
``MOFHEI_PURE_PYTHON=1`` (or a failed build) selects the numpy fallback. Both
implement the same contract; ``benchmarks/bench_kernels.py`` compares them.
"""

import os

from . import pure

if os.environ.get("MOFHEI_PURE_PYTHON", "") not in ("", "0"):
    _impl = pure
    BACKEND_NAME = "pure"
else:
    try:
        from . import _packed_dense as _impl
        BACKEND_NAME = "cython"
    except ImportError:
        _impl = pure
        BACKEND_NAME = "pure"

run_dense_tasks = _impl.run_dense_tasks


def get_backend(name=None):
    """Return (name, run_dense_tasks) for an explicit backend choice."""
    if name in (None, "auto"):
        return BACKEND_NAME, run_dense_tasks
    if name == "pure":
        return "pure", pure.run_dense_tasks
    if name == "cython":
        from . import _packed_dense
        return "cython", _packed_dense.run_dense_tasks
    raise ValueError(f"unknown backend {name!r}")
