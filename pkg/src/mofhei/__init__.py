"""MOFHEI: HE-friendly model conversion, packing-aligned block pruning, and
simulated private inference with exact HE-operation accounting."""

__version__ = "0.1.0"
