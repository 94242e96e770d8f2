"""Batch-packing encoder and CKKS-semantics simulated backend.

Packed values are slot vectors with exact real arithmetic; what is simulated
faithfully is the *accounting*: slot-wise SIMD semantics, per-operation
counters, the multiplicative level budget (every multiplication consumes one
level of every ciphertext operand; an exhausted ciphertext refuses further
multiplication), and a limb-based memory model. Approximation noise is off by
default but can be injected per-op through ``PackingConfig.noise_rel``.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, DepthBudgetError


@dataclass
class PackingConfig:
    pmd: int = 32768  # polynomial modulus degree
    cm_bits: int = 860  # coefficient modulus budget in bits
    limb_bits: int = 60
    slots: int = None  # batch capacity b; defaults to pmd // 2
    max_depth: int = None  # level budget L; derived from cm_bits by default
    noise_rel: float = 0.0  # optional per-op relative perturbation

    def __post_init__(self):
        if self.slots is None:
            self.slots = self.pmd // 2
        if self.max_depth is None:
            # two limbs stay reserved for the base scale
            self.max_depth = (self.cm_bits - 2 * self.limb_bits) // self.limb_bits
        if self.slots > self.pmd // 2:
            raise ValueError(f"slots {self.slots} exceed pmd/2 = {self.pmd // 2}")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.cm_bits < self.max_depth * self.limb_bits:
            raise ValueError("cm_bits too small for the requested depth")

    @classmethod
    def for_depth(cls, max_depth, pmd=32768, slots=None, limb_bits=60):
        """Config with an explicit level budget and a matching modulus."""
        return cls(pmd=pmd, cm_bits=(max_depth + 2) * limb_bits, limb_bits=limb_bits,
                   slots=slots, max_depth=max_depth)


_ids = itertools.count()  # itertools.count is atomic under CPython


@dataclass
class PackedVec:
    """One simulated ciphertext or plaintext: slot vector, level, identity."""

    kind: str  # "ct" | "pt"
    slots: np.ndarray
    level: int = None  # remaining multiplicative budget; ciphertexts only
    is_zero: bool = False  # plaintexts: all slots are zero (skippable)
    id: int = field(default_factory=lambda: next(_ids))

    def __post_init__(self):
        if self.kind not in ("ct", "pt"):
            raise ValueError(f"bad kind {self.kind!r}")
        self.slots = np.asarray(self.slots, dtype=float)

    @property
    def n_slots(self):
        return self.slots.shape[0]


@dataclass
class OpCounters:
    ct_pt_mul: int = 0
    ct_ct_mul: int = 0
    ct_add: int = 0
    ct_pt_add: int = 0
    skipped_mul: int = 0
    skipped_add: int = 0
    peak_live_bytes: int = 0

    KINDS = ("ct_pt_mul", "ct_ct_mul", "ct_add", "ct_pt_add")

    def executed_total(self):
        return self.ct_pt_mul + self.ct_ct_mul + self.ct_add + self.ct_pt_add

    def skipped_total(self):
        return self.skipped_mul + self.skipped_add

    def merge(self, other):
        """Combine per-worker counters: counts add, peak takes the max."""
        self.ct_pt_mul += other.ct_pt_mul
        self.ct_ct_mul += other.ct_ct_mul
        self.ct_add += other.ct_add
        self.ct_pt_add += other.ct_pt_add
        self.skipped_mul += other.skipped_mul
        self.skipped_add += other.skipped_add
        self.peak_live_bytes = max(self.peak_live_bytes, other.peak_live_bytes)
        return self

    def as_dict(self):
        return {
            "ct_pt_mul": self.ct_pt_mul, "ct_ct_mul": self.ct_ct_mul,
            "ct_add": self.ct_add, "ct_pt_add": self.ct_pt_add,
            "skipped_mul": self.skipped_mul, "skipped_add": self.skipped_add,
            "executed_total": self.executed_total(),
            "peak_live_bytes": self.peak_live_bytes,
        }


def batch_pack(batch, cfg):
    """Pack (n instances x m features) into m ciphertexts, one per feature.

    Ciphertext i carries feature i of every instance in its first n slots;
    unused slots are zero and every ciphertext starts at the full level.
    """
    batch = np.asarray(batch, dtype=float)
    if batch.ndim != 2:
        raise ValueError(f"expected (n, m) batch, got shape {batch.shape}")
    n, m = batch.shape
    if n > cfg.slots:
        raise CapacityError(f"batch of {n} exceeds slot capacity {cfg.slots}")
    out = []
    for i in range(m):
        slots = np.zeros(cfg.slots)
        slots[:n] = batch[:, i]
        out.append(PackedVec("ct", slots, level=cfg.max_depth))
    return out


def unpack(vecs, n):
    """Inverse of batch_pack: m ciphertexts -> (n, m)."""
    return np.stack([v.slots[:n] for v in vecs], axis=1)


def encode_scalar(w, cfg, level=None):
    """Plaintext with the scalar repeated in every slot; zeros are flagged."""
    w = float(w)
    return PackedVec("pt", np.full(cfg.slots, w), level=level, is_zero=(w == 0.0))


def _check_operands(kind, a, b):
    want = {
        "ct_pt_mul": ("ct", "pt"), "ct_pt_add": ("ct", "pt"),
        "ct_ct_mul": ("ct", "ct"), "ct_add": ("ct", "ct"),
    }
    if kind not in want:
        raise ValueError(f"unknown op kind {kind!r}")
    kinds = (a.kind, b.kind)
    if sorted(kinds) != sorted(want[kind]):
        raise ValueError(f"{kind} got operand kinds {kinds}")


def simd_op(kind, a, b, counters, cfg=None, rng=None):
    """Slot-wise op between packed values with level and counter bookkeeping.

    Multiplications consume one level of the result (minimum of the ciphertext
    operand levels, minus one) and require every ciphertext operand to hold at
    least one level; additions keep the minimum level. Exactly one counter is
    incremented. With ``cfg.noise_rel`` set and an ``rng`` given, the result
    picks up a relative perturbation, mimicking approximate arithmetic.
    """
    _check_operands(kind, a, b)
    ct_levels = [v.level for v in (a, b) if v.kind == "ct"]
    is_mul = kind.endswith("mul")
    if is_mul:
        for lev in ct_levels:
            if lev < 1:
                raise DepthBudgetError("multiplicative depth exhausted")
        level = min(ct_levels) - 1
    else:
        level = min(ct_levels)

    if is_mul:
        slots = a.slots * b.slots
    else:
        slots = a.slots + b.slots
    if cfg is not None and cfg.noise_rel > 0.0 and rng is not None:
        slots = slots * (1.0 + cfg.noise_rel * rng.uniform(-1.0, 1.0, slots.shape))

    setattr(counters, kind, getattr(counters, kind) + 1)
    return PackedVec("ct", slots, level=level)


def limbs_at(level, cfg):
    """Limb count of a value holding ``level`` remaining multiplications."""
    return max(int(level), 0) + 2


def ciphertext_bytes(level, cfg):
    return 2 * cfg.pmd * limbs_at(level, cfg) * 8


def plaintext_bytes(cfg, level=None):
    return cfg.pmd * limbs_at(cfg.max_depth if level is None else level, cfg) * 8


def memory_snapshot(vecs, cfg):
    """Bytes held by a live set of packed values under the limb model."""
    total = 0
    for v in vecs:
        if v.kind == "ct":
            total += ciphertext_bytes(v.level, cfg)
        else:
            total += plaintext_bytes(cfg, v.level)
    return total


class MemoryTracker:
    """Running live-set byte tracker with a peak watermark."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.live = 0
        self.peak = 0

    def retain(self, vec):
        self.live += memory_snapshot([vec], self.cfg)
        self.peak = max(self.peak, self.live)

    def retain_bytes(self, n):
        self.live += n
        self.peak = max(self.peak, self.live)

    def release(self, vec):
        self.live -= memory_snapshot([vec], self.cfg)

    def release_bytes(self, n):
        self.live -= n
