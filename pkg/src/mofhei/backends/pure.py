"""Pure-numpy fallback for the packed dense-task kernel.

Same contract and op-for-op semantics as the compiled
``_packed_dense.run_dense_tasks``; accumulation happens term by term in the
same order so the two backends produce identical slot values and counters.
"""

import numpy as np


def run_dense_tasks(in_slots, in_levels, pad_level, idx, weights, bias,
                    out_slots, out_levels, counts, lo, hi):
    """Execute tasks [lo, hi); returns -1 or the index of a depth-starved task.

    counts layout: [ct_pt_mul, ct_ct_mul, ct_add, ct_pt_add, skipped_mul,
    skipped_add], incremented in place.
    """
    m = idx.shape[1]
    for q in range(lo, hi):
        used = 0
        minlev = pad_level
        acc = out_slots[q]
        for r in range(m):
            w = weights[q, r]
            if w == 0.0:
                counts[4] += 1
                continue
            i = idx[q, r]
            lev = pad_level if i < 0 else in_levels[i]
            if lev < 1:
                return q
            if lev < minlev:
                minlev = lev
            if i >= 0:
                if used == 0:
                    np.multiply(w, in_slots[i], out=acc)
                else:
                    acc += w * in_slots[i]
            counts[0] += 1
            used += 1
        if used > 0:
            counts[2] += used - 1
            counts[5] += (m - 1) - (used - 1)
            out_levels[q] = minlev - 1
        else:
            counts[5] += m - 1
            out_levels[q] = pad_level
        bv = bias[q]
        if bv != 0.0:
            acc += bv
            counts[3] += 1
        else:
            counts[5] += 1
    return -1
