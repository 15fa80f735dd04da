"""Pure-numpy reconstruction kernels (fallback for the compiled extension).

The float32 routines must mirror the compiled kernels operation for
operation: products are rounded to float32 once, then summed through a fixed
pairwise reduction tree, so both backends produce bit-identical emissions.
"""

from __future__ import annotations

import numpy as np


def next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p <<= 1
    return p


def _tree_fold(block: np.ndarray) -> np.ndarray:
    """Reduce the last axis (a power of two long) by pairwise float32 adds."""
    a = block
    while a.shape[-1] > 1:
        a = a[..., 0::2] + a[..., 1::2]
    return a[..., 0]


def tree_sum32(values) -> np.float32:
    """Fixed-order float32 tree sum of a vector (zero-padded to a power of two)."""
    v = np.ascontiguousarray(values, dtype=np.float32)
    padded = np.zeros(next_pow2(max(v.size, 1)), dtype=np.float32)
    padded[:v.size] = v
    return _tree_fold(padded[None, :])[0]


def emissions_raw(image, corners, weights, background, subtract, out, start, stop):
    """out[i] = sum(weights_i * (window_i - b)) for sites in [start, stop)."""
    k = weights.shape[1]
    shared = weights.shape[0] == 1
    for i in range(start, stop):
        y0, x0 = corners[i]
        win = image[y0:y0 + k, x0:x0 + k]
        if subtract:
            win = win - background
        w = weights[0 if shared else i]
        out[i] = np.dot(w.reshape(-1), np.ascontiguousarray(win).reshape(-1))


def dataflow_emissions(image, corners, weights, out_product, out_matrix):
    """Lane-structured float32 emulation of the accelerator's convolution stage.

    Per site: each of the k kernel rows is one lane computing its product row
    through a log2-depth adder tree; lane results are reduced by the same tree,
    and the projector's own matrix sum is recomputed the same way.
    """
    k = weights.shape[1]
    padded = next_pow2(k)
    shared = weights.shape[0] == 1
    w32_all = weights.astype(np.float32)
    for i in range(corners.shape[0]):
        y0, x0 = corners[i]
        w32 = w32_all[0 if shared else i]
        d32 = image[y0:y0 + k, x0:x0 + k].astype(np.float32)

        rows = np.zeros((k, padded), dtype=np.float32)
        rows[:, :k] = w32 * d32
        lanes = np.zeros(padded, dtype=np.float32)
        lanes[:k] = _tree_fold(rows)
        out_product[i] = _tree_fold(lanes[None, :])[0]

        rows[:, :k] = w32
        lanes[:] = 0.0
        lanes[:k] = _tree_fold(rows)
        out_matrix[i] = _tree_fold(lanes[None, :])[0]
