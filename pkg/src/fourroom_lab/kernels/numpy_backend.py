"""Pure-numpy circular-convolution kernels (im2col + BLAS).

Reference implementation and import-time fallback for the compiled core.
Circular padding makes the adjoint of the correlation another correlation
with channel-swapped, spatially flipped kernels, so forward, input-gradient
and weight-gradient are all expressed as matrix products over gathered
neighbourhood columns.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

HW = 9
KS = 3


@lru_cache(maxsize=1)
def _neighbor_index() -> np.ndarray:
    """(81, 9) flat indices of each position's wrapped 3x3 neighbourhood."""
    idx = np.empty((HW * HW, KS * KS), dtype=np.intp)
    for i in range(HW):
        for j in range(HW):
            for u in range(KS):
                for v in range(KS):
                    idx[i * HW + j, u * KS + v] = ((i + u - 1) % HW) * HW + (j + v - 1) % HW
    return idx


def _cols(x: np.ndarray) -> np.ndarray:
    """Gather neighbourhoods: (B, C, 9, 9) -> (B*81, 9*C), inner order (k, c)."""
    B, C = x.shape[:2]
    flat = np.ascontiguousarray(x.reshape(B, C, HW * HW).transpose(0, 2, 1))  # (B, 81, C)
    cols = flat[:, _neighbor_index(), :]  # (B, 81, 9, C)
    return cols.reshape(B * HW * HW, KS * KS * C)


def conv2d_circular_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    B, C = x.shape[:2]
    O = w.shape[0]
    wk = w.transpose(2, 3, 1, 0).reshape(KS * KS * C, O)  # (k, c) -> o
    y = _cols(x) @ wk
    if bias is not None:
        y += bias
    return np.ascontiguousarray(y.reshape(B, HW * HW, O).transpose(0, 2, 1)).reshape(B, O, HW, HW)


def conv2d_circular_input_grad(dy: np.ndarray, w: np.ndarray) -> np.ndarray:
    # Adjoint: correlate dy with kernels flipped in space, channels swapped.
    w_adj = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d_circular_forward(dy, w_adj, None)


def conv2d_circular_weight_grad(x: np.ndarray, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    B, C = x.shape[:2]
    O = dy.shape[1]
    dy_mat = np.ascontiguousarray(dy.reshape(B, O, HW * HW).transpose(0, 2, 1)).reshape(B * HW * HW, O)
    dw_kc = _cols(x).T @ dy_mat  # (9*C, O)
    dw = np.ascontiguousarray(dw_kc.reshape(KS * KS, C, O).transpose(2, 1, 0)).reshape(O, C, KS, KS)
    db = dy.sum(axis=(0, 2, 3))
    return dw, db
