"""Numeric kernels with a compiled core and a pure-numpy fallback.

Two families:

* channel-first ops (``conv2d_circular_*``) follow the (B, C, 9, 9) tensor
  convention and are always backed by the numpy implementation; they are the
  reference semantics.
* channel-last ops (``convcl_*``, plus the fused optimizer loops) are the
  float32 hot path used by network training. They run on the compiled core
  when it is importable and fall back to numpy otherwise.

``FOURROOM_LAB_KERNELS=numpy|cython`` forces the backend (``cython`` raises
if the extension is missing). ``benchmarks/bench_kernels.py`` compares the
two.
"""

from __future__ import annotations

import os

import numpy as np

from . import numpy_backend
from .numpy_backend import (
    conv2d_circular_forward,
    conv2d_circular_input_grad,
    conv2d_circular_weight_grad,
)

_requested = os.environ.get("FOURROOM_LAB_KERNELS", "auto")
if _requested not in ("auto", "cython", "numpy"):
    raise ValueError(f"FOURROOM_LAB_KERNELS must be auto|cython|numpy, got {_requested!r}")

_core = None
if _requested in ("auto", "cython"):
    try:
        from . import _convcore as _core
    except ImportError:
        if _requested == "cython":
            raise

BACKEND = "cython" if _core is not None else "numpy"

HW2 = 81
KS2 = 9


def _is_f32(*arrays: np.ndarray) -> bool:
    return all(a.dtype == np.float32 for a in arrays)


def pack_weights(w: np.ndarray) -> np.ndarray:
    """(O, C, 3, 3) -> kernel-slot-major (9, C, O), contiguous."""
    O, C = w.shape[:2]
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0).reshape(KS2, C, O))


def adjoint_weights_packed(wpk: np.ndarray) -> np.ndarray:
    """Packed weights of the adjoint correlation: slot flipped, channels swapped."""
    return np.ascontiguousarray(wpk[::-1].transpose(0, 2, 1))


def _cl_to_cf(x: np.ndarray) -> np.ndarray:
    b, _, c = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1)).reshape(b, c, 9, 9)


def _cf_to_cl(x: np.ndarray) -> np.ndarray:
    b, c = x.shape[:2]
    return np.ascontiguousarray(x.reshape(b, c, HW2).transpose(0, 2, 1))


def unpack_weights(wpk: np.ndarray) -> np.ndarray:
    _, C, O = wpk.shape
    return np.ascontiguousarray(wpk.reshape(3, 3, C, O).transpose(3, 2, 0, 1))


def convcl_forward(x: np.ndarray, wpk: np.ndarray, bias: np.ndarray | None,
                   relu: bool = False) -> np.ndarray:
    """Forward correlation, channel-last: x (B, 81, C), wpk (9, C, O) -> (B, 81, O).

    ``relu`` clamps the output to [0, inf) in the same pass.
    """
    if x.shape[2] != wpk.shape[1]:
        raise ValueError(f"input channels {x.shape[2]} != kernel channels {wpk.shape[1]}")
    if _core is not None and _is_f32(x, wpk):
        out = np.empty((x.shape[0], HW2, wpk.shape[2]), dtype=np.float32)
        _core.conv_forward_cl(x, wpk, bias, out, relu)
        return out
    y = numpy_backend.conv2d_circular_forward(_cl_to_cf(x), unpack_weights(wpk), bias)
    y = _cf_to_cl(y)
    if relu:
        np.maximum(y, 0, out=y)
    return y


def convcl_input_grad(dy: np.ndarray, wpk: np.ndarray) -> np.ndarray:
    """Gradient wrt the channel-last conv input."""
    return convcl_forward(dy, adjoint_weights_packed(wpk), None)


def convcl_weight_grad(x: np.ndarray, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Packed kernel gradient (9, C, O) and bias gradient (O,)."""
    db = dy.sum(axis=(0, 1))
    if _core is not None and _is_f32(x, dy):
        dwpk = np.empty((KS2, x.shape[2], dy.shape[2]), dtype=np.float32)
        _core.conv_weight_grad_cl(x, dy, dwpk)
        return dwpk, db
    dw, _ = numpy_backend.conv2d_circular_weight_grad(_cl_to_cf(x), _cl_to_cf(dy))
    return pack_weights(dw), db


def adamw_update(
    p: np.ndarray,
    g: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    wd: float,
) -> None:
    """In-place fused AdamW step on flat arrays (decoupled weight decay)."""
    if _core is not None and _is_f32(p, g, m, v):
        _core.adamw_update(p, g, m, v, float(t), lr, beta1, beta2, eps, wd)
        return
    gd = g.astype(np.float64)
    md = beta1 * m.astype(np.float64) + (1.0 - beta1) * gd
    vd = beta2 * v.astype(np.float64) + (1.0 - beta2) * gd * gd
    m[:] = md.astype(m.dtype)
    v[:] = vd.astype(v.dtype)
    mhat = md / (1.0 - beta1**t)
    vhat = vd / (1.0 - beta2**t)
    p -= (lr * (mhat / (np.sqrt(vhat) + eps) + wd * p.astype(np.float64))).astype(p.dtype)


def lerp_update(target: np.ndarray, online: np.ndarray, tau: float) -> None:
    """In-place ``target <- (1 - tau) * target + tau * online``."""
    if _core is not None and _is_f32(target, online):
        _core.lerp_update(target, online, tau)
        return
    target *= 1.0 - tau
    target += tau * online
