"""Minimal reverse-mode differentiation over dense numpy tensors.

Only the operations the Q-networks need: circular 3x3 convolution (channel
first per the public tensor convention, channel last for the training hot
path), affine layers, ReLU, flatten, per-sample action gathers and MSE loss.
Recording is implicit: every op links its output to its parents and stores a
closure that pushes gradients backward. ``backward`` runs reverse topological
accumulation once; re-running without re-recording is a contract violation.

Training runs in float32; float64 is supported end to end for verification
(finite-difference checks run there). Frozen parameters (``requires_grad
False``) receive no gradient and are never touched by the optimizer.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels


class Tensor:
    """A dense array plus gradient slot and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done")

    def __init__(self, data: np.ndarray, requires_grad: bool = False,
                 parents: tuple["Tensor", ...] = ()):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward: Callable[[], None] | None = None
        self._done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if g.base is not None or not g.flags.owndata else g
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(data), requires_grad=True)


def _result(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, parents=parents if needs else ())


def conv2d_circular(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """Channel-first convolution: x (B, C, 9, 9), w (O, C, 3, 3) -> (B, O, 9, 9)."""
    out = _result(
        kernels.conv2d_circular_forward(x.data, w.data, None if b is None else b.data),
        (x, w) if b is None else (x, w, b),
    )
    if out.requires_grad:
        def _bw() -> None:
            g = out.grad
            if w.requires_grad or (b is not None and b.requires_grad):
                dw, db = kernels.conv2d_circular_weight_grad(x.data, g)
                if w.requires_grad:
                    w.accumulate(dw)
                if b is not None and b.requires_grad:
                    b.accumulate(db)
            if x.requires_grad:
                x.accumulate(kernels.conv2d_circular_input_grad(g, w.data))
        out._backward = _bw
    return out


def conv2d_circular_cl(x: Tensor, w: Tensor, b: Tensor | None, relu: bool = False) -> Tensor:
    """Channel-last convolution: x (B, 81, C), w (O, C, 3, 3) -> (B, 81, O).

    ``relu`` fuses the activation into the same kernel pass; the backward
    masks the upstream gradient with the (post-activation) output sign.
    """
    wpk = kernels.pack_weights(w.data)
    out = _result(
        kernels.convcl_forward(x.data, wpk, None if b is None else b.data, relu=relu),
        (x, w) if b is None else (x, w, b),
    )
    if out.requires_grad:
        def _bw() -> None:
            g = np.ascontiguousarray(out.grad)
            if relu:
                g = g * (out.data > 0)
            if w.requires_grad or (b is not None and b.requires_grad):
                dwpk, db = kernels.convcl_weight_grad(x.data, g)
                if w.requires_grad:
                    w.accumulate(kernels.unpack_weights(dwpk))
                if b is not None and b.requires_grad:
                    b.accumulate(db)
            if x.requires_grad:
                x.accumulate(kernels.convcl_input_grad(g, wpk))
        out._backward = _bw
    return out


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x (B, n) @ w (m, n)^T + b (m) -> (B, m)."""
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError(f"affine shape mismatch: input {x.data.shape}, weights {w.data.shape}")
    y = x.data @ w.data.T
    y += b.data
    out = _result(y, (x, w, b))
    if out.requires_grad:
        def _bw() -> None:
            g = out.grad
            if w.requires_grad:
                w.accumulate(g.T @ x.data)
            if b.requires_grad:
                b.accumulate(g.sum(axis=0))
            if x.requires_grad:
                x.accumulate(g @ w.data)
        out._backward = _bw
    return out


def relu(x: Tensor) -> Tensor:
    out = _result(np.maximum(x.data, 0), (x,))
    if out.requires_grad:
        def _bw() -> None:
            # subgradient at 0 is 0: mask strictly positive outputs
            x.accumulate(out.grad * (out.data > 0))
        out._backward = _bw
    return out


def flatten(x: Tensor) -> Tensor:
    """(B, ...) -> (B, prod(...)); pure reshape, gradient reshapes back."""
    shape = x.data.shape
    out = _result(x.data.reshape(shape[0], -1), (x,))
    if out.requires_grad:
        def _bw() -> None:
            x.accumulate(out.grad.reshape(shape))
        out._backward = _bw
    return out


def gather_actions(q: Tensor, rows: np.ndarray, actions: np.ndarray) -> Tensor:
    """Per-sample value pick: out[i] = q[rows[i], actions[i]].

    ``rows`` may repeat (deduplicated forward batches); gradients accumulate.
    """
    out = _result(q.data[rows, actions], (q,))
    if out.requires_grad:
        def _bw() -> None:
            gq = np.zeros_like(q.data)
            np.add.at(gq, (rows, actions), out.grad)
            q.accumulate(gq)
        out._backward = _bw
    return out


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error over the batch; target is a constant."""
    diff = pred.data - target
    out = _result(np.asarray((diff @ diff) / diff.size, dtype=pred.data.dtype), (pred,))
    if out.requires_grad:
        def _bw() -> None:
            pred.accumulate((2.0 / diff.size) * diff * out.grad)
        out._backward = _bw
    return out


def backward(loss: Tensor) -> None:
    """Reverse accumulation from a scalar loss over the recorded graph."""
    if loss.data.shape != ():
        raise ValueError(f"backward needs a scalar, got shape {loss.data.shape}")
    if loss._done:
        raise RuntimeError("backward already ran for this graph; re-record the computation")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any trainable tensor")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(order):
        if node._backward is not None:
            node._backward()
            node._backward = None
        node._done = True


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float = 1.0) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the pre-clip norm. All-zero gradients pass through untouched.
    """
    total = 0.0
    for g in grads:
        flat = g.reshape(-1)
        total += float(flat @ flat)
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads:
            g *= np.asarray(scale, dtype=g.dtype)
    return norm


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 1e-5,
) -> None:
    """One fused bias-corrected Adam update with decoupled weight decay, in place."""
    kernels.adamw_update(
        param.reshape(-1), grad.reshape(-1), m.reshape(-1), v.reshape(-1),
        t, lr, beta1, beta2, eps, weight_decay,
    )


class AdamState:
    """Moment accumulators plus hyperparameters for a named parameter set."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 1e-5,
    ):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {
            name: (np.zeros_like(p.data), np.zeros_like(p.data))
            for name, p in params.items()
            if p.requires_grad
        }

    def step(self, params: Mapping[str, Tensor]) -> None:
        """Update every trainable parameter from its accumulated gradient."""
        self.t += 1
        for name, (m, v) in self.moments.items():
            p = params[name]
            if p.grad is None:
                continue  # loss did not touch this parameter this step
            adamw_step(
                p.data, p.grad, m, v, self.t,
                lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                eps=self.eps, weight_decay=self.weight_decay,
            )


# --- checkpoint format ------------------------------------------------------
#
# `FRLT1` magic, uint32 little-endian header length, UTF-8 JSON header
# {"meta": ..., "tensors": [{"name", "shape", "dtype"}, ...]}, then the raw
# little-endian tensor payloads in listed order.

_MAGIC = b"FRLT1\n"


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    payload = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name})
        payload.append(le.tobytes())
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for chunk in payload:
            f.write(chunk)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a tensor checkpoint")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        tensors: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            dtype = np.dtype(entry["dtype"]).newbyteorder("<")
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            arr = np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype)
            tensors[entry["name"]] = arr.astype(dtype.newbyteorder("="), copy=True).reshape(entry["shape"])
    return tensors, header["meta"]
