"""Q-network architectures, forward passes, target blending and freezing.

All variants share the conv trunk (three 3x3 circular convolutions, 32
channels, ReLU). Heads:

* ``large``: 2592 -> 512 -> 128 -> 64 -> 3
* ``small``: 2592 -> 512 -> 3
* ``probe_a``: the small architecture with conv trunk and fc1 frozen
  (only the final 512 -> 3 layer trains: 1,539 parameters)
* ``probe_b``: the small architecture with only the conv trunk frozen

Activations flow channel-last internally (observations are transposed once
at the boundary); parameter tensors keep the conventional (out, in, 3, 3)
and (out, in) shapes, so checkpoints interchange freely between variants
with compatible trunks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff, kernels, tables
from .autodiff import Tensor

N_ACTIONS = 3
OBS_CHANNELS = 4
CONV_CHANNELS = (32, 32, 32)
FLAT_DIM = 81 * CONV_CHANNELS[-1]

# variant -> (fully connected output dims, frozen layers)
ARCHITECTURES: dict[str, tuple[tuple[int, ...], tuple[str, ...]]] = {
    "large": ((512, 128, 64, N_ACTIONS), ()),
    "small": ((512, N_ACTIONS), ()),
    "probe_a": ((512, N_ACTIONS), ("conv1", "conv2", "conv3", "fc1")),
    "probe_b": ((512, N_ACTIONS), ("conv1", "conv2", "conv3")),
}


@dataclass(frozen=True)
class NetworkConfig:
    variant: str = "small"
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in ARCHITECTURES:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def fc_dims(self) -> tuple[int, ...]:
        return ARCHITECTURES[self.variant][0]

    @property
    def frozen_layers(self) -> tuple[str, ...]:
        return ARCHITECTURES[self.variant][1]

    @property
    def layer_names(self) -> tuple[str, ...]:
        return ("conv1", "conv2", "conv3") + tuple(f"fc{i + 1}" for i in range(len(self.fc_dims)))


@dataclass
class ParamSet:
    """Named parameter tensors with per-layer freeze flags."""

    config: NetworkConfig
    params: dict[str, Tensor]
    frozen: frozenset[str] = field(default_factory=frozenset)

    def layer(self, name: str) -> tuple[Tensor, Tensor]:
        return self.params[f"{name}.w"], self.params[f"{name}.b"]

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.params.items() if t.requires_grad}

    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def n_trainable(self) -> int:
        return sum(t.data.size for t in self.trainable().values())

    def copy(self) -> "ParamSet":
        clone = {k: Tensor(t.data.copy(), requires_grad=t.requires_grad) for k, t in self.params.items()}
        return ParamSet(config=self.config, params=clone, frozen=self.frozen)

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    def set_frozen(self, layers: tuple[str, ...]) -> None:
        self.frozen = frozenset(layers)
        for name, t in self.params.items():
            t.requires_grad = name.split(".")[0] not in self.frozen


def _layer_shapes(config: NetworkConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """(layer, weight shape, fan_in) triples in forward order."""
    shapes: list[tuple[str, tuple[int, ...], int]] = []
    c_in = OBS_CHANNELS
    for i, c_out in enumerate(CONV_CHANNELS):
        shapes.append((f"conv{i + 1}", (c_out, c_in, 3, 3), c_in * 9))
        c_in = c_out
    n_in = FLAT_DIM
    for i, n_out in enumerate(config.fc_dims):
        shapes.append((f"fc{i + 1}", (n_out, n_in), n_in))
        n_in = n_out
    return shapes


def build_network(config: NetworkConfig, rng: np.random.Generator) -> ParamSet:
    """Fan-in scaled uniform init (bound ``1/sqrt(fan_in)``) for weights and biases."""
    dtype = config.np_dtype
    params: dict[str, Tensor] = {}
    for name, wshape, fan_in in _layer_shapes(config):
        bound = 1.0 / np.sqrt(fan_in)
        params[f"{name}.w"] = autodiff.parameter(rng.uniform(-bound, bound, wshape).astype(dtype))
        params[f"{name}.b"] = autodiff.parameter(rng.uniform(-bound, bound, wshape[0]).astype(dtype))
    pset = ParamSet(config=config, params=params)
    pset.set_frozen(config.frozen_layers)
    return pset


def obs_to_cl(obs: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(B, 4, 9, 9) observations -> channel-last (B, 81, 4) activations."""
    return tables.to_channel_last(obs, dtype)


def q_values_cl(pset: ParamSet, x: np.ndarray) -> np.ndarray:
    """Inference forward on channel-last input (B, 81, 4) -> (B, 3); no tape."""
    for name in ("conv1", "conv2", "conv3"):
        w, b = pset.layer(name)
        x = kernels.convcl_forward(x, kernels.pack_weights(w.data), b.data, relu=True)
    h = x.reshape(x.shape[0], -1)
    n_fc = len(pset.config.fc_dims)
    for i in range(n_fc):
        w, b = pset.layer(f"fc{i + 1}")
        h = h @ w.data.T
        h += b.data
        if i < n_fc - 1:
            np.maximum(h, 0, out=h)
    return h


def q_forward(pset: ParamSet, obs_batch: np.ndarray) -> np.ndarray:
    """Action values for a batch of observations (B, 4, 9, 9) -> (B, 3)."""
    obs_batch = np.asarray(obs_batch)
    if obs_batch.ndim != 4 or obs_batch.shape[1:] != (OBS_CHANNELS, 9, 9):
        raise ValueError(f"expected (B, 4, 9, 9) observations, got {obs_batch.shape}")
    return q_values_cl(pset, obs_to_cl(obs_batch, pset.config.np_dtype))


def q_forward_train(pset: ParamSet, x_cl: Tensor, start: int = 0) -> Tensor:
    """Recorded forward from layer index ``start`` onward.

    ``x_cl`` is channel-last (B, 81, C) when starting inside the conv trunk,
    or already-flat features when starting at a fully connected layer.
    """
    names = pset.config.layer_names
    h = x_cl
    for name in names[start:]:
        w, b = pset.layer(name)
        if name.startswith("conv"):
            h = autodiff.conv2d_circular_cl(h, w, b, relu=True)
        else:
            if h.data.ndim == 3:
                h = autodiff.flatten(h)
            h = autodiff.affine(h, w, b)
            if name != names[-1]:
                h = autodiff.relu(h)
    return h


def features_cl(pset: ParamSet, x: np.ndarray, upto: int) -> np.ndarray:
    """Inference activations after layer index ``upto`` (inclusive), no tape.

    Output is channel-last (B, 81, C) inside the trunk and flat (B, n) from
    the first fully connected layer on.
    """
    names = pset.config.layer_names
    h = x
    for name in names[: upto + 1]:
        w, b = pset.layer(name)
        if name.startswith("conv"):
            h = kernels.convcl_forward(h, kernels.pack_weights(w.data), b.data, relu=True)
        else:
            if h.ndim == 3:
                h = h.reshape(h.shape[0], -1)
            h = h @ w.data.T
            h += b.data
            if name != names[-1]:
                np.maximum(h, 0, out=h)
    return h


def frozen_prefix_len(pset: ParamSet) -> int:
    """Number of leading layers that are frozen (0 if none or non-contiguous)."""
    n = 0
    for name in pset.config.layer_names:
        if name in pset.frozen:
            n += 1
        else:
            break
    return n


def soft_update(target: ParamSet, online: ParamSet, tau: float = 0.01) -> None:
    """In place ``target <- (1 - tau) * target + tau * online``.

    Frozen layers are skipped: the freeze invariant pins them equal in both
    sets, so the blend is exactly the identity there (skipping avoids float
    drift on tensors that are contractually bit-stable).
    """
    if target.config.variant != online.config.variant:
        raise ValueError(
            f"variant mismatch: target {target.config.variant}, online {online.config.variant}"
        )
    for name, t in target.params.items():
        if name.split(".")[0] in online.frozen:
            continue
        o = online.params[name]
        if t.data.shape != o.data.shape:
            raise ValueError(f"shape mismatch for {name}")
        kernels.lerp_update(t.data.reshape(-1), o.data.reshape(-1), tau)


def save_checkpoint(pset: ParamSet, path: str | Path) -> None:
    meta = {
        "variant": pset.config.variant,
        "dtype": pset.config.dtype,
        "frozen": sorted(pset.frozen),
    }
    autodiff.save_tensors(path, {k: t.data for k, t in pset.params.items()}, meta)


def load_checkpoint(path: str | Path) -> ParamSet:
    tensors, meta = autodiff.load_tensors(path)
    config = NetworkConfig(variant=meta["variant"], dtype=meta["dtype"])
    params = {k: autodiff.parameter(v) for k, v in tensors.items()}
    pset = ParamSet(config=config, params=params)
    pset.set_frozen(tuple(meta["frozen"]))
    return pset
