"""Latent-representation probes: freeze trunk layers, fine-tune small heads.

A converged agent's greedy policy induces a narrow state distribution; this
module collects rollout data from exactly that distribution, rebuilds the
network with parts of it frozen (``probe_a``: conv trunk and fc1 frozen,
fresh linear head; ``probe_b``: conv trunk frozen, fresh fc1 and head), and
fine-tunes on the narrow data with the regular training loop under the
fine-tune hyperparameters (1 env, no exploration, 10 gradient steps per
step, hard target copies). How much of the source agent's training and test
performance the probe recovers measures what the frozen representation
actually supports.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gridworld, qnet
from .gridworld import Task
from .qnet import NetworkConfig, ParamSet
from .replay import Transition
from .tables import pair_table
from .trainer import TrainConfig, train_run

PROBE_VARIANTS = ("probe_a", "probe_b")


@dataclass(frozen=True)
class RolloutDataset:
    """Greedy on-policy transitions from a converged checkpoint.

    Sampled by repeatedly drawing a training task uniformly and rolling the
    checkpoint's greedy policy to termination or truncation; the final
    episode is cut to reach the exact size. Contains no exploratory actions.
    ``episode_ends[i]`` is one past the last transition of episode ``i``.
    """

    transitions: tuple[Transition, ...]
    episode_ends: tuple[int, ...] = ()
    source_seed: int | None = None

    def __len__(self) -> int:
        return len(self.transitions)

    def episodes(self) -> list[tuple[Transition, ...]]:
        out = []
        start = 0
        for end in self.episode_ends:
            out.append(self.transitions[start:end])
            start = end
        return out


@dataclass
class FinetuneConfig:
    total_steps: int = 4_000
    n_envs: int = 1
    buffer_capacity: int = 4_000
    gradient_steps: int = 10
    train_freq: int = 1
    target_update_interval: int = 1
    tau: float = 1.0
    batch_size: int = 256
    gamma: float = 0.99
    lr: float = 1e-4
    weight_decay: float = 1e-5
    eval_interval: int = 100
    seed: int = 0
    variant: str = "probe_a"
    config_id: str = "probe"

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(
            total_steps=self.total_steps,
            n_envs=self.n_envs,
            train_freq=self.train_freq,
            gradient_steps=self.gradient_steps,
            batch_size=self.batch_size,
            target_update_interval=self.target_update_interval,
            tau=self.tau,
            gamma=self.gamma,
            eps_start=0.0,
            eps_end=0.0,
            eps_decay_steps=1,
            buffer_capacity=self.buffer_capacity,
            sampler="buffer_uniform",
            seed=self.seed,
            variant=self.variant,
            lr=self.lr,
            weight_decay=self.weight_decay,
            eval_interval=self.eval_interval,
            config_id=self.config_id,
        )


def collect_rollouts(
    checkpoint: ParamSet,
    train_tasks: list[Task],
    n: int = 4_000,
    rng: np.random.Generator | None = None,
) -> RolloutDataset:
    """Greedy (no exploration) rollouts of the checkpoint policy.

    The checkpoint is fixed, so its greedy action for every pose of every
    involved pair is tabulated once up front; episodes are then pure table
    walks. Ties break to the lowest action index, matching action selection
    everywhere else.
    """
    rng = rng if rng is not None else np.random.default_rng()
    tables = []
    actions = []
    start_pose = []
    for task in train_tasks:
        table = pair_table(task.topology_id, task.goal)
        q = qnet.q_forward(checkpoint, table.obs_u8.astype(np.float32))
        tables.append(table)
        actions.append(np.argmax(q, axis=1))
        start_pose.append(table.pose_index[(task.agent_pos, task.agent_dir)])

    out: list[Transition] = []
    ends: list[int] = []
    while len(out) < n:
        i = int(rng.integers(len(train_tasks)))
        table, act = tables[i], actions[i]
        pose = start_pose[i]
        for _ in range(gridworld.MAX_STEPS):
            a = int(act[pose])
            nxt = int(table.next_pose[pose, a])
            terminal = bool(table.enters_goal[pose, a])
            out.append(
                Transition(
                    state_key=int(table.state_keys[pose]),
                    obs=table.obs_u8[pose],
                    action=a,
                    reward=int(table.reward[pose, a]),
                    next_obs=table.obs_u8[nxt],
                    terminal=terminal,
                    next_state_key=int(table.state_keys[nxt]),
                )
            )
            if terminal or len(out) >= n:
                break
            pose = nxt
        ends.append(len(out))
    return RolloutDataset(transitions=tuple(out[:n]), episode_ends=tuple(ends))


def build_probe(checkpoint: ParamSet, variant: str, init_rng: np.random.Generator) -> ParamSet:
    """Fresh probe network with the checkpoint's frozen layers copied in.

    ``probe_a`` reuses conv trunk and fc1 (only the final linear trains);
    ``probe_b`` reuses the conv trunk and re-initialises fc1 and the head.
    Copied tensors are bit-exact and flagged frozen.
    """
    if variant not in PROBE_VARIANTS:
        raise ValueError(f"variant must be one of {PROBE_VARIANTS}, got {variant!r}")
    probe = qnet.build_network(NetworkConfig(variant, dtype=checkpoint.config.dtype), init_rng)
    for layer in probe.config.frozen_layers:
        for suffix in (".w", ".b"):
            src = checkpoint.params[layer + suffix].data
            dst = probe.params[layer + suffix].data
            if src.shape != dst.shape:
                raise ValueError(
                    f"checkpoint layer {layer}{suffix} has shape {src.shape}, probe needs {dst.shape}"
                )
            dst[:] = src
    return probe


def finetune(
    probe: ParamSet,
    dataset: RolloutDataset,
    config: FinetuneConfig,
    train_tasks: list[Task],
    test100: list[Task] | None = None,
    test0: list[Task] | None = None,
    out_dir: str | Path | None = None,
) -> dict:
    """Fine-tune a probe on the rollout data plus its own greedy experience.

    The buffer is pre-filled with the dataset (at capacity, so each of the
    fine-tune's own environment steps evicts the oldest record) and the
    standard training loop runs under the fine-tune hyperparameters.
    """
    if probe.config.variant not in PROBE_VARIANTS:
        raise ValueError(f"expected a probe network, got variant {probe.config.variant!r}")
    if len(dataset) != config.buffer_capacity:
        raise ValueError(
            f"dataset size {len(dataset)} must equal buffer capacity {config.buffer_capacity}"
        )
    return train_run(
        config.to_train_config(),
        list(train_tasks),
        list(test100 or []),
        list(test0 or []),
        out_dir=out_dir,
        initial_params=probe,
        prefill=list(dataset.transitions),
    )
