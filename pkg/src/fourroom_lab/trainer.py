"""Double-DQN training loop over vectorised 4-room environments.

One vector step advances every environment once (episodes reset to a
uniformly drawn training task on termination or truncation), pushes the
transitions, and then runs the configured number of gradient steps per
``train_freq`` collected environment steps. Targets are double-DQN: the
online network picks the successor action, the target network scores it.
Episodes cut by the step cap are not terminal and bootstrap normally.

Evaluation runs the greedy policy tabularly: Q-values for the full pose
space of every involved (topology, goal) pair are computed in one batched
forward, after which rollouts are table lookups. This is exactly the greedy
policy the step-by-step rollout would follow (same lowest-index tie break).

Determinism: all randomness flows from four named streams spawned off the
config seed (init, exploration, resets, sampling); evaluation consumes no
randomness. With single-threaded BLAS, reruns are bit-identical.

There is no warm-up period: gradient steps begin with the first collected
batch (sampling with replacement from however much the buffer holds).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff, gridworld, qnet, tables
from .autodiff import Tensor
from .gridworld import Task
from .qnet import NetworkConfig, ParamSet
from .replay import FifoBuffer, Transition
from .reachability import rollout_steps_from_actions
from .tables import ObsBank, PairTable, pair_key, pair_table

METRICS_HEADER = "env_step,epsilon,train_return,test100_return,test0_return,optimality_fraction,loss,seed,config_id"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    total_steps: int = 500_000
    n_envs: int = 10
    train_freq: int = 10  # environment steps per gradient event
    gradient_steps: int = 1
    batch_size: int = 256
    target_update_interval: int = 10  # environment steps
    tau: float = 0.01
    gamma: float = 0.99
    eps_start: float = 1.0
    eps_end: float = 0.01
    eps_decay_steps: int = 500_000
    buffer_capacity: int = 500_000
    sampler: str = "buffer_uniform"  # or "sa_uniform"
    seed: int = 0
    variant: str = "small"
    lr: float = 1e-4
    weight_decay: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_grad_norm: float = 1.0
    eval_interval: int = 10_000
    config_id: str = "run"

    def __post_init__(self):
        if self.sampler not in ("buffer_uniform", "sa_uniform"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.eps_decay_steps <= 0 or self.eps_decay_steps > max(self.total_steps, 1):
            if not (self.eps_start == self.eps_end):
                raise ValueError("eps_decay_steps must be in (0, total_steps]")
        for name in ("total_steps", "n_envs", "train_freq", "gradient_steps",
                     "batch_size", "target_update_interval", "buffer_capacity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class MetricsRow:
    env_step: int
    epsilon: float
    train_return: float
    test100_return: float
    test0_return: float
    optimality_fraction: float
    loss: float  # running mean since the previous row; nan before training starts
    seed: int
    config_id: str

    def to_csv(self) -> str:
        return ",".join(
            [
                str(self.env_step),
                _fmt(self.epsilon),
                _fmt(self.train_return),
                _fmt(self.test100_return),
                _fmt(self.test0_return),
                _fmt(self.optimality_fraction),
                _fmt(self.loss),
                str(self.seed),
                self.config_id,
            ]
        )


def _fmt(v: float) -> str:
    return repr(float(v))


def epsilon(step: int, decay_steps: int, start: float = 1.0, end: float = 0.01) -> float:
    """Linear from ``start`` at step 0 to ``end`` at ``decay_steps``, then flat."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if step >= decay_steps:
        return end
    return start + (end - start) * (step / decay_steps)


def select_actions(
    pset: ParamSet,
    obs_batch: np.ndarray,
    eps: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Independent epsilon-greedy draw per row of a (B, 4, 9, 9) batch."""
    n = obs_batch.shape[0]
    u = rng.random(n)
    randoms = rng.integers(0, qnet.N_ACTIONS, size=n)
    actions = randoms.copy()
    greedy = u >= eps
    if greedy.any():
        q = qnet.q_forward(pset, obs_batch[greedy])
        actions[greedy] = np.argmax(q, axis=1)
    return actions


def td_targets(
    batch: list[Transition],
    online: ParamSet,
    target: ParamSet,
    gamma: float = 0.99,
) -> np.ndarray:
    """Double-DQN regression targets for a list of transitions."""
    dtype = online.config.np_dtype
    rewards = np.array([t.reward for t in batch], dtype=dtype)
    terminal = np.array([t.terminal for t in batch])
    next_obs = np.stack([t.next_obs for t in batch])
    x = tables.to_channel_last(next_obs, dtype) if next_obs.ndim == 4 else next_obs.astype(dtype)
    q_online = qnet.q_values_cl(online, x)
    q_target = qnet.q_values_cl(target, x)
    best = np.argmax(q_online, axis=1)
    boot = q_target[np.arange(len(batch)), best]
    return rewards + gamma * np.where(terminal, 0.0, boot).astype(dtype)


class _NetForward:
    """Forward dispatch with optional frozen-trunk feature caching.

    When a contiguous frozen prefix covers at least the conv trunk, the
    prefix output is precomputed once for every observation-bank row (the
    frozen tensors of online and target networks are identical by the freeze
    invariant, so one cache serves both) and training/evaluation run only
    the trainable head.
    """

    def __init__(self, online: ParamSet, target: ParamSet, bank: ObsBank):
        self.bank = bank
        self.prefix = qnet.frozen_prefix_len(online)
        self.start = 0
        self.features: np.ndarray | None = None
        if self.prefix >= 3:
            for name in online.frozen:
                for suffix in (".w", ".b"):
                    a = online.params[name + suffix].data
                    b = target.params[name + suffix].data
                    if a.tobytes() != b.tobytes():
                        raise AssertionError(f"frozen layer {name} differs between online and target")
            self.start = self.prefix
            chunks = []
            data = bank.data
            for lo in range(0, len(data), 2048):
                f = qnet.features_cl(online, data[lo : lo + 2048], upto=self.prefix - 1)
                chunks.append(f.reshape(f.shape[0], -1))
            self.features = np.concatenate(chunks, axis=0)

    def values(self, pset: ParamSet, rows: np.ndarray) -> np.ndarray:
        if self.features is None:
            return qnet.q_values_cl(pset, self.bank.data[rows])
        h = self.features[rows]
        names = pset.config.layer_names
        for name in names[self.start :]:
            w, b = pset.layer(name)
            h = h @ w.data.T
            h += b.data
            if name != names[-1]:
                np.maximum(h, 0, out=h)
        return h

    def train_input(self, rows: np.ndarray) -> Tensor:
        if self.features is None:
            return Tensor(self.bank.data[rows])
        return Tensor(self.features[rows])


class _EvalContext:
    """Tabular greedy evaluation over every involved (topology, goal) pair.

    The optimality fraction is computed over all non-terminal poses of the
    training pairs, which is exactly the training-time reachable set (every
    pose of a pair is mutually reachable; the oracle module verifies this).
    """

    def __init__(self, bank: ObsBank, train_tasks: list[Task],
                 test100: list[Task], test0: list[Task]):
        self.bank = bank
        self.tables: dict[int, PairTable] = {}
        for task in list(train_tasks) + list(test100) + list(test0):
            pk = pair_key(task.topology_id, task.goal)
            if pk not in self.tables:
                table = pair_table(task.topology_id, task.goal)
                bank.add_pair(table)
                self.tables[pk] = table
        self.pair_rows = {pk: bank.rows_for_pair(t) for pk, t in self.tables.items()}
        self.task_sets = {
            "train": self._locate(train_tasks),
            "test100": self._locate(test100),
            "test0": self._locate(test0),
        }
        self.train_pair_keys = sorted({pair_key(t.topology_id, t.goal) for t in train_tasks})

    def _locate(self, tasks: list[Task]) -> list[tuple[int, int]]:
        out = []
        for task in tasks:
            pk = pair_key(task.topology_id, task.goal)
            out.append((pk, self.tables[pk].pose_index[(task.agent_pos, task.agent_dir)]))
        return out

    def evaluate(self, forward: _NetForward, pset: ParamSet) -> dict[str, float]:
        steps_by_pair: dict[int, np.ndarray] = {}
        for pk, table in self.tables.items():
            actions = np.argmax(forward.values(pset, self.pair_rows[pk]), axis=1)
            steps_by_pair[pk] = rollout_steps_from_actions(table, actions, cap=gridworld.MAX_STEPS)
        out: dict[str, float] = {}
        for label, locs in self.task_sets.items():
            if locs:
                out[label] = float(np.mean([steps_by_pair[pk][pose] > 0 for pk, pose in locs]))
            else:
                out[label] = math.nan
        total = optimal = 0
        for pk in self.train_pair_keys:
            table = self.tables[pk]
            steps = steps_by_pair[pk][table.nonterminal]
            dist = table.dist[table.nonterminal]
            total += len(steps)
            optimal += int(((steps == dist) & (steps > 0)).sum())
        out["optimality_fraction"] = optimal / total if total else math.nan
        return out


@dataclass
class _EnvSlot:
    table: PairTable
    rows: np.ndarray  # bank rows of the pair's poses
    pose: int
    steps: int


class _Runner:
    """Vectorised environment stepping over tabulated pair dynamics."""

    def __init__(self, train_tasks: list[Task], bank: ObsBank, n_envs: int,
                 rng: np.random.Generator):
        self.tasks = list(train_tasks)
        self.bank = bank
        self.rng = rng
        self.tables = []
        self.start_pose = []
        for task in self.tasks:
            table = pair_table(task.topology_id, task.goal)
            bank.add_pair(table)
            self.tables.append(table)
            self.start_pose.append(table.pose_index[(task.agent_pos, task.agent_dir)])
        self.slots = [self._fresh() for _ in range(n_envs)]

    def _fresh(self) -> _EnvSlot:
        i = int(self.rng.integers(len(self.tasks)))
        table = self.tables[i]
        return _EnvSlot(
            table=table,
            rows=self.bank.rows_for_pair(table),
            pose=self.start_pose[i],
            steps=0,
        )

    def current_rows(self) -> np.ndarray:
        return np.array([s.rows[s.pose] for s in self.slots], dtype=np.int64)

    def step(self, actions: np.ndarray) -> list[Transition]:
        """Advance every env one action; resets finished episodes in place."""
        out = []
        for i, slot in enumerate(self.slots):
            a = int(actions[i])
            table = slot.table
            pose = slot.pose
            nxt = int(table.next_pose[pose, a])
            reward = int(table.reward[pose, a])
            terminal = bool(table.enters_goal[pose, a])
            slot.steps += 1
            truncated = not terminal and slot.steps >= gridworld.MAX_STEPS
            out.append(
                Transition(
                    state_key=int(table.state_keys[pose]),
                    obs=self.bank.data[slot.rows[pose]],
                    action=a,
                    reward=reward,
                    next_obs=self.bank.data[slot.rows[nxt]],
                    terminal=terminal,
                    next_state_key=int(table.state_keys[nxt]),
                    obs_id=int(slot.rows[pose]),
                    next_obs_id=int(slot.rows[nxt]),
                )
            )
            if terminal or truncated:
                self.slots[i] = self._fresh()
            else:
                slot.pose = nxt
        return out


def _greedy_rows(forward: _NetForward, pset: ParamSet, rows: np.ndarray) -> np.ndarray:
    return np.argmax(forward.values(pset, rows), axis=1)


def train_run(
    config: TrainConfig,
    train_tasks: list[Task],
    test100: list[Task] | None = None,
    test0: list[Task] | None = None,
    out_dir: str | Path | None = None,
    initial_params: ParamSet | None = None,
    prefill: list[Transition] | None = None,
) -> dict:
    """Run one training seed end to end; returns the summary dict.

    Writes ``metrics.csv``, ``checkpoint.bin`` and ``config.json`` into
    ``out_dir`` when given. ``initial_params`` seeds the online network
    (used by probe fine-tuning, which also passes ``prefill`` transitions
    loaded into the buffer before any environment step).
    """
    if not train_tasks:
        raise ValueError("train_tasks must not be empty")
    test100 = list(test100 or [])
    test0 = list(test0 or [])

    seeds = np.random.SeedSequence(config.seed).spawn(4)
    rng_init = np.random.default_rng(seeds[0])
    rng_explore = np.random.default_rng(seeds[1])
    rng_resets = np.random.default_rng(seeds[2])
    rng_sample = np.random.default_rng(seeds[3])

    bank = ObsBank(dtype=np.float32)
    runner = _Runner(list(train_tasks), bank, config.n_envs, rng_resets)
    eval_ctx = _EvalContext(bank, list(train_tasks), test100, test0)

    if initial_params is not None:
        online = initial_params.copy()
    else:
        online = qnet.build_network(NetworkConfig(config.variant), rng_init)
    target = online.copy()
    forward = _NetForward(online, target, bank)
    opt = autodiff.AdamState(
        online.params,
        lr=config.lr,
        beta1=config.adam_beta1,
        beta2=config.adam_beta2,
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )

    buffer = FifoBuffer(config.buffer_capacity)
    for t in prefill or []:
        # resolve observation-bank rows so prefilled records share the
        # vectorised batch-assembly path with collected ones
        if t.next_state_key < 0:
            raise ValueError("prefill transitions need next_state_key set")
        row = bank.row_of_key(t.state_key)
        nrow = bank.row_of_key(t.next_state_key)
        buffer.push(
            Transition(
                state_key=t.state_key,
                obs=bank.data[row],
                action=t.action,
                reward=t.reward,
                next_obs=bank.data[nrow],
                terminal=t.terminal,
                next_state_key=t.next_state_key,
                obs_id=row,
                next_obs_id=nrow,
            )
        )

    rows_out: list[MetricsRow] = []
    losses: list[float] = []

    def emit(step: int) -> None:
        scores = eval_ctx.evaluate(forward, online)
        loss = float(np.mean(losses)) if losses else math.nan
        losses.clear()
        rows_out.append(
            MetricsRow(
                env_step=step,
                epsilon=epsilon(step, config.eps_decay_steps, config.eps_start, config.eps_end),
                train_return=scores["train"],
                test100_return=scores["test100"],
                test0_return=scores["test0"],
                optimality_fraction=scores["optimality_fraction"],
                loss=loss,
                seed=config.seed,
                config_id=config.config_id,
            )
        )

    def gradient_step(step: int) -> None:
        if config.sampler == "sa_uniform":
            slots = buffer.draw_sa_uniform_slots(config.batch_size, rng_sample)
        else:
            slots = buffer.draw_uniform_slots(config.batch_size, rng_sample)
        arow = buffer.obs_ids[slots]
        nrow = buffer.next_obs_ids[slots]
        acts = buffer.actions[slots].astype(np.int64)
        rews = buffer.rewards[slots].astype(np.float32)
        terms = buffer.terminals[slots]

        un, inv = np.unique(nrow, return_inverse=True)
        q_next_online = forward.values(online, un)
        q_next_target = forward.values(target, un)
        best = np.argmax(q_next_online, axis=1)
        boot = q_next_target[np.arange(len(un)), best][inv]
        y = rews + config.gamma * np.where(terms, np.float32(0.0), boot.astype(np.float32))

        us, sinv = np.unique(arow, return_inverse=True)
        x = forward.train_input(us)
        online.zero_grads()
        q = qnet.q_forward_train(online, x, start=forward.start)
        pred = autodiff.gather_actions(q, sinv, acts)
        loss = autodiff.mse_loss(pred, y.astype(np.float32))
        autodiff.backward(loss)

        loss_val = float(loss.data)
        if not math.isfinite(loss_val):
            raise TrainingDiverged(
                f"non-finite loss at env step {step} (seed {config.seed}, config {config.config_id})"
            )
        losses.append(loss_val)

        grads = [t.grad for t in online.trainable().values() if t.grad is not None]
        autodiff.clip_global_norm(grads, config.max_grad_norm)
        opt.step(online.params)

    emit(0)
    env_steps = 0
    since_train = 0
    since_target = 0
    next_eval = config.eval_interval
    n_vector_steps = config.total_steps // config.n_envs
    if n_vector_steps * config.n_envs != config.total_steps:
        raise ValueError("total_steps must be a multiple of n_envs")

    for _ in range(n_vector_steps):
        eps = epsilon(env_steps, config.eps_decay_steps, config.eps_start, config.eps_end)
        rows = runner.current_rows()
        u = rng_explore.random(config.n_envs)
        actions = rng_explore.integers(0, qnet.N_ACTIONS, size=config.n_envs)
        greedy = u >= eps
        if greedy.any():
            actions[greedy] = _greedy_rows(forward, online, rows[greedy])
        for t in runner.step(actions):
            buffer.push(t)
        env_steps += config.n_envs
        since_train += config.n_envs
        since_target += config.n_envs

        while since_train >= config.train_freq:
            since_train -= config.train_freq
            for _ in range(config.gradient_steps):
                gradient_step(env_steps)
        while since_target >= config.target_update_interval:
            since_target -= config.target_update_interval
            qnet.soft_update(target, online, config.tau)
        while env_steps >= next_eval:
            emit(min(next_eval, env_steps))
            next_eval += config.eval_interval

    if rows_out[-1].env_step != env_steps:
        emit(env_steps)

    summary = {
        "config_id": config.config_id,
        "seed": config.seed,
        "env_steps": env_steps,
        "gradient_steps": opt.t,
        "final": asdict(rows_out[-1]),
        "buffer_size": len(buffer),
        "distinct_keys": buffer.distinct_keys(),
    }

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out_dir / "metrics.csv", rows_out)
        qnet.save_checkpoint(online, out_dir / "checkpoint.bin")
        (out_dir / "config.json").write_text(json.dumps(asdict(config), indent=2, sort_keys=True) + "\n")
    summary["rows"] = rows_out
    summary["params"] = online
    return summary


def write_metrics_csv(path: str | Path, rows: list[MetricsRow]) -> None:
    with open(path, "w") as f:
        f.write(METRICS_HEADER + "\n")
        for row in rows:
            f.write(row.to_csv() + "\n")


def evaluate(pset: ParamSet, task_set, cap: int = gridworld.MAX_STEPS) -> float:
    """Mean undiscounted greedy return over a task set (success rate here)."""
    tasks = list(task_set)
    if not tasks:
        raise ValueError("task set is empty")
    returns = []
    for task in tasks:
        table = pair_table(task.topology_id, task.goal)
        x = tables.to_channel_last(table.obs_u8, pset.config.np_dtype)
        actions = np.argmax(qnet.q_values_cl(pset, x), axis=1)
        steps = rollout_steps_from_actions(table, actions, cap=cap)
        returns.append(float(steps[table.pose_index[(task.agent_pos, task.agent_dir)]] > 0))
    return float(np.mean(returns))
