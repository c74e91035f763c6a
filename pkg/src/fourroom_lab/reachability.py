"""Exact brute-force oracles over the reachable state space.

Everything here is small enough to enumerate: a (topology, goal) pair has
exactly 156 non-terminal states, so reachable sets come from BFS closure,
optimal values from value iteration run to the fixed point, and the policy
optimality metric from literally rolling the greedy policy out of every
state. These oracles are the ground truth the learned agents are scored
against.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import gridworld
from .gridworld import MAX_STEPS, Task
from .tables import PairTable, pack_state_key, pair_key, pair_table, unpack_state_key

GAMMA_DEFAULT = 0.99
VALUE_ITERATION_TOL = 1e-12

# A q-function maps one observation (4,9,9) or a batch (B,4,9,9) to action values.
QFunction = Callable[[np.ndarray], np.ndarray]


def enumerate_states(topology_id: int, goal: tuple[int, int]) -> list[int]:
    """All 156 non-terminal state keys of a (topology, goal) pair."""
    table = pair_table(topology_id, goal)
    return [int(table.state_keys[i]) for i in table.nonterminal]


@dataclass(frozen=True)
class ReachableSet:
    """Set of state keys closed under environment transitions."""

    keys: frozenset[int]
    source: str = ""

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, key: int) -> bool:
        return key in self.keys

    def contains_task(self, task: Task) -> bool:
        return pack_state_key(task.topology_id, task.goal, task.agent_pos, task.agent_dir) in self.keys

    def pairs(self) -> set[tuple[int, tuple[int, int]]]:
        return {(k[0], k[1]) for k in map(unpack_state_key, self.keys)}


def reachable_set(train_tasks: Sequence[Task], source: str = "train") -> ReachableSet:
    """BFS closure of the training start states under the dynamics.

    The closure is verified against direct pose enumeration for every
    (topology, goal) pair it touches: within a pair, every pose must be
    mutually reachable, so the closure has exactly ``156 * n_pairs`` states.
    """
    keys: set[int] = set()
    pairs_seen: set[int] = set()
    for task in train_tasks:
        table = pair_table(task.topology_id, task.goal)
        pk = pair_key(task.topology_id, task.goal)
        start = table.pose_index[(task.agent_pos, task.agent_dir)]
        reached = _bfs_closure(table, start)
        new_keys = {int(table.state_keys[i]) for i in reached}
        if pk not in pairs_seen:
            pairs_seen.add(pk)
            enum = set(enumerate_states(task.topology_id, task.goal))
            if new_keys != enum:
                raise AssertionError(
                    f"BFS closure of pair (topology={task.topology_id}, goal={task.goal}) "
                    f"has {len(new_keys)} states, enumeration has {len(enum)}"
                )
        keys.update(new_keys)
    return ReachableSet(keys=frozenset(keys), source=source)


def _bfs_closure(table: PairTable, start_pose: int) -> set[int]:
    seen = {start_pose}
    queue = deque([start_pose])
    while queue:
        i = queue.popleft()
        for a in range(gridworld.N_ACTIONS):
            if table.enters_goal[i, a]:
                continue  # terminal successor, not part of the set
            j = int(table.next_pose[i, a])
            if j not in seen:
                seen.add(j)
                queue.append(j)
    return seen


@dataclass
class ValueTable:
    """Optimal values of one (topology, goal) pair.

    ``q[i, a]`` and ``v[i]`` are indexed by pose index of the pair's table;
    entries on goal poses are zero. Satisfies ``v = gamma ** (dist - 1)`` on
    non-terminal poses.
    """

    table: PairTable
    gamma: float
    q: np.ndarray  # (160, 3) float64
    v: np.ndarray  # (160,) float64

    def v_of_key(self, key: int) -> float:
        _, _, pos, direction = unpack_state_key(key)
        return float(self.v[self.table.pose_index[(pos, direction)]])

    def q_of_key(self, key: int) -> np.ndarray:
        _, _, pos, direction = unpack_state_key(key)
        return self.q[self.table.pose_index[(pos, direction)]].copy()

    def greedy_actions(self) -> np.ndarray:
        return np.argmax(self.q, axis=1)


def optimal_values(topology_id: int, goal: tuple[int, int], gamma: float = GAMMA_DEFAULT) -> ValueTable:
    """Value iteration to the fixed point over the pair's 156-state MDP.

    Deterministic dynamics and a tiny state space make exactness cheap: the
    sweep runs until the residual drops below 1e-12, then the result is
    cross-checked against BFS distances via ``v = gamma ** (dist - 1)``.
    """
    table = pair_table(topology_id, goal)
    n = len(table.poses)
    q = np.zeros((n, gridworld.N_ACTIONS), dtype=np.float64)
    r = table.reward.astype(np.float64)
    cont = ~table.enters_goal  # bootstrap mask
    nxt = table.next_pose
    terminal_mask = np.ones(n, dtype=bool)
    terminal_mask[table.nonterminal] = False

    while True:
        v = q.max(axis=1)
        v[terminal_mask] = 0.0
        q_new = r + gamma * cont * v[nxt]
        q_new[terminal_mask] = 0.0
        residual = np.abs(q_new - q).max()
        q = q_new
        if residual < VALUE_ITERATION_TOL:
            break

    v = q.max(axis=1)
    v[terminal_mask] = 0.0
    expected = np.where(terminal_mask, 0.0, gamma ** (table.dist.astype(np.float64) - 1.0))
    if not np.allclose(v, expected, rtol=0.0, atol=1e-10):
        raise AssertionError(
            f"value iteration disagrees with BFS distances for pair "
            f"(topology={topology_id}, goal={goal})"
        )
    return ValueTable(table=table, gamma=gamma, q=q, v=v)


def oracle_qfunction(value_tables: Iterable[ValueTable]) -> QFunction:
    """Wrap optimal-value tables as an observation-level q-function.

    Decodes each observation back to its state (the encoding is injective)
    and looks the values up; batches are handled row by row with a bytes
    memo so repeated states stay cheap.
    """
    by_pair: dict[int, ValueTable] = {}
    for vt in value_tables:
        by_pair[pair_key(vt.table.topology_id, vt.table.goal)] = vt
    memo: dict[bytes, np.ndarray] = {}

    def lookup_one(obs: np.ndarray) -> np.ndarray:
        key = np.ascontiguousarray(obs, dtype=np.uint8).tobytes()
        hit = memo.get(key)
        if hit is None:
            state = gridworld.decode_observation(obs)
            vt = by_pair[pair_key(state.topology_id, state.goal)]
            hit = vt.q[vt.table.pose_index[(state.agent_pos, state.agent_dir)]]
            memo[key] = hit
        return hit

    def qfun(obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs)
        if obs.ndim == 3:
            return lookup_one(obs).copy()
        return np.stack([lookup_one(o) for o in obs])

    return qfun


def greedy_return(qfun: QFunction, task: Task, cap: int = MAX_STEPS) -> tuple[int, int]:
    """Deterministic greedy rollout; ties break to the lowest action index.

    Returns ``(return, steps)`` with return 1 iff the goal is entered within
    ``cap`` actions.
    """
    state = gridworld.reset(task)
    for t in range(1, cap + 1):
        values = np.asarray(qfun(gridworld.observe(state)))
        action = int(np.argmax(values))
        state, reward, terminated, _ = gridworld.step(state, action)
        if terminated:
            return 1, t
        if state.truncated:
            break
    return 0, cap


def greedy_action_table(qfun: QFunction, table: PairTable) -> np.ndarray:
    """Greedy action for every pose of a pair, evaluated in one batch."""
    values = np.asarray(qfun(table.obs_u8.astype(np.float32)))
    if values.shape != (len(table.poses), gridworld.N_ACTIONS):
        raise ValueError(f"qfun returned shape {values.shape}")
    return np.argmax(values, axis=1)


def rollout_steps_from_actions(table: PairTable, actions: np.ndarray, cap: int = MAX_STEPS) -> np.ndarray:
    """Steps to goal from every pose under a fixed action table; 0 if never.

    Vectorised over all poses simultaneously; exactly mirrors
    :func:`greedy_return` for the policy induced by ``actions``.
    """
    pose = np.arange(len(table.poses))
    steps = np.zeros(len(table.poses), dtype=np.int32)
    active = np.ones(len(table.poses), dtype=bool)
    terminal_mask = np.ones(len(table.poses), dtype=bool)
    terminal_mask[table.nonterminal] = False
    active[terminal_mask] = False
    for t in range(1, cap + 1):
        act = actions[pose[active]]
        idx = pose[active]
        done = table.enters_goal[idx, act]
        steps_active = steps[active]
        steps_active[done] = t
        steps[active] = steps_active
        pose_active = table.next_pose[idx, act]
        pose[active] = pose_active
        still = np.flatnonzero(active)
        active[still[done]] = False
        if not active.any():
            break
    return steps


def policy_optimality_fraction(qfun: QFunction, reachable: ReachableSet) -> float:
    """Fraction of reachable states whose greedy rollout attains the optimal return.

    A state counts as optimal when the greedy policy enters the goal in
    exactly its BFS distance ``d(s)`` steps (return-level optimality; ties
    between equally short paths all count).
    """
    total = 0
    optimal = 0
    for topology_id, goal in sorted(reachable.pairs()):
        table = pair_table(topology_id, goal)
        actions = greedy_action_table(qfun, table)
        steps = rollout_steps_from_actions(table, actions)
        nt = table.nonterminal
        member = np.array([int(table.state_keys[i]) in reachable.keys for i in nt])
        hits = (steps[nt] == table.dist[nt]) & (steps[nt] > 0)
        total += int(member.sum())
        optimal += int((hits & member).sum())
    if total == 0:
        raise ValueError("reachable set is empty")
    return optimal / total
