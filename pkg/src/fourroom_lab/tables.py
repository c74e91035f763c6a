"""Tabulated dynamics for (topology, goal) pairs.

The environment is tiny and fully observable, so for each (topology, goal)
pair we tabulate every pose ``(cell, direction)`` once: transitions, rewards,
observations, shortest goal distances, and packed state keys. The tables are
built by literally running :mod:`fourroom_lab.gridworld`, so they cannot
drift from the environment semantics; they exist to make training loops and
brute-force oracles cheap.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import gridworld
from .gridworld import GRID_SIZE, N_ACTIONS, EnvState, Task, Topology

N_DIRS = 4
POSES_PER_PAIR = 160  # 40 free cells x 4 directions
NONTERMINAL_PER_PAIR = 156  # excludes the 4 poses sitting on the goal


def cell_id(x: int, y: int) -> int:
    return y * GRID_SIZE + x


def pack_state_key(topology_id: int, goal: tuple[int, int], pos: tuple[int, int], direction: int) -> int:
    """Canonical injective packing of a full environment state."""
    return ((topology_id * 81 + cell_id(*goal)) * 81 + cell_id(*pos)) * 4 + direction


def unpack_state_key(key: int) -> tuple[int, tuple[int, int], tuple[int, int], int]:
    direction = key % 4
    rest = key // 4
    pos = rest % 81
    rest //= 81
    goal = rest % 81
    topology_id = rest // 81
    return (
        topology_id,
        (goal % GRID_SIZE, goal // GRID_SIZE),
        (pos % GRID_SIZE, pos // GRID_SIZE),
        direction,
    )


def pair_key(topology_id: int, goal: tuple[int, int]) -> int:
    return topology_id * 81 + cell_id(*goal)


@dataclass
class PairTable:
    """All poses of one (topology, goal) pair plus tabulated one-step dynamics."""

    topology_id: int
    goal: tuple[int, int]
    poses: list[tuple[tuple[int, int], int]]  # (cell, dir), goal poses included
    pose_index: dict[tuple[tuple[int, int], int], int]
    nonterminal: np.ndarray  # indices of poses not on the goal (156,)
    next_pose: np.ndarray  # (160, 3) int32, self-loop on terminal rows
    reward: np.ndarray  # (160, 3) uint8
    enters_goal: np.ndarray  # (160, 3) bool
    dist: np.ndarray  # (160,) int32 min actions to enter goal; 0 on goal poses
    state_keys: np.ndarray  # (160,) int64
    obs_u8: np.ndarray  # (160, 4, 9, 9) uint8

    def state_for(self, pose_idx: int, step_count: int = 0) -> EnvState:
        cell, direction = self.poses[pose_idx]
        task = Task(self.topology_id, self.goal, cell, direction)
        return EnvState(task=task, agent_pos=cell, agent_dir=direction, step_count=step_count)


@lru_cache(maxsize=None)
def pair_table(topology_id: int, goal: tuple[int, int]) -> PairTable:
    topo = Topology.from_id(topology_id)
    walls = gridworld.build_grid(topo)
    if walls[goal[1], goal[0]]:
        raise ValueError(f"goal {goal} is a wall under topology {topology_id}")

    cells = gridworld.free_cells(topology_id)
    poses = [(cell, d) for cell in cells for d in range(N_DIRS)]
    pose_index = {pose: i for i, pose in enumerate(poses)}
    n = len(poses)

    next_pose = np.zeros((n, N_ACTIONS), dtype=np.int32)
    reward = np.zeros((n, N_ACTIONS), dtype=np.uint8)
    enters_goal = np.zeros((n, N_ACTIONS), dtype=bool)
    obs_u8 = np.zeros((n, 4, GRID_SIZE, GRID_SIZE), dtype=np.uint8)
    state_keys = np.empty(n, dtype=np.int64)

    probe_task = Task(topology_id, goal, cells[0] if cells[0] != goal else cells[1], 0)
    for i, (cell, direction) in enumerate(poses):
        state = EnvState(task=probe_task, agent_pos=cell, agent_dir=direction)
        obs_u8[i] = gridworld.observe(state)
        state_keys[i] = pack_state_key(topology_id, goal, cell, direction)
        if cell == goal:
            next_pose[i] = i  # terminal; rows never used by rollouts
            continue
        for a in range(N_ACTIONS):
            nxt, r, term, _ = gridworld.step(state, a)
            next_pose[i, a] = pose_index[(nxt.agent_pos, nxt.agent_dir)]
            reward[i, a] = r
            enters_goal[i, a] = term

    nonterminal = np.array([i for i, (cell, _) in enumerate(poses) if cell != goal], dtype=np.int64)

    # Min actions to enter the goal, by reverse BFS over the tabulated graph.
    dist = np.full(n, -1, dtype=np.int32)
    for i, (cell, _) in enumerate(poses):
        if cell == goal:
            dist[i] = 0
    frontier = [i for i in range(n) if enters_goal[i].any()]
    for i in frontier:
        dist[i] = 1
    rev: list[list[int]] = [[] for _ in range(n)]
    for i in nonterminal:
        for a in range(N_ACTIONS):
            if not enters_goal[i, a]:
                rev[next_pose[i, a]].append(i)
    while frontier:
        nxt_frontier = []
        for j in frontier:
            for i in rev[j]:
                if dist[i] == -1:
                    dist[i] = dist[j] + 1
                    nxt_frontier.append(i)
        frontier = nxt_frontier
    if (dist < 0).any():
        raise AssertionError(
            f"pair (topology={topology_id}, goal={goal}) has poses that cannot reach the goal"
        )

    return PairTable(
        topology_id=topology_id,
        goal=goal,
        poses=poses,
        pose_index=pose_index,
        nonterminal=nonterminal,
        next_pose=next_pose,
        reward=reward,
        enters_goal=enters_goal,
        dist=dist,
        state_keys=state_keys,
        obs_u8=obs_u8,
    )


def pair_table_for_task(task: Task) -> PairTable:
    return pair_table(task.topology_id, task.goal)


def to_channel_last(obs: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Observations (B, 4, 9, 9) -> contiguous channel-last activations (B, 81, 4)."""
    b = obs.shape[0]
    return np.ascontiguousarray(obs.reshape(b, 4, 81).transpose(0, 2, 1).astype(dtype, copy=False))


class ObsBank:
    """Concatenated channel-last observation store over a set of pairs.

    Maps packed state keys to rows of one dense (N, 81, 4) float array so
    training batches and evaluation sweeps assemble network inputs with a
    single fancy index instead of per-transition encoding work.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._blocks: list[np.ndarray] = []
        self._row_of_key: dict[int, int] = {}
        self._pair_rows: dict[int, int] = {}  # pair_key -> first row of its block
        self._data: np.ndarray | None = None
        self._n = 0

    def add_pair(self, table: PairTable) -> None:
        pk = pair_key(table.topology_id, table.goal)
        if pk in self._pair_rows:
            return
        self._pair_rows[pk] = self._n
        for i, key in enumerate(table.state_keys):
            self._row_of_key[int(key)] = self._n + i
        self._blocks.append(to_channel_last(table.obs_u8, self.dtype))
        self._n += len(table.state_keys)
        self._data = None

    @property
    def data(self) -> np.ndarray:
        if self._data is None:
            self._data = np.concatenate(self._blocks, axis=0)
        return self._data

    def __len__(self) -> int:
        return self._n

    def row_of_key(self, key: int) -> int:
        return self._row_of_key[key]

    def rows_for_pair(self, table: PairTable) -> np.ndarray:
        start = self._pair_rows[pair_key(table.topology_id, table.goal)]
        return np.arange(start, start + len(table.state_keys))

    def gather(self, rows: np.ndarray) -> np.ndarray:
        return self.data[rows]
