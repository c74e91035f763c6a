"""Deterministic 4-room gridworld on a 9x9 grid.

Geometry and conventions (fixed so that every artifact is bit-reproducible):

* Coordinates are ``(x, y)`` with x growing to the right and y growing down,
  0-indexed. Numpy grids are indexed ``grid[y, x]``.
* The outer boundary is wall. Internal wall arms are the column ``x=4`` for
  ``y in 1..7`` and the row ``y=4`` for ``x in 1..7``; the center ``(4, 4)``
  is always wall. Each of the four arms has exactly one door chosen from its
  three candidate cells, giving ``3**4 = 81`` topologies. Wall count is
  always 41, free-cell count 40.
* Directions: 0=+x, 1=+y, 2=-x, 3=-y. Actions: 0=turn left, 1=turn right,
  2=move forward.
* Reward is 1 exactly on transitions that enter the goal cell, 0 otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

GRID_SIZE = 9
CENTER = GRID_SIZE // 2
N_TOPOLOGIES = 81
N_ACTIONS = 3
MAX_STEPS = 100  # episode step cap; truncation, not termination

ACTION_LEFT, ACTION_RIGHT, ACTION_FORWARD = 0, 1, 2
DIR_VECTORS = ((1, 0), (0, 1), (-1, 0), (0, -1))

# Door candidates per arm, in (x, y); index 0..2 within each arm.
_TOP_DOORS = ((4, 1), (4, 2), (4, 3))
_BOTTOM_DOORS = ((4, 5), (4, 6), (4, 7))
_LEFT_DOORS = ((1, 4), (2, 4), (3, 4))
_RIGHT_DOORS = ((5, 4), (6, 4), (7, 4))


@dataclass(frozen=True)
class Topology:
    """Door placement of the four internal wall arms.

    ``id`` packs the four door indices in base 3:
    ``id = ((top * 3 + bottom) * 3 + left) * 3 + right``.
    """

    door_top: tuple[int, int]
    door_bottom: tuple[int, int]
    door_left: tuple[int, int]
    door_right: tuple[int, int]
    id: int

    @staticmethod
    def from_id(topology_id: int) -> "Topology":
        if not 0 <= topology_id < N_TOPOLOGIES:
            raise ValueError(f"topology id must be in [0, 80], got {topology_id}")
        right = topology_id % 3
        left = (topology_id // 3) % 3
        bottom = (topology_id // 9) % 3
        top = topology_id // 27
        return Topology(
            door_top=_TOP_DOORS[top],
            door_bottom=_BOTTOM_DOORS[bottom],
            door_left=_LEFT_DOORS[left],
            door_right=_RIGHT_DOORS[right],
            id=topology_id,
        )

    @property
    def doors(self) -> tuple[tuple[int, int], ...]:
        return (self.door_top, self.door_bottom, self.door_left, self.door_right)


@dataclass(frozen=True)
class Task:
    """A fully observable starting state: topology, goal and agent pose."""

    topology_id: int
    goal: tuple[int, int]
    agent_pos: tuple[int, int]
    agent_dir: int

    def validate(self) -> None:
        walls = build_grid(Topology.from_id(self.topology_id))
        gx, gy = self.goal
        ax, ay = self.agent_pos
        if walls[gy, gx]:
            raise ValueError(f"goal {self.goal} is a wall cell")
        if walls[ay, ax]:
            raise ValueError(f"agent_pos {self.agent_pos} is a wall cell")
        if self.agent_pos == self.goal:
            raise ValueError("agent_pos must differ from goal")
        if self.agent_dir not in (0, 1, 2, 3):
            raise ValueError(f"agent_dir must be in 0..3, got {self.agent_dir}")


@dataclass(frozen=True)
class EnvState:
    """Evolving episode state. ``terminated`` iff the agent sits on the goal."""

    task: Task
    agent_pos: tuple[int, int]
    agent_dir: int
    step_count: int = 0
    terminated: bool = False
    truncated: bool = False


@lru_cache(maxsize=None)
def _grid_for_id(topology_id: int) -> np.ndarray:
    topo = Topology.from_id(topology_id)
    walls = np.zeros((GRID_SIZE, GRID_SIZE), dtype=bool)
    walls[0, :] = walls[-1, :] = True
    walls[:, 0] = walls[:, -1] = True
    walls[1:8, 4] = True  # vertical arm, indexed [y, x]
    walls[4, 1:8] = True  # horizontal arm
    for x, y in topo.doors:
        walls[y, x] = False
    out = walls.copy()
    out.setflags(write=False)
    return out


def build_grid(topology: Topology) -> np.ndarray:
    """Return the 9x9 boolean wall map (indexed ``[y, x]``) for a topology."""
    return _grid_for_id(topology.id)


def free_cells(topology_id: int) -> list[tuple[int, int]]:
    """All 40 non-wall cells of a topology, in (x, y), row-major order."""
    walls = _grid_for_id(topology_id)
    return [(x, y) for y in range(GRID_SIZE) for x in range(GRID_SIZE) if not walls[y, x]]


def reset(task: Task) -> EnvState:
    """Fresh episode state for a task."""
    return EnvState(task=task, agent_pos=task.agent_pos, agent_dir=task.agent_dir)


def goal_disconnects(topology_id: int, goal: tuple[int, int]) -> bool:
    """True when removing the goal cell disconnects the free-cell graph.

    Entering the goal ends the episode, so the agent can never pass through
    it; a goal on a cut cell splits the remaining 39 cells into mutually
    unreachable regions. This happens exactly when two adjacent wall arms
    both have their innermost door, making one corner cell the sole
    connector of a room (36 of the 3240 pairs). Task construction rejects
    these placements so that every pose of a pair stays mutually reachable.
    """
    cells = set(free_cells(topology_id)) - {goal}
    start = next(iter(cells))
    seen = {start}
    queue = [start]
    while queue:
        x, y = queue.pop()
        for dx, dy in DIR_VECTORS:
            nxt = (x + dx, y + dy)
            if nxt in cells and nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return len(seen) != len(cells)


def observe(state: EnvState) -> np.ndarray:
    """Binary 4x9x9 observation centered on the agent.

    ``obs[c, i, j]`` describes world cell
    ``((agent_x + j - 4) mod 9, (agent_y + i - 4) mod 9)``. Channels:
    0 agent (always the center cell), 1 the cell one step ahead of the agent
    ignoring walls, 2 walls, 3 goal.
    """
    ax, ay = state.agent_pos
    obs = np.zeros((4, GRID_SIZE, GRID_SIZE), dtype=np.uint8)
    obs[0, CENTER, CENTER] = 1
    dx, dy = DIR_VECTORS[state.agent_dir]
    obs[1, CENTER + dy, CENTER + dx] = 1
    walls = _grid_for_id(state.task.topology_id)
    obs[2] = np.roll(walls, (CENTER - ay, CENTER - ax), axis=(0, 1))
    gx, gy = state.task.goal
    obs[3, (gy - ay + CENTER) % GRID_SIZE, (gx - ax + CENTER) % GRID_SIZE] = 1
    return obs


def step(state: EnvState, action: int) -> tuple[EnvState, int, bool, bool]:
    """Advance one action; returns ``(next_state, reward, terminated, truncated)``.

    Turns never terminate. Forward moves one cell unless the target is a wall.
    Entering the goal gives reward 1 and terminates; hitting the step cap
    truncates (termination wins if the goal is entered exactly at the cap).
    """
    if state.terminated or state.truncated:
        raise RuntimeError("cannot step a finished episode")
    if action not in (ACTION_LEFT, ACTION_RIGHT, ACTION_FORWARD):
        raise ValueError(f"invalid action {action}")

    pos, direction = state.agent_pos, state.agent_dir
    reward = 0
    terminated = False
    if action == ACTION_LEFT:
        direction = (direction - 1) % 4
    elif action == ACTION_RIGHT:
        direction = (direction + 1) % 4
    else:
        dx, dy = DIR_VECTORS[direction]
        target = (pos[0] + dx, pos[1] + dy)
        walls = _grid_for_id(state.task.topology_id)
        if not walls[target[1], target[0]]:
            pos = target
            if pos == state.task.goal:
                reward = 1
                terminated = True

    step_count = state.step_count + 1
    truncated = not terminated and step_count >= MAX_STEPS
    next_state = EnvState(
        task=state.task,
        agent_pos=pos,
        agent_dir=direction,
        step_count=step_count,
        terminated=terminated,
        truncated=truncated,
    )
    return next_state, reward, terminated, truncated


def decode_observation(obs: np.ndarray) -> Task:
    """Invert :func:`observe`: recover (topology, goal, agent pose).

    The world's only two all-wall columns are x=0 and x=8 (circularly
    adjacent), likewise rows y=0 and y=8; locating them in the wall channel
    yields the agent position, after which goal and doors follow by
    unshifting. Returns the pose as a :class:`Task` (``agent_pos`` may equal
    ``goal`` when decoding a terminal state's observation).
    """
    obs = np.asarray(obs)
    if obs.shape != (4, GRID_SIZE, GRID_SIZE):
        raise ValueError(f"expected (4, 9, 9) observation, got {obs.shape}")
    ch_face, ch_wall, ch_goal = obs[1], obs[2], obs[3]

    full_cols = np.flatnonzero(ch_wall.sum(axis=0) == GRID_SIZE)
    full_rows = np.flatnonzero(ch_wall.sum(axis=1) == GRID_SIZE)
    if len(full_cols) != 2 or len(full_rows) != 2:
        raise ValueError("observation wall channel is not a valid layout")
    # Of the two adjacent full columns, pick the one whose left-circular
    # neighbour is the other: that column is world x=0.
    j0, j1 = full_cols
    j_zero = j0 if (j0 - 1) % GRID_SIZE == j1 else j1
    i0, i1 = full_rows
    i_zero = i0 if (i0 - 1) % GRID_SIZE == i1 else i1
    ax = (CENTER - j_zero) % GRID_SIZE
    ay = (CENTER - i_zero) % GRID_SIZE

    walls = np.roll(ch_wall, (ay - CENTER, ax - CENTER), axis=(0, 1)).astype(bool)
    doors = {}
    for arm, candidates in (
        ("top", _TOP_DOORS),
        ("bottom", _BOTTOM_DOORS),
        ("left", _LEFT_DOORS),
        ("right", _RIGHT_DOORS),
    ):
        open_idx = [k for k, (x, y) in enumerate(candidates) if not walls[y, x]]
        if len(open_idx) != 1:
            raise ValueError(f"wall channel has {len(open_idx)} doors on the {arm} arm")
        doors[arm] = open_idx[0]
    topology_id = ((doors["top"] * 3 + doors["bottom"]) * 3 + doors["left"]) * 3 + doors["right"]

    gi, gj = np.argwhere(ch_goal == 1)[0]
    goal = (int((ax + gj - CENTER) % GRID_SIZE), int((ay + gi - CENTER) % GRID_SIZE))
    fi, fj = np.argwhere(ch_face == 1)[0]
    offset = (int(fj) - CENTER, int(fi) - CENTER)
    agent_dir = DIR_VECTORS.index(offset)
    return Task(topology_id=topology_id, goal=goal, agent_pos=(ax, ay), agent_dir=agent_dir)


# Task-set files: one task per line, `topology_id,goal_x,goal_y,agent_x,agent_y,agent_dir`.


def task_to_line(task: Task) -> str:
    return ",".join(
        str(v)
        for v in (
            task.topology_id,
            task.goal[0],
            task.goal[1],
            task.agent_pos[0],
            task.agent_pos[1],
            task.agent_dir,
        )
    )


def task_from_line(line: str) -> Task:
    parts = line.strip().split(",")
    if len(parts) != 6:
        raise ValueError(f"malformed task record: {line!r}")
    t, gx, gy, ax, ay, d = (int(p) for p in parts)
    task = Task(topology_id=t, goal=(gx, gy), agent_pos=(ax, ay), agent_dir=d)
    task.validate()
    return task


def save_tasks(path: str | Path, tasks: Iterable[Task]) -> None:
    Path(path).write_text("".join(task_to_line(t) + "\n" for t in tasks))


def load_tasks(path: str | Path) -> list[Task]:
    lines = Path(path).read_text().splitlines()
    return [task_from_line(line) for line in lines if line.strip()]
