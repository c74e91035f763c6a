"""Construction of the fixed training set and the paired test sets.

The two test sets isolate what changes between training and deployment:
``test100`` keeps each training task's topology and goal but moves the agent
(so every test state stays inside the training-time reachable space), while
``test0`` swaps in a topology never used in training (so no test state is
reachable). Index ``i`` of each set is aligned with index ``i`` of the
training set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gridworld
from .gridworld import N_TOPOLOGIES, Task

DEFAULT_SET_SIZE = 40
_MAX_RESAMPLES = 100_000


class TaskSetError(RuntimeError):
    """Raised when a task-set constraint cannot be satisfied."""


@dataclass(frozen=True)
class TaskSet:
    tasks: tuple[Task, ...]
    label: str  # train | test100 | test0
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i: int) -> Task:
        return self.tasks[i]

    def topologies(self) -> set[int]:
        return {t.topology_id for t in self.tasks}


def _draw_pose(rng: np.random.Generator, cells: list[tuple[int, int]], goal: tuple[int, int]):
    while True:
        pos = cells[rng.integers(len(cells))]
        if pos != goal:
            return pos, int(rng.integers(4))


def sample_train_set(rng: np.random.Generator, n: int = DEFAULT_SET_SIZE, seed: int | None = None) -> TaskSet:
    """Sample ``n`` distinct tasks uniformly.

    Topology uniform over the 81 layouts, goal uniform over the 40 free
    cells, agent position uniform over the remaining 39, direction uniform.
    Distinctness is enforced on the full tuple only; topologies may repeat.
    Goals that disconnect the free-cell graph (1.1% of placements, see
    :func:`gridworld.goal_disconnects`) are resampled so that every pose of
    a (topology, goal) pair stays mutually reachable.
    """
    seen: set[Task] = set()
    tasks: list[Task] = []
    for _ in range(_MAX_RESAMPLES):
        if len(tasks) == n:
            break
        topology_id = int(rng.integers(N_TOPOLOGIES))
        cells = gridworld.free_cells(topology_id)
        goal = cells[rng.integers(len(cells))]
        if gridworld.goal_disconnects(topology_id, goal):
            continue
        pos, direction = _draw_pose(rng, cells, goal)
        task = Task(topology_id=topology_id, goal=goal, agent_pos=pos, agent_dir=direction)
        if task not in seen:
            seen.add(task)
            tasks.append(task)
    else:
        raise TaskSetError(f"could not sample {n} distinct tasks")
    return TaskSet(tasks=tuple(tasks), label="train", seed=seed)


def derive_test100(train: TaskSet, rng: np.random.Generator, seed: int | None = None) -> TaskSet:
    """Per training task, resample only the agent pose (topology and goal fixed).

    Every derived task therefore lies in the training-time reachable space.
    The new pose must differ from its training counterpart, and the full
    tuple must not collide with any training task or an earlier derived one.
    """
    forbidden: set[Task] = set(train.tasks)
    tasks: list[Task] = []
    for src in train.tasks:
        cells = gridworld.free_cells(src.topology_id)
        for _ in range(_MAX_RESAMPLES):
            pos, direction = _draw_pose(rng, cells, src.goal)
            cand = Task(src.topology_id, src.goal, pos, direction)
            if (pos, direction) != (src.agent_pos, src.agent_dir) and cand not in forbidden:
                break
        else:
            raise TaskSetError(f"no unseen pose available for train task {src}")
        forbidden.add(cand)
        tasks.append(cand)
    return TaskSet(tasks=tuple(tasks), label="test100", seed=seed)


def derive_test0(
    test100: TaskSet,
    train_topologies: set[int],
    rng: np.random.Generator,
    seed: int | None = None,
) -> TaskSet:
    """Per test100 task, swap the topology for one unused in training.

    Agent pose and goal are kept; the replacement topology is drawn
    uniformly from the unused ones and resampled until both the agent cell
    and the goal cell are free under it (cells on a wall arm restrict the
    choice to layouts with a door there) and the goal does not disconnect
    the new layout's free-cell graph.
    """
    unused = sorted(set(range(N_TOPOLOGIES)) - set(train_topologies))
    if not unused:
        raise TaskSetError("every topology was used in training; cannot build test0")
    chosen: set[Task] = set()
    tasks: list[Task] = []
    for src in test100.tasks:
        for _ in range(_MAX_RESAMPLES):
            topology_id = unused[rng.integers(len(unused))]
            walls = gridworld.build_grid(gridworld.Topology.from_id(topology_id))
            gx, gy = src.goal
            ax, ay = src.agent_pos
            if walls[gy, gx] or walls[ay, ax]:
                continue
            if gridworld.goal_disconnects(topology_id, src.goal):
                continue
            cand = Task(topology_id, src.goal, src.agent_pos, src.agent_dir)
            if cand not in chosen:
                break
        else:
            raise TaskSetError(
                f"no unused topology keeps agent {src.agent_pos} and goal {src.goal} free"
            )
        chosen.add(cand)
        tasks.append(cand)
    return TaskSet(tasks=tuple(tasks), label="test0", seed=seed)


def build_task_sets(seed: int, n: int = DEFAULT_SET_SIZE) -> tuple[TaskSet, TaskSet, TaskSet]:
    """Train/test100/test0 triple from one seed, with global distinctness checked."""
    rng = np.random.default_rng(seed)
    train = sample_train_set(rng, n, seed=seed)
    test100 = derive_test100(train, rng, seed=seed)
    test0 = derive_test0(test100, train.topologies(), rng, seed=seed)
    all_tasks = list(train) + list(test100) + list(test0)
    if len(set(all_tasks)) != len(all_tasks):
        raise TaskSetError("task sets are not globally distinct")
    return train, test100, test0
