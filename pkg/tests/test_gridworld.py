import numpy as np
import pytest

from fourroom_lab import gridworld
from fourroom_lab.gridworld import (
    GRID_SIZE,
    MAX_STEPS,
    N_TOPOLOGIES,
    EnvState,
    Task,
    Topology,
    build_grid,
    decode_observation,
    free_cells,
    load_tasks,
    observe,
    reset,
    save_tasks,
    step,
    task_from_line,
    task_to_line,
)


def brute_force_wall_count(topology: Topology) -> int:
    # Independent enumeration: boundary plus arm cells minus doors.
    walls = set()
    for x in range(GRID_SIZE):
        for y in range(GRID_SIZE):
            if x in (0, 8) or y in (0, 8):
                walls.add((x, y))
            elif x == 4 and 1 <= y <= 7:
                walls.add((x, y))
            elif y == 4 and 1 <= x <= 7:
                walls.add((x, y))
    for door in topology.doors:
        walls.discard(door)
    return len(walls)


def topo_from_doors(top, bottom, left, right) -> Topology:
    tid = ((top * 3 + bottom) * 3 + left) * 3 + right
    return Topology.from_id(tid)


class TestBuildGrid:
    def test_wall_count_is_41_for_every_topology(self):
        for tid in range(N_TOPOLOGIES):
            topo = Topology.from_id(tid)
            grid = build_grid(topo)
            assert grid.sum() == 41
            assert grid.sum() == brute_force_wall_count(topo)

    def test_center_always_wall(self):
        for tid in range(N_TOPOLOGIES):
            assert build_grid(Topology.from_id(tid))[4, 4]

    def test_doors_are_free(self):
        topo = topo_from_doors(1, 1, 1, 1)  # doors (4,2),(4,6),(2,4),(6,4)
        assert topo.doors == ((4, 2), (4, 6), (2, 4), (6, 4))
        grid = build_grid(topo)
        assert grid.sum() == 41
        for x, y in topo.doors:
            assert not grid[y, x]

    def test_free_cell_count_is_40(self):
        for tid in range(0, N_TOPOLOGIES, 7):
            assert len(free_cells(tid)) == 40

    def test_invalid_id_rejected(self):
        with pytest.raises(ValueError):
            Topology.from_id(81)
        with pytest.raises(ValueError):
            Topology.from_id(-1)

    def test_id_roundtrip(self):
        for tid in range(N_TOPOLOGIES):
            assert Topology.from_id(tid).id == tid


def make_state(topology_id=0, goal=(1, 1), agent_pos=(7, 7), agent_dir=0) -> EnvState:
    task = Task(topology_id=topology_id, goal=goal, agent_pos=agent_pos, agent_dir=agent_dir)
    task.validate()
    return reset(task)


class TestObserve:
    def test_channel_sums(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            tid = int(rng.integers(N_TOPOLOGIES))
            cells = free_cells(tid)
            goal = cells[rng.integers(len(cells))]
            pos = cells[rng.integers(len(cells))]
            if pos == goal:
                continue
            state = make_state(tid, goal, pos, int(rng.integers(4)))
            obs = observe(state)
            assert obs.shape == (4, 9, 9)
            assert [int(obs[c].sum()) for c in range(4)] == [1, 1, 41, 1]
            assert obs[0, 4, 4] == 1

    def test_facing_cell_for_dir0(self):
        state = make_state(agent_dir=0)
        obs = observe(state)
        assert obs[1, 4, 5] == 1

    def test_facing_cell_all_dirs(self):
        expected = {0: (4, 5), 1: (5, 4), 2: (4, 3), 3: (3, 4)}
        for d, (i, j) in expected.items():
            obs = observe(make_state(agent_dir=d))
            assert obs[1, i, j] == 1

    def test_translation_shifts_world_channels_only(self):
        a = make_state(agent_pos=(1, 2))
        b = make_state(agent_pos=(2, 2))
        oa, ob = observe(a), observe(b)
        assert np.array_equal(oa[0], ob[0])
        assert np.array_equal(oa[1], ob[1])
        # b is a translated by (+1, 0): world channels circularly shift by -1 column
        assert np.array_equal(np.roll(oa[2], -1, axis=1), ob[2])
        assert np.array_equal(np.roll(oa[3], -1, axis=1), ob[3])

    def test_roundtrip_decoding(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            tid = int(rng.integers(N_TOPOLOGIES))
            cells = free_cells(tid)
            goal = cells[rng.integers(len(cells))]
            pos = cells[rng.integers(len(cells))]
            if pos == goal:
                continue
            task = Task(tid, goal, pos, int(rng.integers(4)))
            decoded = decode_observation(observe(reset(task)))
            assert decoded == task

    def test_injective_over_one_pair(self):
        seen = set()
        tid, goal = 13, (2, 2)
        for pos in free_cells(tid):
            if pos == goal:
                continue
            for d in range(4):
                obs = observe(reset(Task(tid, goal, pos, d)))
                seen.add(obs.tobytes())
        assert len(seen) == 156


class TestStep:
    def test_forward_into_wall_keeps_position(self):
        state = make_state(agent_pos=(7, 7), agent_dir=0)  # wall at x=8
        nxt, reward, term, trunc = step(state, 2)
        assert nxt.agent_pos == (7, 7)
        assert (reward, term, trunc) == (0, False, False)
        assert nxt.step_count == 1

    def test_forward_onto_goal_terminates_with_reward_1(self):
        state = make_state(goal=(6, 7), agent_pos=(5, 7), agent_dir=0)
        nxt, reward, term, trunc = step(state, 2)
        assert (reward, term, trunc) == (1, True, False)
        assert nxt.agent_pos == (6, 7)
        assert nxt.terminated

    def test_turns_wrap_mod_4(self):
        state = make_state(agent_dir=0)
        left, reward, term, _ = step(state, 0)
        assert left.agent_dir == 3 and reward == 0 and not term
        right, _, _, _ = step(state, 1)
        assert right.agent_dir == 1
        assert left.agent_pos == state.agent_pos

    def test_truncation_at_step_cap(self):
        state = make_state(agent_dir=0, agent_pos=(7, 7))
        for i in range(MAX_STEPS):
            state, _, term, trunc = step(state, 0)  # spin forever
        assert trunc and not term
        assert state.step_count == MAX_STEPS

    def test_goal_entry_at_cap_terminates_not_truncates(self):
        # 98 wall bumps, one turn, then the 100th step enters the goal
        state = make_state(goal=(6, 7), agent_pos=(7, 7), agent_dir=1)
        for _ in range(MAX_STEPS - 2):
            state, _, _, _ = step(state, 2)  # forward into the y=8 wall
        state, _, _, _ = step(state, 1)  # turn right: now facing -x
        assert state.agent_pos == (7, 7) and state.agent_dir == 2
        state, reward, term, trunc = step(state, 2)
        assert (reward, term, trunc) == (1, True, False)
        assert state.step_count == MAX_STEPS

    def test_step_after_done_rejected(self):
        state = make_state(goal=(6, 7), agent_pos=(5, 7), agent_dir=0)
        state, _, _, _ = step(state, 2)
        with pytest.raises(RuntimeError):
            step(state, 0)

    def test_determinism(self):
        s1, s2 = make_state(), make_state()
        for a in [0, 2, 1, 2, 2, 0, 2]:
            r1 = step(s1, a)
            r2 = step(s2, a)
            assert r1 == r2
            s1, s2 = r1[0], r2[0]

    def test_reward_only_on_goal_entry(self):
        rng = np.random.default_rng(2)
        state = make_state(topology_id=40, goal=(1, 1), agent_pos=(7, 7), agent_dir=2)
        while not (state.terminated or state.truncated):
            action = int(rng.integers(3))
            prev_pos = state.agent_pos
            state, reward, term, trunc = step(state, action)
            entered = state.agent_pos == state.task.goal and prev_pos != state.agent_pos
            assert reward == (1 if entered else 0)
            assert term == entered


class TestTaskFiles:
    def test_line_roundtrip(self):
        task = Task(topology_id=17, goal=(2, 3), agent_pos=(6, 6), agent_dir=3)
        assert task_from_line(task_to_line(task)) == task

    def test_file_roundtrip(self, tmp_path):
        tasks = [
            Task(0, (1, 1), (2, 2), 0),
            Task(80, (7, 7), (1, 6), 3),
        ]
        path = tmp_path / "set.tasks"
        save_tasks(path, tasks)
        assert load_tasks(path) == tasks
        assert path.read_text() == "0,1,1,2,2,0\n80,7,7,1,6,3\n"

    def test_invalid_record_rejected(self):
        with pytest.raises(ValueError):
            task_from_line("1,2,3")
        with pytest.raises(ValueError):
            task_from_line("0,4,4,2,2,0")  # goal on the center wall
