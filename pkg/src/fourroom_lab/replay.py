"""Transition storage with FIFO eviction and two sampling strategies.

``sample_uniform`` draws i.i.d. over stored transitions (so a state-action
pair's sampling weight is proportional to its visitation count), while
``sample_sa_uniform`` first draws a (state, action) key uniformly over the
keys present in the buffer and then one stored duplicate of that key. The
difference between these two marginals is the entire point of the module.

The buffer is columnar internally (keys, actions, rewards, flags as flat
arrays; observation arrays held by reference) so training batches assemble
without touching Python objects, but the public sampling API returns full
:class:`Transition` records.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Transition:
    """One environment step keyed by exact state identity.

    ``terminal`` marks goal entry only; episodes cut by the step cap are not
    terminal (their successors still bootstrap).
    """

    state_key: int
    obs: np.ndarray
    action: int
    reward: int
    next_obs: np.ndarray
    terminal: bool
    next_state_key: int = -1
    obs_id: int = -1  # optional dense row hints for vectorised batch assembly
    next_obs_id: int = -1


class SAUniformIndex:
    """Exact map from (state, action) keys to the buffer slots holding them.

    Slots are removable in O(1) via swap-with-last; the key census list
    supports uniform key draws. Consistency with the storage is an invariant
    after every push and eviction.
    """

    def __init__(self):
        self._slots_of: dict[int, list[int]] = {}
        self._pos_of_slot: dict[int, int] = {}
        self._keys: list[int] = []
        self._key_pos: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self._keys)

    def keys(self) -> list[int]:
        return list(self._keys)

    def count(self, key: int) -> int:
        return len(self._slots_of.get(key, ()))

    def add(self, key: int, slot: int) -> None:
        slots = self._slots_of.get(key)
        if slots is None:
            self._slots_of[key] = slots = []
            self._key_pos[key] = len(self._keys)
            self._keys.append(key)
        self._pos_of_slot[slot] = len(slots)
        slots.append(slot)

    def remove(self, key: int, slot: int) -> None:
        slots = self._slots_of[key]
        pos = self._pos_of_slot.pop(slot)
        last = slots.pop()
        if last != slot:
            slots[pos] = last
            self._pos_of_slot[last] = pos
        if not slots:
            del self._slots_of[key]
            kpos = self._key_pos.pop(key)
            klast = self._keys.pop()
            if klast != key:
                self._keys[kpos] = klast
                self._key_pos[klast] = kpos

    def draw_slots(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        """Key uniform, then uniform member of the key's slot list."""
        if not self._keys:
            raise ValueError("cannot sample from an empty index")
        key_idx = rng.integers(0, len(self._keys), size=batch)
        u = rng.random(batch)
        out = np.empty(batch, dtype=np.int64)
        for i, ki in enumerate(key_idx):
            slots = self._slots_of[self._keys[ki]]
            out[i] = slots[int(u[i] * len(slots))]
        return out


def sa_key(state_key: int, action: int) -> int:
    return state_key * 3 + action


class FifoBuffer:
    """Fixed-capacity ring store with strictly oldest-first eviction."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.insert_count = 0
        self.state_keys = np.zeros(capacity, dtype=np.int64)
        self.actions = np.zeros(capacity, dtype=np.int8)
        self.rewards = np.zeros(capacity, dtype=np.int8)
        self.terminals = np.zeros(capacity, dtype=bool)
        self.next_state_keys = np.zeros(capacity, dtype=np.int64)
        self.obs_ids = np.zeros(capacity, dtype=np.int64)
        self.next_obs_ids = np.zeros(capacity, dtype=np.int64)
        self._obs: list[np.ndarray | None] = [None] * capacity
        self._next_obs: list[np.ndarray | None] = [None] * capacity
        self.index = SAUniformIndex()

    def __len__(self) -> int:
        return min(self.insert_count, self.capacity)

    def push(self, t: Transition) -> None:
        slot = self.insert_count % self.capacity
        if self.insert_count >= self.capacity:
            old_key = sa_key(int(self.state_keys[slot]), int(self.actions[slot]))
            self.index.remove(old_key, slot)
        self.state_keys[slot] = t.state_key
        self.actions[slot] = t.action
        self.rewards[slot] = t.reward
        self.terminals[slot] = t.terminal
        self.next_state_keys[slot] = t.next_state_key
        self.obs_ids[slot] = t.obs_id
        self.next_obs_ids[slot] = t.next_obs_id
        self._obs[slot] = t.obs
        self._next_obs[slot] = t.next_obs
        self.index.add(sa_key(t.state_key, t.action), slot)
        self.insert_count += 1

    def transition(self, slot: int) -> Transition:
        return Transition(
            state_key=int(self.state_keys[slot]),
            obs=self._obs[slot],
            action=int(self.actions[slot]),
            reward=int(self.rewards[slot]),
            next_obs=self._next_obs[slot],
            terminal=bool(self.terminals[slot]),
            next_state_key=int(self.next_state_keys[slot]),
            obs_id=int(self.obs_ids[slot]),
            next_obs_id=int(self.next_obs_ids[slot]),
        )

    def draw_uniform_slots(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        if len(self) == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, len(self), size=batch)

    def draw_sa_uniform_slots(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        if len(self) == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self.index.draw_slots(batch, rng)

    def distinct_keys(self) -> int:
        return len(self.index)

    def key_census(self) -> dict[int, int]:
        """(state, action) key -> stored duplicate count, for diagnostics."""
        return {k: self.index.count(k) for k in self.index.keys()}


def push(buffer: FifoBuffer, transition: Transition) -> None:
    buffer.push(transition)


def sample_uniform(buffer: FifoBuffer, batch: int = 256, rng: np.random.Generator | None = None) -> list[Transition]:
    """I.i.d. uniform over stored transitions, with replacement."""
    rng = rng if rng is not None else np.random.default_rng()
    return [buffer.transition(int(s)) for s in buffer.draw_uniform_slots(batch, rng)]


def sample_sa_uniform(buffer: FifoBuffer, batch: int = 256, rng: np.random.Generator | None = None) -> list[Transition]:
    """Uniform over the (state, action) keys in the buffer, then a stored duplicate."""
    rng = rng if rng is not None else np.random.default_rng()
    return [buffer.transition(int(s)) for s in buffer.draw_sa_uniform_slots(batch, rng)]
