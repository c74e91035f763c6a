import numpy as np
import pytest

from fourroom_lab import autodiff, gridworld, qnet
from fourroom_lab.autodiff import AdamState, Tensor, backward, mse_loss, gather_actions
from fourroom_lab.qnet import (
    NetworkConfig,
    build_network,
    load_checkpoint,
    obs_to_cl,
    q_forward,
    q_forward_train,
    save_checkpoint,
    soft_update,
)


def random_obs_batch(rng, n):
    obs = []
    while len(obs) < n:
        tid = int(rng.integers(81))
        cells = gridworld.free_cells(tid)
        goal = cells[rng.integers(40)]
        pos = cells[rng.integers(40)]
        if pos == goal:
            continue
        task = gridworld.Task(tid, goal, pos, int(rng.integers(4)))
        obs.append(gridworld.observe(gridworld.reset(task)))
    return np.stack(obs)


class TestBuildNetwork:
    def test_large_parameter_count(self):
        pset = build_network(NetworkConfig("large"), np.random.default_rng(0))
        assert pset.n_params() == 1_421_411

    def test_small_conv_trunk_matches_large(self):
        small = build_network(NetworkConfig("small"), np.random.default_rng(0))
        large = build_network(NetworkConfig("large"), np.random.default_rng(1))
        for name in ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b"):
            assert small.params[name].data.shape == large.params[name].data.shape

    def test_probe_trainable_counts(self):
        probe_a = build_network(NetworkConfig("probe_a"), np.random.default_rng(0))
        assert probe_a.n_trainable() == 1_539
        probe_b = build_network(NetworkConfig("probe_b"), np.random.default_rng(0))
        assert probe_b.n_trainable() == 1_329_155

    def test_deterministic_given_seed(self):
        a = build_network(NetworkConfig("small"), np.random.default_rng(7))
        b = build_network(NetworkConfig("small"), np.random.default_rng(7))
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data)

    def test_init_respects_fan_in_bound(self):
        pset = build_network(NetworkConfig("small"), np.random.default_rng(3))
        w = pset.params["fc1.w"].data
        assert np.abs(w).max() <= 1 / np.sqrt(2592)
        assert np.abs(pset.params["conv2.w"].data).max() <= 1 / np.sqrt(32 * 9)


class TestForward:
    def test_output_shape(self):
        rng = np.random.default_rng(1)
        pset = build_network(NetworkConfig("small"), rng)
        obs = random_obs_batch(rng, 5)
        assert q_forward(pset, obs).shape == (5, 3)

    def test_identical_observations_identical_rows(self):
        rng = np.random.default_rng(2)
        pset = build_network(NetworkConfig("large"), rng)
        obs = random_obs_batch(rng, 1)
        batch = np.repeat(obs, 4, axis=0)
        q = q_forward(pset, batch)
        assert np.array_equal(q, np.repeat(q[:1], 4, axis=0))

    def test_zero_final_layer_gives_zero(self):
        rng = np.random.default_rng(3)
        pset = build_network(NetworkConfig("small"), rng)
        pset.params["fc2.w"].data[:] = 0
        pset.params["fc2.b"].data[:] = 0
        q = q_forward(pset, random_obs_batch(rng, 3))
        assert np.array_equal(q, np.zeros((3, 3)))

    def test_train_forward_matches_inference(self):
        rng = np.random.default_rng(4)
        for variant in ("small", "large"):
            pset = build_network(NetworkConfig(variant), rng)
            obs = random_obs_batch(rng, 6)
            q_inf = q_forward(pset, obs)
            x = Tensor(obs_to_cl(obs, np.float32))
            q_tr = q_forward_train(pset, x)
            assert np.allclose(q_inf, q_tr.data, atol=1e-5)

    def test_bad_shape_rejected(self):
        pset = build_network(NetworkConfig("small"), np.random.default_rng(0))
        with pytest.raises(ValueError):
            q_forward(pset, np.zeros((2, 3, 9, 9)))


class TestSoftUpdate:
    def _pair(self):
        online = build_network(NetworkConfig("small"), np.random.default_rng(5))
        target = build_network(NetworkConfig("small"), np.random.default_rng(6))
        return online, target

    def test_tau_1_copies(self):
        online, target = self._pair()
        soft_update(target, online, tau=1.0)
        for name in online.params:
            assert np.array_equal(target.params[name].data, online.params[name].data)

    def test_tau_0_no_change(self):
        online, target = self._pair()
        before = {k: t.data.copy() for k, t in target.params.items()}
        soft_update(target, online, tau=0.0)
        for name in before:
            assert np.array_equal(target.params[name].data, before[name])

    def test_tau_001_twice(self):
        cfg = NetworkConfig("small")
        online = build_network(cfg, np.random.default_rng(7))
        target = build_network(cfg, np.random.default_rng(8))
        for t in target.params.values():
            t.data[:] = 0.0
        for t in online.params.values():
            t.data[:] = 1.0
        soft_update(target, online, tau=0.01)
        soft_update(target, online, tau=0.01)
        expected = 1 - 0.99**2
        for t in target.params.values():
            assert np.allclose(t.data, expected, atol=1e-7)

    def test_variant_mismatch_rejected(self):
        online = build_network(NetworkConfig("small"), np.random.default_rng(0))
        target = build_network(NetworkConfig("large"), np.random.default_rng(0))
        with pytest.raises(ValueError):
            soft_update(target, online)


class TestFreezing:
    def test_frozen_layers_bit_identical_after_training(self):
        rng = np.random.default_rng(9)
        pset = build_network(NetworkConfig("probe_a"), rng)
        frozen_before = {
            name: t.data.copy()
            for name, t in pset.params.items()
            if name.split(".")[0] in pset.frozen
        }
        opt = AdamState(pset.params, lr=1e-2, weight_decay=1e-2)
        obs = random_obs_batch(rng, 8)
        for _ in range(5):
            pset.zero_grads()
            q = q_forward_train(pset, Tensor(obs_to_cl(obs, np.float32)))
            loss = mse_loss(
                gather_actions(q, np.arange(8), rng.integers(0, 3, 8)),
                rng.random(8).astype(np.float32),
            )
            backward(loss)
            opt.step(pset.params)
        for name, before in frozen_before.items():
            assert before.tobytes() == pset.params[name].data.tobytes()
        assert not np.array_equal(pset.params["fc2.w"].data, np.zeros_like(pset.params["fc2.w"].data))

    def test_frozen_prefix_len(self):
        assert qnet.frozen_prefix_len(build_network(NetworkConfig("probe_a"), np.random.default_rng(0))) == 4
        assert qnet.frozen_prefix_len(build_network(NetworkConfig("probe_b"), np.random.default_rng(0))) == 3
        assert qnet.frozen_prefix_len(build_network(NetworkConfig("small"), np.random.default_rng(0))) == 0


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(10)
        pset = build_network(NetworkConfig("probe_b"), rng)
        path = tmp_path / "net.bin"
        save_checkpoint(pset, path)
        loaded = load_checkpoint(path)
        assert loaded.config == pset.config
        assert loaded.frozen == pset.frozen
        for name in pset.params:
            assert np.array_equal(loaded.params[name].data, pset.params[name].data)
            assert loaded.params[name].requires_grad == pset.params[name].requires_grad

    def test_trunk_loads_into_probe_variant(self, tmp_path):
        rng = np.random.default_rng(11)
        small = build_network(NetworkConfig("small"), rng)
        path = tmp_path / "small.bin"
        save_checkpoint(small, path)
        src = load_checkpoint(path)
        probe = build_network(NetworkConfig("probe_a"), rng)
        for name in ("conv1", "conv2", "conv3", "fc1"):
            for suffix in (".w", ".b"):
                probe.params[name + suffix].data[:] = src.params[name + suffix].data
        obs = random_obs_batch(rng, 4)
        # trunk now identical: features after fc1 must match the source net
        x = obs_to_cl(obs, np.float32)
        f_small = qnet.features_cl(src, x.copy(), upto=3)
        f_probe = qnet.features_cl(probe, x.copy(), upto=3)
        assert np.array_equal(f_small, f_probe)
