import numpy as np
import pytest

from fourroom_lab import autodiff, kernels
from fourroom_lab.autodiff import (
    AdamState,
    Tensor,
    adamw_step,
    affine,
    backward,
    clip_global_norm,
    conv2d_circular,
    conv2d_circular_cl,
    flatten,
    gather_actions,
    load_tensors,
    mse_loss,
    parameter,
    relu,
    save_tensors,
)


class TestConvForward:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 3, 9, 9)))
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        y = conv2d_circular(x, Tensor(w), Tensor(np.zeros(3)))
        assert np.allclose(y.data, x.data, atol=1e-12)

    def test_all_ones_gives_9(self):
        x = Tensor(np.ones((1, 1, 9, 9)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        y = conv2d_circular(x, w, Tensor(np.zeros(1)))
        assert np.allclose(y.data, 9.0)

    def test_translation_equivariance_exact_fp64(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 4, 9, 9))
        w = Tensor(rng.standard_normal((8, 4, 3, 3)))
        b = Tensor(rng.standard_normal(8))
        y = conv2d_circular(Tensor(x), w, b).data
        for dy_, dx_ in [(1, 0), (0, 1), (3, 5), (8, 8)]:
            xs = np.roll(x, (dy_, dx_), axis=(2, 3))
            ys = conv2d_circular(Tensor(xs), w, b).data
            assert np.array_equal(ys, np.roll(y, (dy_, dx_), axis=(2, 3)))

    def test_translation_equivariance_fp32(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 4, 9, 9)).astype(np.float32)
        w = Tensor(rng.standard_normal((32, 4, 3, 3)).astype(np.float32))
        b = Tensor(np.zeros(32, dtype=np.float32))
        y = conv2d_circular(Tensor(x), w, b).data
        xs = np.roll(x, (2, 7), axis=(2, 3))
        ys = conv2d_circular(Tensor(xs), w, b).data
        assert np.allclose(ys, np.roll(y, (2, 7), axis=(2, 3)), atol=1e-6)

    def test_channel_last_matches_channel_first(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((5, 4, 9, 9)).astype(np.float32)
        w = Tensor(rng.standard_normal((32, 4, 3, 3)).astype(np.float32))
        b = Tensor(rng.standard_normal(32).astype(np.float32))
        y_cf = conv2d_circular(Tensor(x), w, b).data
        x_cl = np.ascontiguousarray(x.reshape(5, 4, 81).transpose(0, 2, 1))
        y_cl = conv2d_circular_cl(Tensor(x_cl), w, b).data
        assert np.allclose(y_cl.transpose(0, 2, 1).reshape(5, 32, 9, 9), y_cf, atol=1e-4)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            conv2d_circular(Tensor(np.zeros((1, 3, 9, 9))), Tensor(np.zeros((2, 4, 3, 3))), None)


class TestElementwiseOps:
    def test_relu_values_and_grads(self):
        x = parameter(np.array([-2.0, 0.0, 3.0]))
        y = relu(x)
        assert np.array_equal(y.data, [0.0, 0.0, 3.0])
        loss = mse_loss(y, np.zeros(3))
        backward(loss)
        # d(mean(y^2))/dx = 2/3 * y * relu'(x); relu' at 0 and negatives is 0
        assert np.allclose(x.grad, [0.0, 0.0, 2.0])

    def test_mse_zero_when_equal(self):
        pred = parameter(np.array([0.3, -1.2]))
        assert mse_loss(pred, pred.data.copy()).data == 0.0

    def test_affine_identity(self):
        x = Tensor(np.random.default_rng(4).standard_normal((3, 5)))
        y = affine(x, Tensor(np.eye(5)), Tensor(np.zeros(5)))
        assert np.allclose(y.data, x.data)

    def test_affine_rejects_mismatch(self):
        with pytest.raises(ValueError):
            affine(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 5))), Tensor(np.zeros(3)))


def tiny_net_params(rng, dtype=np.float64):
    """Small-but-complete architecture: conv(2ch) -> conv(3ch) -> fc -> fc(3)."""
    p = {
        "c1.w": parameter(rng.standard_normal((2, 4, 3, 3)).astype(dtype) * 0.4),
        "c1.b": parameter(rng.standard_normal(2).astype(dtype) * 0.1),
        "c2.w": parameter(rng.standard_normal((3, 2, 3, 3)).astype(dtype) * 0.4),
        "c2.b": parameter(rng.standard_normal(3).astype(dtype) * 0.1),
        "f1.w": parameter(rng.standard_normal((8, 243)).astype(dtype) * 0.1),
        "f1.b": parameter(rng.standard_normal(8).astype(dtype) * 0.1),
        "f2.w": parameter(rng.standard_normal((3, 8)).astype(dtype) * 0.3),
        "f2.b": parameter(rng.standard_normal(3).astype(dtype) * 0.1),
    }
    return p


def tiny_net_loss(p, x, rows, actions, targets):
    h = relu(conv2d_circular(Tensor(x), p["c1.w"], p["c1.b"]))
    h = relu(conv2d_circular(h, p["c2.w"], p["c2.b"]))
    h = relu(affine(flatten(h), p["f1.w"], p["f1.b"]))
    q = affine(h, p["f2.w"], p["f2.b"])
    return mse_loss(gather_actions(q, rows, actions), targets)


class TestBackward:
    def test_every_parameter_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x = (rng.random((6, 4, 9, 9)) < 0.3).astype(np.float64)
        rows = np.arange(6)
        actions = rng.integers(0, 3, 6)
        targets = rng.random(6)
        p = tiny_net_params(rng)

        loss = tiny_net_loss(p, x, rows, actions, targets)
        backward(loss)
        analytic = {k: t.grad.copy() for k, t in p.items()}

        h = 1e-5
        for name, t in p.items():
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                lp = tiny_net_loss(p, x, rows, actions, targets).data
                flat[i] = orig - h
                lm = tiny_net_loss(p, x, rows, actions, targets).data
                flat[i] = orig
                fd = (lp - lm) / (2 * h)
                a = analytic[name].reshape(-1)[i]
                denom = max(abs(a), abs(fd), 1e-8)
                assert abs(a - fd) / denom < 1e-4, f"{name}[{i}]: analytic {a}, fd {fd}"

    def test_untouched_parameter_gets_no_gradient(self):
        rng = np.random.default_rng(6)
        p = tiny_net_params(rng)
        x = rng.random((2, 4, 9, 9))
        # loss uses only action 0: fc2 rows 1 and 2 are untouched
        loss = tiny_net_loss(p, x, np.arange(2), np.zeros(2, dtype=int), np.zeros(2))
        backward(loss)
        assert np.array_equal(p["f2.w"].grad[1:], np.zeros((2, 8)))
        assert np.array_equal(p["f2.b"].grad[1:], np.zeros(2))

    def test_linear_function_constant_gradient(self):
        w = parameter(np.array([[2.0, -1.0]]))
        b = parameter(np.array([0.5]))
        grads = []
        for x in (np.array([[1.0, 2.0]]), np.array([[-3.0, 0.7]])):
            w.zero_grad()
            b.zero_grad()
            y = affine(Tensor(x), w, b)
            loss = mse_loss(gather_actions(y, np.array([0]), np.array([0])), np.zeros(1))
            # d loss/d b = 2*(wx+b); not constant. Use plain sum via gather on zero target and
            # linearity of d(pred)/dw checked through two points with same pred shape instead:
            backward(loss)
            grads.append(b.grad.copy() / (2 * (x @ w.data.T + b.data).ravel()))
        # derivative of pred wrt b is exactly 1 at any input point
        assert np.allclose(grads[0], grads[1])
        assert np.allclose(grads[0], 1.0)

    def test_frozen_parameter_receives_no_gradient(self):
        rng = np.random.default_rng(7)
        p = tiny_net_params(rng)
        p["c1.w"].requires_grad = False
        loss = tiny_net_loss(p, rng.random((2, 4, 9, 9)), np.arange(2), np.zeros(2, dtype=int), np.zeros(2))
        backward(loss)
        assert p["c1.w"].grad is None
        assert p["c2.w"].grad is not None

    def test_backward_twice_rejected(self):
        x = parameter(np.array([1.0, 2.0]))
        loss = mse_loss(x, np.zeros(2))
        backward(loss)
        with pytest.raises(RuntimeError):
            backward(loss)

    def test_backward_needs_scalar(self):
        x = parameter(np.ones(3))
        with pytest.raises(ValueError):
            backward(relu(x))


class TestClipGlobalNorm:
    def test_scales_down_to_max_norm(self):
        g1 = np.array([1.2, 0.0])
        g2 = np.array([1.6])  # joint norm 2.0
        norm = clip_global_norm([g1, g2], 1.0)
        assert norm == pytest.approx(2.0)
        assert np.allclose(g1, [0.6, 0.0])
        assert np.allclose(g2, [0.8])
        assert np.sqrt(sum((g**2).sum() for g in (g1, g2))) == pytest.approx(1.0)

    def test_small_norm_unchanged(self):
        g = np.array([0.3, 0.4])
        clip_global_norm([g], 1.0)
        assert np.allclose(g, [0.3, 0.4])

    def test_zero_gradients_no_division(self):
        g = np.zeros(4)
        assert clip_global_norm([g], 1.0) == 0.0
        assert np.array_equal(g, np.zeros(4))


class TestAdamW:
    def test_first_step_magnitude_is_lr(self):
        rng = np.random.default_rng(8)
        p = rng.standard_normal(64)
        g = rng.standard_normal(64)
        g[np.abs(g) < 1e-2] = 0.5  # keep gradients away from zero
        m, v = np.zeros(64), np.zeros(64)
        before = p.copy()
        adamw_step(p, g, m, v, t=1, lr=1e-4, weight_decay=0.0)
        step = np.abs(p - before)
        # first-step update is lr * g / (|g| + eps) ~= lr per coordinate
        assert np.all(step > 1e-4 * 0.99) and np.all(step < 1e-4 * 1.01)

    def test_zero_grad_no_decay_is_identity(self):
        p = np.array([0.5, -2.0])
        m, v = np.zeros(2), np.zeros(2)
        adamw_step(p, np.zeros(2), m, v, t=1, weight_decay=0.0)
        assert np.array_equal(p, [0.5, -2.0])

    def test_zero_grad_decay_shrinks(self):
        p0 = np.array([1.0, -3.0])
        p = p0.copy()
        m, v = np.zeros(2), np.zeros(2)
        adamw_step(p, np.zeros(2), m, v, t=1, lr=1e-4, weight_decay=1e-5)
        assert np.allclose(p, p0 * (1 - 1e-4 * 1e-5), rtol=1e-12)

    def test_state_skips_frozen_params(self):
        rng = np.random.default_rng(9)
        a = parameter(rng.standard_normal(4))
        b = parameter(rng.standard_normal(4))
        b.requires_grad = False
        state = AdamState({"a": a, "b": b}, lr=1e-2, weight_decay=1e-2)
        assert set(state.moments) == {"a"}
        a.grad = np.ones(4)
        before_b = b.data.copy()
        state.step({"a": a, "b": b})
        assert np.array_equal(b.data, before_b)
        assert not np.array_equal(a.data, rng.standard_normal(4))


class TestCheckpointFormat:
    def test_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(10)
        tensors = {
            "w": rng.standard_normal((3, 4)).astype(np.float32),
            "b": rng.standard_normal(7).astype(np.float64),
        }
        path = tmp_path / "ckpt.bin"
        save_tensors(path, tensors, {"variant": "small"})
        loaded, meta = load_tensors(path)
        assert meta == {"variant": "small"}
        for k in tensors:
            assert loaded[k].dtype == tensors[k].dtype
            assert np.array_equal(loaded[k], tensors[k])

    def test_deterministic_bytes(self, tmp_path):
        t = {"x": np.arange(6, dtype=np.float32).reshape(2, 3)}
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_tensors(p1, t, {"s": 1})
        save_tensors(p2, t, {"s": 1})
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_garbage(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            load_tensors(p)
