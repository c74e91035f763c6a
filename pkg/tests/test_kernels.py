import numpy as np
import pytest

from fourroom_lab import kernels
from fourroom_lab.kernels import numpy_backend as nb


def brute_force_forward(x, w, bias):
    B, C = x.shape[:2]
    O = w.shape[0]
    y = np.zeros((B, O, 9, 9), dtype=np.float64)
    for b in range(B):
        for o in range(O):
            acc = np.zeros((9, 9), dtype=np.float64)
            for c in range(C):
                for u in range(3):
                    for v in range(3):
                        acc += w[o, c, u, v] * np.roll(x[b, c], (1 - u, 1 - v), axis=(0, 1))
            y[b, o] = acc + (bias[o] if bias is not None else 0.0)
    return y


class TestNumpyBackendAgainstBruteForce:
    def test_forward(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 2, 9, 9))
        w = rng.standard_normal((4, 2, 3, 3))
        b = rng.standard_normal(4)
        assert np.allclose(nb.conv2d_circular_forward(x, w, b), brute_force_forward(x, w, b), atol=1e-12)

    def test_gradients_by_finite_differences(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 2, 9, 9))
        w = rng.standard_normal((3, 2, 3, 3)) * 0.3
        dy = rng.standard_normal((2, 3, 9, 9))
        dx = nb.conv2d_circular_input_grad(dy, w)
        dw, db = nb.conv2d_circular_weight_grad(x, dy)
        h = 1e-6

        def loss(xx, ww, bb):
            return float((nb.conv2d_circular_forward(xx, ww, bb) * dy).sum())

        b0 = np.zeros(3)
        for arr, grad, which in ((x, dx, "x"), (w, dw, "w"), (b0, db, "b")):
            flat = arr.reshape(-1)
            idx = np.random.default_rng(2).choice(flat.size, size=min(24, flat.size), replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                lp = loss(x, w, b0)
                flat[i] = orig - h
                lm = loss(x, w, b0)
                flat[i] = orig
                fd = (lp - lm) / (2 * h)
                assert abs(grad.reshape(-1)[i] - fd) < 1e-6, which


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled core not available")
class TestCompiledCoreParity:
    def cases(self):
        rng = np.random.default_rng(3)
        for C, O, density in ((4, 32, 0.15), (32, 32, 0.5), (32, 32, 1.0), (7, 5, 0.5)):
            x = rng.random((9, 81, C)).astype(np.float32)
            x[rng.random(x.shape) > density] = 0.0
            w = rng.standard_normal((O, C, 3, 3)).astype(np.float32)
            b = rng.standard_normal(O).astype(np.float32)
            dy = rng.standard_normal((9, 81, O)).astype(np.float32)
            yield x, w, b, dy

    def _numpy_cl_forward(self, x, w, b, relu=False):
        y = nb.conv2d_circular_forward(kernels._cl_to_cf(x), w, b)
        y = kernels._cf_to_cl(y)
        if relu:
            np.maximum(y, 0, out=y)
        return y

    def test_forward_parity(self):
        for x, w, b, _ in self.cases():
            got = kernels.convcl_forward(x, kernels.pack_weights(w), b)
            want = self._numpy_cl_forward(x, w, b)
            scale = max(np.abs(want).max(), 1.0)
            assert np.abs(got - want).max() / scale < 1e-5

    def test_forward_relu_parity(self):
        for x, w, b, _ in self.cases():
            got = kernels.convcl_forward(x, kernels.pack_weights(w), b, relu=True)
            want = self._numpy_cl_forward(x, w, b, relu=True)
            scale = max(np.abs(want).max(), 1.0)
            assert np.abs(got - want).max() / scale < 1e-5

    def test_input_grad_parity(self):
        for x, w, _, dy in self.cases():
            got = kernels.convcl_input_grad(dy, kernels.pack_weights(w))
            want = kernels._cf_to_cl(nb.conv2d_circular_input_grad(kernels._cl_to_cf(dy), w))
            scale = max(np.abs(want).max(), 1.0)
            assert np.abs(got - want).max() / scale < 1e-5

    def test_weight_grad_parity(self):
        for x, w, _, dy in self.cases():
            got_dw, got_db = kernels.convcl_weight_grad(x, dy)
            dw, db = nb.conv2d_circular_weight_grad(kernels._cl_to_cf(x), kernels._cl_to_cf(dy))
            want_dw = kernels.pack_weights(dw)
            scale = max(np.abs(want_dw).max(), 1.0)
            assert np.abs(got_dw - want_dw).max() / scale < 1e-5
            assert np.allclose(got_db, db, rtol=1e-5, atol=1e-4)

    def test_adamw_parity_with_numpy_path(self):
        rng = np.random.default_rng(4)
        n = 4_001
        p32 = rng.standard_normal(n).astype(np.float32)
        g = rng.standard_normal(n).astype(np.float32)
        m = np.zeros(n, dtype=np.float32)
        v = np.zeros(n, dtype=np.float32)
        p64 = p32.astype(np.float64)
        m64, v64 = np.zeros(n), np.zeros(n)
        for t in (1, 2, 3):
            kernels.adamw_update(p32, g, m, v, t, 1e-3, 0.9, 0.999, 1e-8, 1e-4)
            kernels.adamw_update(p64, g.astype(np.float64), m64, v64, t, 1e-3, 0.9, 0.999, 1e-8, 1e-4)
        assert np.allclose(p32, p64, atol=1e-6)

    def test_lerp_parity(self):
        rng = np.random.default_rng(5)
        t32 = rng.standard_normal(999).astype(np.float32)
        o = rng.standard_normal(999).astype(np.float32)
        t64 = t32.astype(np.float64)
        kernels.lerp_update(t32, o, 0.01)
        kernels.lerp_update(t64, o.astype(np.float64), 0.01)
        assert np.allclose(t32, t64, atol=1e-7)

    def test_generic_width_path(self):
        # O != 32 exercises the generic C loops
        rng = np.random.default_rng(6)
        x = rng.random((4, 81, 6)).astype(np.float32)
        w = rng.standard_normal((11, 6, 3, 3)).astype(np.float32)
        b = rng.standard_normal(11).astype(np.float32)
        got = kernels.convcl_forward(x, kernels.pack_weights(w), b)
        want = self._numpy_cl_forward(x, w, b)
        assert np.abs(got - want).max() < 1e-4
