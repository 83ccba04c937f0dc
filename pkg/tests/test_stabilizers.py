"""Centering, divisive normalization, and gradient compensation."""

import numpy as np
import pytest

from snnlm import stabilizers
from snnlm.numcore import Tensor


class TestCenter:
    def test_simple(self):
        out = stabilizers.center(Tensor(np.array([[1.0, 2.0, 3.0]])))
        np.testing.assert_allclose(out.data, [[-1.0, 0.0, 1.0]], atol=1e-7)

    def test_constant_to_zero(self):
        out = stabilizers.center(Tensor(np.full((2, 4), 7.0)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-7)

    def test_channel_means_vanish(self, rng):
        x = rng.standard_normal((6, 3, 16)).astype(np.float32) * 5
        out = stabilizers.center(Tensor(x))
        means = out.data.mean(axis=-1, dtype=np.float64)
        assert np.abs(means).max() < 1e-6


class TestLateralInhibition:
    def test_three_four(self):
        out = stabilizers.lateral_inhibition(Tensor(np.array([[3.0, 4.0]])),
                                             Tensor(np.ones(2)))
        np.testing.assert_allclose(out.data, [[0.8485, 1.1314]], atol=1e-3)

    def test_zero_input(self):
        out = stabilizers.lateral_inhibition(Tensor(np.zeros((3, 4))),
                                             Tensor(np.ones(4)))
        np.testing.assert_array_equal(out.data, np.zeros((3, 4)))

    @pytest.mark.parametrize("scale", [0.1, 0.5, 2.0, 10.0])
    def test_scale_equivariance(self, scale, rng):
        # relative agreement on unit-RMS signals; deviations are pure
        # epsilon effects (eps / scale^2 against the mean square)
        h = rng.standard_normal((4, 8)).astype(np.float64)
        h /= np.sqrt((h * h).mean(-1, keepdims=True))
        gamma = Tensor(rng.uniform(0.5, 1.5, 8))
        base = stabilizers.lateral_inhibition(Tensor(h), gamma)
        scaled = stabilizers.lateral_inhibition(Tensor(h * scale), gamma)
        rel = np.abs(base.data - scaled.data) / \
            np.maximum(np.abs(base.data), 1e-3)
        assert rel.max() < 1e-4

    def test_gain_applies_per_channel(self, rng):
        h = rng.standard_normal((5, 3))
        gamma = np.array([1.0, 2.0, 0.5])
        out = stabilizers.lateral_inhibition(Tensor(h), Tensor(gamma))
        unit = stabilizers.lateral_inhibition(Tensor(h), Tensor(np.ones(3)))
        np.testing.assert_allclose(out.data, unit.data * gamma, atol=1e-6)

    def test_rmsnorm_is_same_kernel(self, rng):
        h = rng.standard_normal((4, 6))
        gamma = Tensor(rng.uniform(0.5, 1.5, 6))
        a = stabilizers.lateral_inhibition(Tensor(h), gamma)
        b = stabilizers.rmsnorm(Tensor(h), gamma)
        np.testing.assert_array_equal(a.data, b.data)


def _param(name, values, grad):
    t = Tensor(np.asarray(values, np.float32), name=name)
    t.grad = np.asarray(grad, np.float32).copy()
    return t


class TestCompensation:
    def test_phase1_beta_midpoint(self):
        # beta = 0.5: divisor max(0.25, 1/C) = 0.25 -> gradient x4
        logit = 0.0
        p = {"layers.0.block.b_beta": _param("b", [logit], [1.0])}
        stabilizers.compensate_gradients(p, stabilizers.CompensationConfig())
        assert p["layers.0.block.b_beta"].grad[0] == pytest.approx(4.0, rel=1e-6)

    def test_phase1_beta_clamped(self):
        # beta = 0.99: beta(1-beta) = 0.0099 < 1/100 -> gradient x100
        logit = float(np.log(0.99 / 0.01))
        p = {"layers.0.block.b_beta": _param("b", [logit], [1.0])}
        stabilizers.compensate_gradients(
            p, stabilizers.CompensationConfig(c_max=100.0))
        assert p["layers.0.block.b_beta"].grad[0] == pytest.approx(100.0,
                                                                   rel=1e-4)

    def test_phase1_alpha_floor(self):
        p = {"layers.0.block.b_alpha": _param("a", [-10.0, 10.0], [1.0, 1.0])}
        stabilizers.compensate_gradients(p, stabilizers.CompensationConfig())
        np.testing.assert_allclose(p["layers.0.block.b_alpha"].grad,
                                   [10.0, 1.0], rtol=1e-4)

    def test_phase1_preserves_sign(self, rng):
        g = rng.standard_normal(32)
        p = {"layers.0.block.b_beta": _param("b", rng.normal(0, 3, 32), g)}
        stabilizers.compensate_gradients(p, stabilizers.CompensationConfig())
        out = p["layers.0.block.b_beta"].grad
        assert np.all(np.sign(out) == np.sign(g))

    def test_phase2_geometric_mean(self):
        p = {
            "layers.0.block.b_th": _param("t0", [0.1, 0.1], [1.0, 0.0]),
            "layers.1.block.b_th": _param("t1", [0.1, 0.1], [4.0, 0.0]),
        }
        stabilizers.compensate_gradients(p, stabilizers.CompensationConfig())
        n0 = np.linalg.norm(p["layers.0.block.b_th"].grad)
        n1 = np.linalg.norm(p["layers.1.block.b_th"].grad)
        assert n0 == pytest.approx(2.0, rel=1e-6)
        assert n1 == pytest.approx(2.0, rel=1e-6)

    def test_phase2_norms_equalized(self, rng):
        p = {}
        for i in range(5):
            g = rng.standard_normal(16) * rng.uniform(0.1, 10)
            p[f"layers.{i}.block.b_beta"] = _param(f"b{i}",
                                                   rng.normal(0, 1, 16), g)
        pre = [np.linalg.norm(t.grad.astype(np.float64))
               for t in p.values()]
        stabilizers.compensate_gradients(p, stabilizers.CompensationConfig())
        post = np.array([np.linalg.norm(t.grad.astype(np.float64))
                         for t in p.values()])
        assert np.abs(post / post[0] - 1.0).max() < 1e-6

    def test_phase1_skips_b_th(self):
        # thresholds only participate in the cross-layer phase
        p = {"layers.0.block.b_th": _param("t", [5.0], [2.0])}
        stabilizers.compensate_gradients(p, stabilizers.CompensationConfig())
        assert p["layers.0.block.b_th"].grad[0] == pytest.approx(2.0)

    def test_tiny_norm_layer_skipped(self):
        p = {
            "layers.0.block.b_th": _param("t0", [0.1], [1e-14]),
            "layers.1.block.b_th": _param("t1", [0.1], [2.0]),
        }
        stabilizers.compensate_gradients(p, stabilizers.CompensationConfig())
        assert p["layers.0.block.b_th"].grad[0] == pytest.approx(1e-14)
        assert p["layers.1.block.b_th"].grad[0] == pytest.approx(2.0, rel=1e-6)

    def test_absent_grads_ignored(self):
        t = Tensor(np.zeros(3), name="layers.0.block.b_beta")
        stabilizers.compensate_gradients({"layers.0.block.b_beta": t},
                                         stabilizers.CompensationConfig())
        assert t.grad is None

    def test_invalid_cmax(self):
        with pytest.raises(ValueError):
            stabilizers.CompensationConfig(c_max=0.5)
