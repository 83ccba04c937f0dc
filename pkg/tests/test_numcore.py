"""Substrate tests: primitives, tape mechanics, and the scalar oracle."""

import numpy as np
import pytest

from snnlm import numcore as nc
from snnlm.numcore import Tensor, oracle

from conftest import rel_err


def tape_grads(build, params):
    """Run ``build`` under a tape and return (loss value, grads dict)."""
    tensors = {k: Tensor(v) for k, v in params.items()}
    with nc.Tape() as tape:
        loss = build(tensors)
        tape.backward(loss)
    return loss.item(), {k: t.grad for k, t in tensors.items()}


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        m = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        out = nc.matmul(eye, m)
        np.testing.assert_array_equal(out.data, m.data)

    def test_scalar_product(self):
        out = nc.matmul(Tensor(np.array([[2.0]])), Tensor(np.array([[3.0]])))
        assert out.item() == 6.0

    def test_shape_mismatch(self):
        with pytest.raises(nc.DimensionError):
            nc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_backward_matches_scalar_oracle(self, rng):
        a = rng.standard_normal((4, 5))
        b = rng.standard_normal((5, 3))
        w = rng.standard_normal((4, 3))

        def build(t):
            return nc.sum_all(nc.mul(nc.matmul(t["a"], t["b"]), w))

        _, grads = tape_grads(build, {"a": a, "b": b})

        def ref(p):
            total = oracle.Value(0.0)
            for i in range(4):
                for j in range(3):
                    acc = oracle.Value(0.0)
                    for k in range(5):
                        acc = acc + p["a"][i, k] * p["b"][k, j]
                    total = total + acc * float(w[i, j])
            return total

        expected = oracle.oracle_grad(ref, {"a": a, "b": b})
        assert rel_err(grads["a"], expected["a"]) < 1e-6
        assert rel_err(grads["b"], expected["b"]) < 1e-6


class TestPointwise:
    def test_sigmoid_at_zero(self):
        assert nc.sigmoid(Tensor(np.array(0.0))).item() == 0.5

    def test_softplus_near_one(self):
        # softplus(0.5413) = log(1 + e^0.5413) ~ 1.0
        assert abs(nc.softplus(Tensor(np.array(0.5413))).item() - 1.0) < 1e-3

    def test_abs(self):
        assert nc.absval(Tensor(np.array(-2.5))).item() == 2.5

    def test_log_domain(self):
        with pytest.raises(nc.DomainError):
            nc.log(Tensor(np.array([0.0])))

    def test_div_domain(self):
        with pytest.raises(nc.DomainError):
            nc.div(Tensor(np.array([1.0])), Tensor(np.array([0.0])))

    def test_sqrt_domain(self):
        with pytest.raises(nc.DomainError):
            nc.sqrt(Tensor(np.array([-1.0])))

    def test_nonfinite_forward_raises(self):
        big = Tensor(np.array([1000.0], dtype=np.float32))
        with pytest.raises(nc.NumericError):
            nc.exp(big)

    def test_scalar_operands(self):
        x = Tensor(np.array([1.0, 2.0]))
        np.testing.assert_allclose((1.0 - x).data, [0.0, -1.0])
        np.testing.assert_allclose((x * 2.0).data, [2.0, 4.0])


class TestBroadcasting:
    def test_bias_add_grad_sums_rows(self, rng):
        x = rng.standard_normal((5, 3))
        b = rng.standard_normal(3)

        def build(t):
            return nc.sum_all(nc.add(t["x"], t["b"]))

        _, grads = tape_grads(build, {"x": x, "b": b})
        np.testing.assert_allclose(grads["b"], np.full(3, 5.0))

    def test_keepdims_scale(self, rng):
        x = rng.standard_normal((4, 6))

        def build(t):
            m = nc.mean_along(t["x"], axis=-1, keepdims=True)
            return nc.sum_all(nc.mul(t["x"], m))

        val, grads = tape_grads(build, {"x": x})
        fd = oracle.finite_difference_grad(
            lambda p: float((p["x"] * p["x"].mean(-1, keepdims=True)).sum()),
            {"x": x})
        assert rel_err(grads["x"], fd["x"]) < 1e-6

    def test_incompatible_shapes(self):
        with pytest.raises(nc.DimensionError):
            nc.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


UNARY_CASES = {
    "sigmoid": (nc.sigmoid, lambda x: 1 / (1 + np.exp(-x)), (-3, 3)),
    "softplus": (nc.softplus, lambda x: np.log1p(np.exp(x)), (-3, 3)),
    "exp": (nc.exp, np.exp, (-2, 2)),
    "log": (nc.log, np.log, (0.5, 4.0)),
    "sqrt": (nc.sqrt, np.sqrt, (0.5, 4.0)),
    "abs": (nc.absval, np.abs, (0.3, 2.0)),  # away from the kink
}


@pytest.mark.parametrize("name", sorted(UNARY_CASES))
def test_unary_finite_difference(name, rng):
    """Central differences (64-bit, step 1e-3) match tape gradients <= 1e-4."""
    op, ref, (lo, hi) = UNARY_CASES[name]
    x = rng.uniform(lo, hi, (4, 5))
    w = rng.standard_normal((4, 5))

    def build(t):
        return nc.sum_all(nc.mul(op(t["x"]), w))

    _, grads = tape_grads(build, {"x": x})
    fd = oracle.finite_difference_grad(
        lambda p: float((ref(p["x"]) * w).sum()), {"x": x}, step=1e-3)
    assert rel_err(grads["x"], fd["x"]) < 1e-4


@pytest.mark.parametrize("opname", ["add", "sub", "mul", "div"])
def test_binary_finite_difference(opname, rng):
    op = getattr(nc, opname)
    npop = {"add": np.add, "sub": np.subtract,
            "mul": np.multiply, "div": np.divide}[opname]
    a = rng.uniform(0.5, 2.0, (3, 4))
    b = rng.uniform(0.5, 2.0, (3, 4))
    w = rng.standard_normal((3, 4))

    def build(t):
        return nc.sum_all(nc.mul(op(t["a"], t["b"]), w))

    _, grads = tape_grads(build, {"a": a, "b": b})
    fd = oracle.finite_difference_grad(
        lambda p: float((npop(p["a"], p["b"]) * w).sum()), {"a": a, "b": b},
        step=1e-3)
    assert rel_err(grads["a"], fd["a"]) < 1e-4
    assert rel_err(grads["b"], fd["b"]) < 1e-4


def test_structural_ops_finite_difference(rng):
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((2, 12))

    def build(t):
        r = nc.reshape(t["x"], (12,))
        b = nc.broadcast_to(r, (2, 12))
        c = nc.cumsum_exclusive(b, axis=1)
        return nc.sum_all(nc.mul(c, w))

    def ref(p):
        r = p["x"].reshape(12)
        b = np.broadcast_to(r, (2, 12))
        c = np.cumsum(b, axis=1) - b
        return float((c * w).sum())

    _, grads = tape_grads(build, {"x": x})
    fd = oracle.finite_difference_grad(ref, {"x": x}, step=1e-3)
    assert rel_err(grads["x"], fd["x"]) < 1e-4


def test_transpose_backward(rng):
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 3))

    def build(t):
        return nc.sum_all(nc.mul(nc.transpose(t["x"]), w))

    _, grads = tape_grads(build, {"x": x})
    np.testing.assert_allclose(grads["x"], w.T)


class TestReductions:
    def test_sum_and_mean_values(self, rng):
        x = rng.standard_normal((3, 5))
        assert abs(nc.sum_all(Tensor(x)).item() - x.sum()) < 1e-6
        out = nc.mean_along(Tensor(x), axis=0)
        np.testing.assert_allclose(out.data, x.mean(0), atol=1e-7)

    def test_mean_backward(self, rng):
        x = rng.standard_normal((4, 3))

        def build(t):
            return nc.sum_all(nc.mean_along(t["x"], axis=-1))

        _, grads = tape_grads(build, {"x": x})
        np.testing.assert_allclose(grads["x"], np.full((4, 3), 1 / 3), atol=1e-7)


class TestEmbedding:
    def test_repeated_ids_accumulate(self, rng):
        table = rng.standard_normal((6, 4))
        ids = np.array([2, 2, 5])

        def build(t):
            return nc.sum_all(nc.embedding_lookup(t["table"], ids))

        _, grads = tape_grads(build, {"table": table})
        expected = np.zeros((6, 4))
        expected[2] = 2.0
        expected[5] = 1.0
        np.testing.assert_allclose(grads["table"], expected)

    def test_out_of_range(self):
        with pytest.raises(nc.DomainError):
            nc.embedding_lookup(Tensor(np.zeros((4, 2))), np.array([4]))


class TestCrossEntropy:
    def test_matches_manual_logsoftmax(self, rng):
        logits = rng.standard_normal((5, 7))
        targets = rng.integers(0, 7, 5)
        out = nc.cross_entropy_logits(Tensor(logits), targets)
        z = logits - logits.max(1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(1, keepdims=True))
        manual = -logp[np.arange(5), targets].mean()
        assert abs(out.item() - manual) < 1e-6

    def test_mask_excludes_rows(self, rng):
        logits = rng.standard_normal((4, 5))
        targets = np.array([0, 1, 2, 3])
        mask = np.array([1.0, 0.0, 1.0, 0.0])
        masked = nc.cross_entropy_logits(Tensor(logits), targets, mask)
        kept = nc.cross_entropy_logits(Tensor(logits[[0, 2]]), targets[[0, 2]])
        assert abs(masked.item() - kept.item()) < 1e-6

    def test_mask_blocks_gradient(self, rng):
        logits = rng.standard_normal((3, 4))
        targets = np.array([0, 1, 2])
        mask = np.array([1.0, 0.0, 1.0])

        def build(t):
            return nc.cross_entropy_logits(t["logits"], targets, mask)

        _, grads = tape_grads(build, {"logits": logits})
        np.testing.assert_array_equal(grads["logits"][1], np.zeros(4))

    def test_backward_finite_difference(self, rng):
        logits = rng.standard_normal((4, 6))
        targets = rng.integers(0, 6, 4)

        def build(t):
            return nc.cross_entropy_logits(t["logits"], targets)

        def ref(p):
            z = p["logits"] - p["logits"].max(1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(1, keepdims=True))
            return float(-logp[np.arange(4), targets].mean())

        _, grads = tape_grads(build, {"logits": logits})
        fd = oracle.finite_difference_grad(ref, {"logits": logits}, step=1e-3)
        assert rel_err(grads["logits"], fd["logits"]) < 1e-4


class TestTape:
    def test_replay_bit_identical(self, rng):
        x = Tensor(rng.standard_normal((8, 8)))
        y = Tensor(rng.standard_normal((8, 8)))
        with nc.Tape() as tape:
            loss = nc.mean_all(nc.mul(nc.sigmoid(nc.matmul(x, y)), x))
            tape.backward(loss)
            g1x, g1y = x.grad.copy(), y.grad.copy()
            tape.backward(loss)
        assert np.array_equal(g1x, x.grad)
        assert np.array_equal(g1y, y.grad)

    def test_no_tape_no_recording(self, rng):
        x = Tensor(rng.standard_normal((3, 3)))
        out = nc.sigmoid(x)  # outside any tape
        assert out.grad is None
        with nc.Tape() as tape:
            assert len(tape) == 0

    def test_backward_requires_scalar(self):
        with nc.Tape() as tape:
            x = Tensor(np.zeros((2, 2)))
            y = nc.sigmoid(x)
            with pytest.raises(nc.DimensionError):
                tape.backward(y)

    def test_gradients_keyed_by_name(self, rng):
        x = Tensor(rng.standard_normal(4), name="p.x")
        with nc.Tape() as tape:
            loss = nc.sum_all(nc.mul(x, x))
            tape.backward(loss)
        assert x.name == "p.x" and x.grad is not None


class TestScalarOracle:
    def test_square_gradient(self):
        g = oracle.oracle_grad(lambda p: p["x"][0] * p["x"][0],
                               {"x": np.array([3.0])})
        assert abs(g["x"][0] - 6.0) < 1e-12

    def test_sigmoid_gradient(self):
        g = oracle.oracle_grad(lambda p: p["x"][0].sigmoid(),
                               {"x": np.array([0.0])})
        assert abs(g["x"][0] - 0.25) < 1e-12

    def test_spike_surrogate_rule(self):
        # hard spike value with sigmoid-surrogate derivative, sharpness 4
        v = oracle.Value(0.3)
        s = v.spike()
        s.backward()
        sig = 1 / (1 + np.exp(-4 * 0.3))
        assert s.v == 1.0
        assert abs(v.grad - 4 * sig * (1 - sig)) < 1e-12

    def test_visits_each_node_once(self):
        x = oracle.Value(2.0)
        y = x * x
        z = y + y  # diamond: y reached twice, visited once
        z.backward()
        assert abs(x.grad - 8.0) < 1e-12
