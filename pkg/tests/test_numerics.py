from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condloc import numerics as nx
from condloc.errors import GraphError, NonFiniteError, ShapeError

from conftest import check_grad, rel_err

SEEDS = range(20)


def conv(x, w, b, stride=1):
    g = nx.Graph()
    return nx.conv_block_forward(g.constant(np.asarray(x, float)), g.constant(np.asarray(w, float)),
                                 g.constant(np.asarray(b, float)), stride).data


def naive_conv(x, w, b, stride):
    """Direct loop oracle: zero pad, correlate, add bias, ReLU."""
    h, wd, _ = x.shape
    cout, cin, k, _ = w.shape
    pad = (k - 1) // 2
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    oh, ow = -(-h // stride), -(-wd // stride)
    out = np.zeros((oh, ow, cout))
    for i in range(oh):
        for j in range(ow):
            patch = xp[i * stride : i * stride + k, j * stride : j * stride + k, :]
            for o in range(cout):
                out[i, j, o] = np.sum(patch * w[o].transpose(1, 2, 0)) + b[o]
    return np.maximum(out, 0.0)


class TestConvBlock:
    def test_identity_kernel(self):
        assert conv([[[2.0]]], np.ones((1, 1, 1, 1)), [0.0]).tolist() == [[[2.0]]]

    def test_negative_weight_clamped(self):
        assert conv([[[2.0]]], -np.ones((1, 1, 1, 1)), [0.0]).tolist() == [[[0.0]]]

    def test_all_ones_three_by_three(self):
        out = conv(np.ones((2, 2, 1)), np.ones((1, 1, 3, 3)), [0.0])
        np.testing.assert_array_equal(out[..., 0], [[4.0, 4.0], [4.0, 4.0]])

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_loop_oracle(self, seed, stride):
        r = np.random.default_rng(seed)
        x = r.random((7, 5, 3))
        w = r.normal(size=(4, 3, 3, 3))
        b = r.normal(size=4)
        np.testing.assert_allclose(conv(x, w, b, stride), naive_conv(x, w, b, stride), atol=1e-12)

    @pytest.mark.parametrize("h,w,stride", [(5, 5, 2), (6, 7, 2), (9, 4, 1)])
    def test_output_size_is_ceil(self, h, w, stride):
        out = conv(np.ones((h, w, 2)), np.ones((3, 2, 3, 3)), np.zeros(3), stride)
        assert out.shape == (-(-h // stride), -(-w // stride), 3)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv(np.ones((4, 4, 2)), np.ones((1, 3, 3, 3)), [0.0])

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            conv(np.ones((4, 4, 1)), np.ones((1, 1, 2, 2)), [0.0])

    def test_bad_stride(self):
        with pytest.raises(ShapeError):
            conv(np.ones((4, 4, 1)), np.ones((1, 1, 1, 1)), [0.0], stride=3)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31 - 1))
    def test_identity_on_non_negative(self, h, w, c, seed):
        x = np.random.default_rng(seed).random((h, w, c))
        np.testing.assert_array_equal(conv(x, np.eye(c)[:, :, None, None], np.zeros(c)), x)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_finite_on_unit_inputs(self, seed):
        r = np.random.default_rng(seed)
        out = conv(r.random((6, 6, 3)), r.normal(size=(4, 3, 3, 3)), r.normal(size=4), 2)
        assert np.isfinite(out).all()


class TestBackward:
    def test_square_at_three(self):
        g = nx.Graph()
        x = g.leaf(np.array(3.0), "x")
        assert nx.backward(g, nx.square(x))["x"] == pytest.approx(6.0)

    def test_constant_function(self):
        g = nx.Graph()
        x = g.leaf(np.array([1.0, 2.0]), "x")
        c = g.constant(np.array(5.0))
        grads = nx.backward(g, nx.total(c * c))
        np.testing.assert_array_equal(grads["x"], 0.0)

    def test_backward_before_forward(self):
        g = nx.Graph()
        with pytest.raises(GraphError):
            nx.backward(g, None)

    def test_foreign_graph(self):
        g1, g2 = nx.Graph(), nx.Graph()
        y = nx.square(g1.leaf(np.array(2.0), "x"))
        g2.leaf(np.array(1.0), "z")
        with pytest.raises(GraphError):
            nx.backward(g2, y)

    def test_non_scalar_loss(self):
        g = nx.Graph()
        y = nx.square(g.leaf(np.ones(3), "x"))
        with pytest.raises(GraphError):
            nx.backward(g, y)

    def test_shared_subexpression_accumulates(self):
        g = nx.Graph()
        x = g.leaf(np.array(2.0), "x")
        y = x * x + x
        assert nx.backward(g, y)["x"] == pytest.approx(5.0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_forward_detected(self):
        g = nx.Graph()
        x = g.leaf(np.array([1e200]), "x")
        with pytest.raises(NonFiniteError):
            nx.square(x)
        with pytest.raises(NonFiniteError):
            g.leaf(np.array([np.nan]), "y")


class TestGradients:
    """Every differentiable op against central differences, 64-bit."""

    @pytest.mark.parametrize("seed", SEEDS)
    def test_elementwise_ops(self, seed):
        r = np.random.default_rng(seed)
        x = r.normal(size=(3, 4))
        c = r.normal(size=(4,))
        assert check_grad(lambda g, t: nx.total(nx.square(t) * g.constant(c)), x) < 1e-4
        assert check_grad(lambda g, t: nx.total(nx.sqrt(nx.square(t) + 0.5)), x) < 1e-4
        assert check_grad(lambda g, t: nx.total(nx.square(nx.relu(t - 0.1))), x) < 1e-4
        assert check_grad(lambda g, t: nx.total(nx.square(t - g.constant(c)) + t), x) < 1e-4
        assert check_grad(lambda g, t: nx.total(nx.total(t, axis=1) * nx.total(t, axis=1)), x) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_take_and_concat(self, seed):
        r = np.random.default_rng(seed)
        x = r.normal(size=(5, 3))
        w = r.normal(size=(8, 3))
        rows = r.integers(0, 5, size=4)

        def build(g, t):
            joined = nx.concat([nx.take(t, rows), t[1:3], nx.take(t, slice(0, 2))])
            return nx.total(joined * g.constant(w))

        assert check_grad(build, x) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("stride", [1, 2])
    def test_conv_block(self, seed, stride):
        r = np.random.default_rng(seed)
        x = r.random((2, 5, 6, 3))
        w = r.normal(size=(4, 3, 3, 3))
        b = r.normal(size=4) * 0.1
        probe = r.normal(size=(2, -(-5 // stride), -(-6 // stride), 4))

        def make(which):
            def build(g, t):
                args = {"x": g.constant(x), "w": g.constant(w), "b": g.constant(b)}
                args[which] = t
                return nx.total(nx.conv_block_forward(args["x"], args["w"], args["b"], stride) * g.constant(probe))
            return build

        assert check_grad(make("w"), w) < 1e-4
        assert check_grad(make("b"), b) < 1e-4
        assert check_grad(make("x"), x) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gem_and_l2(self, seed):
        r = np.random.default_rng(seed)
        x = r.random((2, 3, 4, 5)) + 0.05
        probe = r.normal(size=(2, 5))
        assert check_grad(lambda g, t: nx.total(nx.gem(t, 3.0) * g.constant(probe)), x) < 1e-4
        y = r.normal(size=(2, 5))
        assert check_grad(lambda g, t: nx.total(nx.l2_normalize(t) * g.constant(probe)), y) < 1e-4

    def test_gem_two_by_two_absolute(self):
        x = np.array([[[0.2], [0.7]], [[0.4], [0.9]]])
        g = nx.Graph()
        grad = nx.backward(g, nx.total(nx.gem(g.leaf(x, "x"), 3.0)))["x"]
        fd = nx.finite_diff_gradient(lambda v: nx.gem(nx.Graph().constant(v), 3.0).data.sum(), x, 1e-5)
        assert np.max(np.abs(grad - fd)) < 1e-6


class TestFiniteDifference:
    @pytest.mark.parametrize("h", [1e-1, 1e-3, 0.5])
    def test_exact_on_quadratic(self, h):
        assert nx.finite_diff_gradient(lambda v: v[0] ** 2, np.array([3.0]), h)[0] == pytest.approx(6.0, abs=1e-9)

    def test_constant(self):
        np.testing.assert_array_equal(nx.finite_diff_gradient(lambda v: 7.0, np.ones(3)), 0.0)

    def test_non_scalar_rejected(self):
        with pytest.raises(ShapeError):
            nx.finite_diff_gradient(lambda v: v, np.ones(2))

    def test_bad_step(self):
        with pytest.raises(ValueError):
            nx.finite_diff_gradient(lambda v: 0.0, np.ones(2), h=0.0)


class TestOptimizer:
    def test_gradient_descent_step(self):
        state = nx.OptimizerState(lr=0.1, mode="sgd")
        new, _ = nx.optimizer_step({"p": np.array(1.0)}, {"p": np.array(0.5)}, state)
        assert float(new["p"]) == pytest.approx(0.95)

    @pytest.mark.parametrize("mode", ["sgd", "adam"])
    def test_zero_gradient_keeps_params(self, mode):
        p = {"w": np.array([0.3, -1.2])}
        new, _ = nx.optimizer_step(p, {"w": np.zeros(2)}, nx.OptimizerState(mode=mode))
        np.testing.assert_array_equal(new["w"], p["w"])

    def test_deterministic(self):
        p, g = {"w": np.array([0.3, -1.2])}, {"w": np.array([0.1, 0.2])}
        a, sa = nx.optimizer_step(p, g, nx.OptimizerState())
        b, sb = nx.optimizer_step(p, g, nx.OptimizerState())
        np.testing.assert_array_equal(a["w"], b["w"])
        np.testing.assert_array_equal(sa.m["w"], sb.m["w"])

    def test_first_adam_step_has_size_lr(self):
        new, state = nx.optimizer_step({"w": np.array([1.0])}, {"w": np.array([4.0])}, nx.OptimizerState(lr=0.01))
        assert float(new["w"][0]) == pytest.approx(0.99, abs=1e-6)
        assert state.step == 1

    def test_step_counter_increases(self):
        state = nx.OptimizerState()
        steps = []
        for _ in range(3):
            _, state = nx.optimizer_step({"w": np.ones(1)}, {"w": np.ones(1)}, state)
            steps.append(state.step)
        assert steps == [1, 2, 3]

    def test_nan_gradient_names_parameter(self):
        with pytest.raises(NonFiniteError, match="theta0.block0.weight"):
            nx.optimizer_step({"theta0.block0.weight": np.ones(2)}, {"theta0.block0.weight": np.array([1.0, np.nan])},
                              nx.OptimizerState())

    def test_preserves_dtype(self):
        new, _ = nx.optimizer_step({"w": np.ones(2, np.float32)}, {"w": np.ones(2, np.float32)}, nx.OptimizerState())
        assert new["w"].dtype == np.float32

    def test_rel_err_helper(self):
        assert rel_err([1.0, 2.0], [1.0, 2.0]) == 0.0
