"""Engine primitives: forward rules, shape rules, analytic gradients, graph
execution contracts."""

import numpy as np
import pytest

from auxcnn.engine import (
    Graph,
    OpSpec,
    ParameterStore,
    backward_op,
    conv_out_size,
    deconv_out_size,
    forward_op,
    grad_check,
)
from auxcnn.errors import (
    GraphError,
    NumericError,
    ShapeError,
    UninitializedParameterError,
)
from auxcnn.verification import primitive_suite


class TestForwardRules:
    def test_relu_definition(self):
        out = forward_op(OpSpec("relu"), np.array([[-1.0, 0.0, 2.0]]))
        assert np.array_equal(out, [[0.0, 0.0, 2.0]])

    def test_softmax_symmetry(self):
        out = forward_op(OpSpec("softmax"), np.zeros((1, 3)))
        assert np.allclose(out, 1 / 3)

    def test_softmax_rows_sum_to_one_and_positive(self):
        rng = np.random.default_rng(0)
        out = forward_op(OpSpec("softmax"), rng.standard_normal((50, 7)) * 30)
        assert np.all(out > 0)
        assert np.abs(out.sum(axis=1) - 1.0).max() <= 1e-6

    def test_sigmoid_in_open_unit_interval(self):
        rng = np.random.default_rng(1)
        out = forward_op(OpSpec("sigmoid"), rng.standard_normal((100,)) * 8)
        assert np.all((out > 0) & (out < 1))

    def test_identity_kernel_conv(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 1, 5, 5))
        w = np.ones((1, 1, 1, 1))
        out = forward_op(OpSpec("conv2d", kernel=1, stride=1, padding=0), x, params=(w,))
        assert np.allclose(out, x)

    def test_tanh_and_sigmoid_derivatives_at_zero(self):
        x = np.zeros((1, 1))
        (dx,), _ = backward_op(OpSpec("tanh"), x, upstream_grad=np.ones((1, 1)))
        assert dx[0, 0] == pytest.approx(1.0)
        (dx,), _ = backward_op(OpSpec("sigmoid"), x, upstream_grad=np.ones((1, 1)))
        assert dx[0, 0] == pytest.approx(0.25)

    def test_non_finite_output_rejected(self):
        w = np.full((1, 2), np.nan)
        b = np.zeros(1)
        with pytest.raises(NumericError):
            forward_op(OpSpec("dense"), np.ones((1, 2)), params=(w, b))

    def test_shape_mismatch_rejected(self):
        w = np.zeros((4, 3))
        with pytest.raises(ShapeError):
            forward_op(OpSpec("dense"), np.zeros((2, 5)), params=(w,))


class TestShapeRules:
    @pytest.mark.parametrize("h", [4, 8, 16, 32, 64, 128, 256, 448])
    def test_conv_k4s2p1_halves(self, h):
        assert conv_out_size(h, 4, 2, 1) == h // 2
        x = np.zeros((1, 1, h, h), dtype=np.float32)
        w = np.zeros((1, 1, 4, 4), dtype=np.float32)
        out = forward_op(OpSpec("conv2d", kernel=4, stride=2, padding=1), x, params=(w,))
        assert out.shape == (1, 1, h // 2, h // 2)

    @pytest.mark.parametrize("h", [2, 4, 8, 16, 32, 64, 128, 224])
    def test_deconv_k4s2p1_doubles(self, h):
        assert deconv_out_size(h, 4, 2, 1) == 2 * h
        x = np.zeros((1, 1, h, h), dtype=np.float32)
        w = np.zeros((1, 1, 4, 4), dtype=np.float32)
        out = forward_op(OpSpec("deconv2d", kernel=4, stride=2, padding=1), x, params=(w,))
        assert out.shape == (1, 1, 2 * h, 2 * h)

    def test_too_small_input_raises(self):
        with pytest.raises(ShapeError):
            conv_out_size(2, 7, 2, 1)


class TestGradients:
    def test_conv2d_weight_gradient_matches_finite_differences(self):
        # random 1x1x6x6 input, 64-bit, h = 1e-5, rel err <= 1e-4
        store = ParameterStore(np.float64)
        g = Graph("c", store, 1)
        rng = np.random.default_rng(7)
        store.create("w", (2, 1, 4, 4), "F")
        store.set("w", rng.standard_normal((2, 1, 4, 4)) * 0.5)
        store.create("b", (2,), "F", fill=0.0)
        g.set_outputs([g.add(OpSpec("conv2d", kernel=4, stride=2, padding=1),
                             [0], ["w", "b"])])
        rep = grad_check(g, rng.standard_normal((1, 1, 6, 6)), h=1e-5, tol=1e-4, seed=0)
        assert rep.passed, rep.summary()

    def test_every_primitive_three_seeds(self):
        rows = primitive_suite(seeds=(0, 1, 2))
        bad = [r for r in rows if not r[3]]
        assert not bad, bad

    def test_instance_norm_constant_input_zero_analytic_gradient(self):
        # epsilon-guarded variance keeps the backward finite, and normalized
        # values sum to zero, so the input gradient of a sum objective is 0
        store = ParameterStore(np.float64)
        g = Graph("in", store, 1)
        store.create("ga", (2,), "F", fill=1.0)
        store.create("be", (2,), "F", fill=0.0)
        g.set_outputs([g.add(OpSpec("instance_norm"), [0], ["ga", "be"])])
        x = np.full((1, 2, 4, 4), 0.7)
        store.zero_grads()
        out, tape = g.forward(x, want_tape=True)
        gin = g.backward(tape, np.ones_like(out))
        assert np.abs(gin[0]).max() == 0.0
        assert np.isfinite(gin[0]).all()
        rep = grad_check(g, np.full((1, 2, 4, 4), 0.7), projection="ones", seed=3)
        assert max(rep.param_errors.values()) <= 1e-4  # gamma/beta still verify

    def test_dense_random_input_passes(self):
        store = ParameterStore(np.float64)
        g = Graph("d", store, 1)
        rng = np.random.default_rng(11)
        store.create("w", (8, 4), "F")
        store.set("w", rng.standard_normal((8, 4)))
        store.create("b", (8,), "F", fill=0.0)
        g.set_outputs([g.add(OpSpec("dense"), [0], ["w", "b"])])
        assert grad_check(g, rng.standard_normal((4, 4)), seed=0).passed

    def test_grad_check_requires_float64(self):
        store = ParameterStore(np.float32)
        g = Graph("x", store, 1)
        g.set_outputs([g.add(OpSpec("relu"), [0])])
        with pytest.raises(ValueError):
            grad_check(g, np.zeros((2, 2), dtype=np.float32))


class TestGraphExecution:
    def _relu_graph(self, dtype=np.float32):
        store = ParameterStore(dtype)
        g = Graph("r", store, 1)
        g.set_outputs([g.add(OpSpec("relu"), [0])])
        return g

    def test_single_node_graph_equals_forward_op(self):
        g = self._relu_graph()
        x = np.array([[-2.0, 3.0]], dtype=np.float32)
        assert np.array_equal(g.forward(x), forward_op(OpSpec("relu"), x))

    def test_backward_without_zero_doubles_gradients(self):
        store = ParameterStore(np.float64)
        g = Graph("d", store, 1)
        rng = np.random.default_rng(0)
        store.create("w", (3, 2), "F")
        store.set("w", rng.standard_normal((3, 2)))
        store.create("b", (3,), "F", fill=0.0)
        g.set_outputs([g.add(OpSpec("dense"), [0], ["w", "b"])])
        x = rng.standard_normal((4, 2))
        seed = rng.standard_normal((4, 3))
        store.zero_grads()
        _, tape = g.forward(x, want_tape=True)
        g.backward(tape, seed)
        once = store.grad("w").copy()
        _, tape = g.forward(x, want_tape=True)
        g.backward(tape, seed)
        assert np.array_equal(store.grad("w"), 2 * once)

    def test_forward_bitwise_deterministic(self):
        g = self._relu_graph()
        x = np.random.default_rng(5).standard_normal((3, 3)).astype(np.float32)
        a = g.forward(x)
        b = g.forward(x.copy())
        assert a.tobytes() == b.tobytes()

    def test_uninitialized_parameters_rejected(self):
        store = ParameterStore(np.float32)
        g = Graph("d", store, 1)
        store.create("w", (2, 2), "F")   # never initialized
        store.create("b", (2,), "F", fill=0.0)
        g.set_outputs([g.add(OpSpec("dense"), [0], ["w", "b"])])
        with pytest.raises(UninitializedParameterError):
            g.forward(np.zeros((1, 2), dtype=np.float32))

    def test_out_of_order_reference_rejected(self):
        store = ParameterStore(np.float32)
        g = Graph("bad", store, 1)
        with pytest.raises(GraphError):
            g.add(OpSpec("relu"), [5])

    def test_batch_norm_eval_is_pure_affine(self):
        store = ParameterStore(np.float32)
        g = Graph("bn", store, 1)
        store.create("ga", (2,), "F", fill=1.0)
        store.create("be", (2,), "F", fill=0.0)
        store.create("rm", (2,), "F", trainable=False, fill=0.0)
        store.create("rv", (2,), "F", trainable=False, fill=1.0)
        store.set("rm", [0.2, -0.4])
        store.set("rv", [1.5, 0.7])
        g.set_outputs([g.add(OpSpec("batch_norm"), [0], ["ga", "be", "rm", "rv"])])
        x = np.random.default_rng(1).standard_normal((4, 2, 3, 3)).astype(np.float32)
        a = g.forward(x, mode="eval")
        b = g.forward(x.copy(), mode="eval")
        assert a.tobytes() == b.tobytes()
        # per-element affine: two rows with identical values map identically
        x2 = np.concatenate([x[:1], x[:1]])
        out = g.forward(x2, mode="eval")
        assert np.array_equal(out[0], out[1])

    def test_train_mode_batch_norm_updates_running_stats_only_when_asked(self):
        store = ParameterStore(np.float32)
        g = Graph("bn", store, 1)
        store.create("ga", (2,), "F", fill=1.0)
        store.create("be", (2,), "F", fill=0.0)
        store.create("rm", (2,), "F", trainable=False, fill=0.0)
        store.create("rv", (2,), "F", trainable=False, fill=1.0)
        g.set_outputs([g.add(OpSpec("batch_norm"), [0], ["ga", "be", "rm", "rv"])])
        x = np.random.default_rng(2).standard_normal((4, 2, 3, 3)).astype(np.float32)
        before = store["rm"].copy()
        g.forward(x, mode="train", update_stats=False)
        assert np.array_equal(store["rm"], before)
        g.forward(x, mode="train", update_stats=True)
        assert not np.array_equal(store["rm"], before)

    def test_multi_output_graph_and_partial_backward(self):
        store = ParameterStore(np.float64)
        g = Graph("two", store, 1)
        a = g.add(OpSpec("relu"), [0])
        b = g.add(OpSpec("tanh"), [0])
        g.set_outputs([a, b])
        x = np.random.default_rng(3).standard_normal((2, 3))
        (ya, yb), tape = g.forward(x, want_tape=True)
        gin = g.backward(tape, [np.ones_like(ya), None])
        assert np.array_equal(gin[0], (x > 0).astype(float))
