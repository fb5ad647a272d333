"""Tensor engine tests: forward hand cases, backward vs. finite differences,
tape semantics, and the gradient checker itself.

The finite-difference oracle here is deliberately local to this file so the
product checker is never used to validate its own machinery.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from piareid import diffcore as dc


def numeric_grad(func, arrays, which, step=1e-5):
    """Central differences of ``func(arrays) -> float`` w.r.t. arrays[which]."""
    base = [a.copy() for a in arrays]
    out = np.zeros_like(base[which])
    flat = base[which].reshape(-1)
    out_flat = out.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        plus = func(base)
        flat[i] = keep - step
        minus = func(base)
        flat[i] = keep
        out_flat[i] = (plus - minus) / (2 * step)
    return out


def taped_grads(build, tensors):
    for t in tensors:
        t.grad = None
    with dc.Tape() as tape:
        loss = build(tensors)
    dc.backward(loss, tape)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def assert_matches_fd(build_tensor, build_float, arrays, tol=1e-6):
    tensors = [dc.parameter(a) for a in arrays]
    grads = taped_grads(build_tensor, tensors)
    for i in range(len(arrays)):
        numeric = numeric_grad(build_float, arrays, i)
        err = dc.relative_error(grads[i], numeric)
        assert err.max() < tol, f"input {i}: max rel err {err.max()}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class TestForwardHandCases:
    def test_sigmoid_at_zero(self):
        out = dc.sigmoid(dc.tensor(0.0))
        assert out.item() == pytest.approx(0.5, abs=0)

    def test_sigmoid_derivative_at_zero(self):
        x = dc.parameter(0.0)
        with dc.Tape() as tape:
            out = dc.sigmoid(x)
        dc.backward(out, tape)
        assert float(x.grad) == pytest.approx(0.25, abs=1e-15)

    def test_relu_clamps_and_passes(self):
        out = dc.relu(dc.tensor([-2.0, 0.0, 3.5]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 3.5])

    def test_relu_gradient_zero_at_kink(self):
        x = dc.parameter(0.0)
        with dc.Tape() as tape:
            loss = dc.relu(x)
        dc.backward(loss, tape)
        assert float(x.grad) == 0.0

    def test_abs_gradient_is_sign(self):
        x = dc.parameter([-2.0, 0.0, 5.0])
        with dc.Tape() as tape:
            loss = dc.tensor_sum(dc.absolute(x))
        dc.backward(loss, tape)
        np.testing.assert_array_equal(x.grad, [-1.0, 0.0, 1.0])

    def test_log_softmax_uniform(self):
        out = dc.log_softmax(dc.tensor([0.0, 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, -math.log(4.0), rtol=0, atol=1e-15)

    def test_log_softmax_shift_invariant(self):
        x = np.array([1.0, -2.0, 0.5])
        a = dc.log_softmax(dc.tensor(x)).data
        b = dc.log_softmax(dc.tensor(x + 1000.0)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_mean_backward_spreads_uniformly(self):
        x = dc.parameter(np.arange(6.0).reshape(2, 3))
        with dc.Tape() as tape:
            loss = dc.mean(x)
        dc.backward(loss, tape)
        np.testing.assert_allclose(x.grad, np.full((2, 3), 1.0 / 6.0), atol=0)

    def test_dot(self):
        out = dc.dot(dc.tensor([1.0, 2.0, 3.0]), dc.tensor([4.0, -1.0, 0.5]))
        assert out.item() == pytest.approx(3.5)
        assert out.shape == ()

    def test_l2_normalize_unit_result(self, rng):
        x = rng.normal(size=(3, 5))
        out = dc.l2_normalize(dc.tensor(x), axis=1).data
        np.testing.assert_allclose((out**2).sum(axis=1), 1.0, atol=1e-12)

    def test_l2_normalize_zero_vector_floors(self):
        x = dc.parameter(np.zeros(3))
        with dc.Tape() as tape:
            out = dc.l2_normalize(x)
            loss = dc.tensor_sum(out)
        assert np.all(out.data == 0.0)
        dc.backward(loss, tape)
        np.testing.assert_allclose(x.grad, 1e12, rtol=1e-9)

    def test_scale(self):
        out = dc.scale(dc.tensor([1.0, -2.0]), -0.5)
        np.testing.assert_array_equal(out.data, [-0.5, 1.0])

    def test_global_pools_on_constant_map(self):
        x = dc.tensor(np.full((4, 3, 5), 2.5))
        np.testing.assert_allclose(dc.global_avg_pool(x).data, 2.5)
        np.testing.assert_allclose(dc.global_max_pool(x).data, 2.5)

    def test_channel_pools_shapes(self, rng):
        x4 = dc.tensor(rng.normal(size=(2, 6, 4, 3)))
        assert dc.channel_max_pool(x4).shape == (2, 1, 4, 3)
        assert dc.channel_avg_pool(x4).shape == (2, 1, 4, 3)
        x3 = dc.tensor(rng.normal(size=(6, 4, 3)))
        assert dc.channel_max_pool(x3).shape == (1, 4, 3)
        assert dc.channel_avg_pool(x3).shape == (1, 4, 3)

    def test_channel_avg_matches_mean(self, rng):
        x = rng.normal(size=(2, 5, 3, 3))
        out = dc.channel_avg_pool(dc.tensor(x)).data
        np.testing.assert_allclose(out, x.mean(axis=1, keepdims=True), atol=1e-15)


class TestConv2d:
    @staticmethod
    def conv_oracle(x, w, b, stride, padding):
        """Direct quadruple-loop convolution."""
        n, c_in, h, wd = x.shape
        c_out, _, kh, kw = w.shape
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        h_out = (h + 2 * padding - kh) // stride + 1
        w_out = (wd + 2 * padding - kw) // stride + 1
        out = np.zeros((n, c_out, h_out, w_out))
        for img in range(n):
            for co in range(c_out):
                for i in range(h_out):
                    for j in range(w_out):
                        patch = xp[
                            img, :, i * stride : i * stride + kh, j * stride : j * stride + kw
                        ]
                        out[img, co, i, j] = (patch * w[co]).sum() + b[co]
        return out

    @pytest.mark.parametrize(
        "shape,cout,k,stride,padding",
        [
            ((1, 1, 4, 4), 1, 3, 1, 0),
            ((2, 3, 6, 5), 4, 3, 1, 1),
            ((2, 2, 7, 6), 3, 3, 2, 1),
            ((1, 3, 8, 4), 2, 1, 1, 0),
            ((3, 1, 5, 5), 2, 5, 1, 2),
            ((1, 2, 9, 7), 2, 3, 3, 2),
        ],
    )
    def test_matches_direct_convolution(self, rng, shape, cout, k, stride, padding):
        x = rng.normal(size=shape)
        w = rng.normal(size=(cout, shape[1], k, k))
        b = rng.normal(size=cout)
        got = dc.conv2d(
            dc.tensor(x), dc.tensor(w), dc.tensor(b), stride=stride, padding=padding
        ).data
        want = self.conv_oracle(x, w, b, stride, padding)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_identity_kernel(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = dc.conv2d(dc.tensor(x), dc.tensor(w), dc.tensor([0.0]), stride=1, padding=1)
        np.testing.assert_allclose(out.data, x, atol=0)

    def test_three_d_input_round_trip(self, rng):
        x = rng.normal(size=(3, 6, 5))
        w = rng.normal(size=(2, 3, 3, 3))
        b = rng.normal(size=2)
        got3 = dc.conv2d(dc.tensor(x), dc.tensor(w), dc.tensor(b), stride=2, padding=1)
        got4 = dc.conv2d(dc.tensor(x[None]), dc.tensor(w), dc.tensor(b), stride=2, padding=1)
        assert got3.ndim == 3
        np.testing.assert_array_equal(got3.data, got4.data[0])

    def test_small_case_gradient_vs_fd(self, rng):
        x = rng.normal(size=(1, 1, 4, 4))
        w = rng.normal(size=(1, 1, 3, 3))
        b = rng.normal(size=1)

        def build(ts):
            out = dc.conv2d(ts[0], ts[1], ts[2], stride=1, padding=0)
            return dc.tensor_sum(dc.mul(out, out))

        def as_float(arrs):
            out = self.conv_oracle(arrs[0], arrs[1], arrs[2], 1, 0)
            return float((out**2).sum())

        assert_matches_fd(build, as_float, [x, w, b])

    @given(
        h=st.integers(3, 10),
        w=st.integers(3, 10),
        k=st.sampled_from([1, 3, 5]),
        stride=st.integers(1, 3),
        padding=st.integers(0, 2),
    )
    @settings(max_examples=40, deadline=None)
    def test_output_shape_formula(self, h, w, k, stride, padding):
        if h + 2 * padding < k or w + 2 * padding < k:
            return
        x = dc.tensor(np.zeros((1, 1, h, w)))
        wt = dc.tensor(np.zeros((1, 1, k, k)))
        out = dc.conv2d(x, wt, dc.tensor([0.0]), stride=stride, padding=padding)
        assert out.shape == (
            1,
            1,
            (h + 2 * padding - k) // stride + 1,
            (w + 2 * padding - k) // stride + 1,
        )


class TestBackwardVsFiniteDifferences:
    """Every differentiable primitive against the local FD oracle."""

    def test_relu_away_from_kink(self, rng):
        x = rng.normal(size=(4, 5))
        x[np.abs(x) < 1e-2] = 0.5

        def build(ts):
            return dc.tensor_sum(dc.mul(dc.relu(ts[0]), dc.constant(x + 2.0)))

        def as_float(arrs):
            return float((np.maximum(arrs[0], 0.0) * (x + 2.0)).sum())

        assert_matches_fd(build, as_float, [x])

    def test_sigmoid(self, rng):
        x = rng.normal(size=(3, 4))

        def build(ts):
            return dc.mean(dc.sigmoid(ts[0]))

        def as_float(arrs):
            return float((1.0 / (1.0 + np.exp(-arrs[0]))).mean())

        assert_matches_fd(build, as_float, [x])

    def test_log_softmax(self, rng):
        x = rng.normal(size=(4, 6))
        pick = np.eye(6)[rng.integers(0, 6, size=4)]

        def build(ts):
            lp = dc.log_softmax(ts[0], axis=1)
            return dc.tensor_sum(dc.mul(lp, dc.constant(pick)))

        def as_float(arrs):
            z = arrs[0] - arrs[0].max(axis=1, keepdims=True)
            lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            return float((lp * pick).sum())

        assert_matches_fd(build, as_float, [x])

    def test_l2_normalize(self, rng):
        x = rng.normal(size=(3, 5)) + 0.5
        r = rng.normal(size=(3, 5))

        def build(ts):
            return dc.tensor_sum(dc.mul(dc.l2_normalize(ts[0], axis=1), dc.constant(r)))

        def as_float(arrs):
            n = np.sqrt((arrs[0] ** 2).sum(axis=1, keepdims=True))
            return float((arrs[0] / np.maximum(n, 1e-12) * r).sum())

        assert_matches_fd(build, as_float, [x])

    def test_linear(self, rng):
        x = rng.normal(size=(4, 3))
        w = rng.normal(size=(3, 5))
        b = rng.normal(size=5)
        r = rng.normal(size=(4, 5))

        def build(ts):
            return dc.tensor_sum(dc.mul(dc.linear(ts[0], ts[1], ts[2]), dc.constant(r)))

        def as_float(arrs):
            return float(((arrs[0] @ arrs[1] + arrs[2]) * r).sum())

        assert_matches_fd(build, as_float, [x, w, b])

    def test_linear_vector_input(self, rng):
        x = rng.normal(size=3)
        w = rng.normal(size=(3, 4))
        b = rng.normal(size=4)
        r = rng.normal(size=4)

        def build(ts):
            return dc.tensor_sum(dc.mul(dc.linear(ts[0], ts[1], ts[2]), dc.constant(r)))

        def as_float(arrs):
            return float(((arrs[0] @ arrs[1] + arrs[2]) * r).sum())

        assert_matches_fd(build, as_float, [x, w, b])

    def test_dot(self, rng):
        a = rng.normal(size=6)
        b = rng.normal(size=6)

        def build(ts):
            return dc.dot(ts[0], ts[1])

        def as_float(arrs):
            return float(arrs[0] @ arrs[1])

        assert_matches_fd(build, as_float, [a, b])

    def test_concat_and_reductions(self, rng):
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(2, 4))
        r = rng.normal(size=(2, 7))

        def build(ts):
            joined = dc.concat([ts[0], ts[1]], axis=1)
            return dc.tensor_sum(dc.mul(joined, dc.constant(r)))

        def as_float(arrs):
            return float((np.concatenate(arrs, axis=1) * r).sum())

        assert_matches_fd(build, as_float, [a, b])

    def test_mean_with_axis(self, rng):
        x = rng.normal(size=(3, 4))
        r = rng.normal(size=4)

        def build(ts):
            return dc.tensor_sum(dc.mul(dc.mean(ts[0], axis=0), dc.constant(r)))

        def as_float(arrs):
            return float((arrs[0].mean(axis=0) * r).sum())

        assert_matches_fd(build, as_float, [x])

    def test_global_and_channel_pools(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        # break ties so FD stays smooth around max selections
        x += np.linspace(0, 1e-3, x.size).reshape(x.shape)
        r = rng.normal(size=(2, 3))
        r2 = rng.normal(size=(2, 1, 4, 5))

        def build(ts):
            top = dc.tensor_sum(dc.mul(dc.global_max_pool(ts[0]), dc.constant(r)))
            avg = dc.tensor_sum(dc.mul(dc.global_avg_pool(ts[0]), dc.constant(r)))
            cmx = dc.tensor_sum(dc.mul(dc.channel_max_pool(ts[0]), dc.constant(r2)))
            cav = dc.tensor_sum(dc.mul(dc.channel_avg_pool(ts[0]), dc.constant(r2)))
            return dc.add(dc.add(top, avg), dc.add(cmx, cav))

        def as_float(arrs):
            x_ = arrs[0]
            return float(
                (x_.max(axis=(2, 3)) * r).sum()
                + (x_.mean(axis=(2, 3)) * r).sum()
                + (x_.max(axis=1, keepdims=True) * r2).sum()
                + (x_.mean(axis=1, keepdims=True) * r2).sum()
            )

        assert_matches_fd(build, as_float, [x])

    def test_elementwise_with_broadcast(self, rng):
        a = rng.normal(size=(4, 3))
        b = rng.normal(size=(1, 3))
        c = rng.normal(size=())

        def build(ts):
            out = dc.mul(dc.add(ts[0], ts[1]), dc.sub(ts[0], ts[2]))
            return dc.mean(out)

        def as_float(arrs):
            return float(((arrs[0] + arrs[1]) * (arrs[0] - arrs[2])).mean())

        assert_matches_fd(build, as_float, [a, b, c])

    def test_abs_away_from_zero(self, rng):
        x = rng.normal(size=(3, 3))
        x[np.abs(x) < 1e-2] = 0.7

        def build(ts):
            return dc.mean(dc.absolute(ts[0]))

        def as_float(arrs):
            return float(np.abs(arrs[0]).mean())

        assert_matches_fd(build, as_float, [x])


class TestTieBreaking:
    def test_channel_max_routes_to_lowest_index(self):
        x = dc.parameter(np.ones((1, 3, 2, 2)))
        with dc.Tape() as tape:
            loss = dc.tensor_sum(dc.channel_max_pool(x))
        dc.backward(loss, tape)
        np.testing.assert_array_equal(x.grad[0, 0], np.ones((2, 2)))
        np.testing.assert_array_equal(x.grad[0, 1:], 0.0)

    def test_global_max_routes_to_lowest_flat_index(self):
        x = dc.parameter(np.full((1, 2, 2, 3), 7.0))
        with dc.Tape() as tape:
            loss = dc.tensor_sum(dc.global_max_pool(x))
        dc.backward(loss, tape)
        expect = np.zeros((1, 2, 2, 3))
        expect[0, :, 0, 0] = 1.0
        np.testing.assert_array_equal(x.grad, expect)


class TestBatchNorm:
    class State:
        def __init__(self, dim):
            self.running_mean = np.zeros(dim)
            self.running_var = np.ones(dim)

    def test_training_output_is_standardized(self, rng):
        x = rng.normal(loc=3.0, scale=2.0, size=(16, 5))
        state = self.State(5)
        gamma = dc.tensor(np.ones(5))
        beta = dc.tensor(np.zeros(5))
        out = dc.batch_norm(dc.tensor(x), gamma, beta, state=state, training=True).data
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-9)

    def test_running_stats_update_rate(self, rng):
        x = rng.normal(size=(8, 3))
        state = self.State(3)
        state.running_mean[:] = 1.0
        state.running_var[:] = 2.0
        dc.batch_norm(
            dc.tensor(x), dc.tensor(np.ones(3)), dc.tensor(np.zeros(3)),
            state=state, training=True,
        )
        np.testing.assert_allclose(
            state.running_mean, 0.9 * 1.0 + 0.1 * x.mean(axis=0), atol=1e-12
        )
        np.testing.assert_allclose(
            state.running_var, 0.9 * 2.0 + 0.1 * x.var(axis=0), atol=1e-12
        )

    def test_eval_uses_running_stats_and_keeps_them(self, rng):
        x = rng.normal(size=(4, 3))
        state = self.State(3)
        state.running_mean[:] = 0.5
        state.running_var[:] = 4.0
        before = (state.running_mean.copy(), state.running_var.copy())
        out = dc.batch_norm(
            dc.tensor(x), dc.tensor(np.ones(3)), dc.tensor(np.zeros(3)),
            state=state, training=False,
        ).data
        np.testing.assert_allclose(out, (x - 0.5) / np.sqrt(4.0 + 1e-12), atol=1e-12)
        np.testing.assert_array_equal(state.running_mean, before[0])
        np.testing.assert_array_equal(state.running_var, before[1])

    def test_training_gradients_vs_fd(self, rng):
        x = rng.normal(size=(6, 3))
        gamma = rng.normal(size=3)
        beta = rng.normal(size=3)
        r = rng.normal(size=(6, 3))
        state = self.State(3)

        def build(ts):
            out = dc.batch_norm(ts[0], ts[1], ts[2], state=state, training=True)
            return dc.tensor_sum(dc.mul(out, dc.constant(r)))

        def as_float(arrs):
            mu = arrs[0].mean(axis=0)
            var = arrs[0].var(axis=0)
            xh = (arrs[0] - mu) / np.sqrt(var + 1e-12)
            return float(((arrs[1] * xh + arrs[2]) * r).sum())

        assert_matches_fd(build, as_float, [x, gamma, beta])

    def test_vector_input_round_trip(self, rng):
        state = self.State(4)
        state.running_mean[:] = rng.normal(size=4)
        state.running_var[:] = 1.5
        x = rng.normal(size=4)
        got = dc.batch_norm(
            dc.tensor(x), dc.tensor(np.ones(4)), dc.tensor(np.zeros(4)),
            state=state, training=False,
        )
        assert got.shape == (4,)


class TestTapeSemantics:
    def test_no_tape_no_recording(self):
        x = dc.parameter([1.0, 2.0])
        out = dc.mul(x, x)
        assert out.requires_grad
        assert dc.current_tape() is None

    def test_constant_only_graph_records_nothing(self):
        with dc.Tape() as tape:
            dc.mul(dc.constant([1.0]), dc.constant([2.0]))
        assert len(tape) == 0

    def test_fan_out_accumulates(self):
        x = dc.parameter(3.0)
        with dc.Tape() as tape:
            loss = dc.add(dc.mul(x, x), dc.scale(x, 4.0))
        dc.backward(loss, tape)
        assert float(x.grad) == pytest.approx(2 * 3.0 + 4.0)

    def test_same_tensor_twice_in_one_node(self):
        x = dc.parameter([2.0, -1.0])
        with dc.Tape() as tape:
            loss = dc.dot(x, x)
        dc.backward(loss, tape)
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_grad_accumulates_across_tapes(self):
        x = dc.parameter(2.0)
        for _ in range(2):
            with dc.Tape() as tape:
                loss = dc.mul(x, x)
            dc.backward(loss, tape)
        assert float(x.grad) == pytest.approx(8.0)

    def test_backward_requires_scalar(self):
        x = dc.parameter([1.0, 2.0])
        with dc.Tape() as tape:
            out = dc.mul(x, x)
        with pytest.raises(dc.TapeError):
            dc.backward(out, tape)

    def test_tape_single_use(self):
        x = dc.parameter(1.5)
        with dc.Tape() as tape:
            loss = dc.mul(x, x)
        dc.backward(loss, tape)
        with pytest.raises(dc.TapeError):
            dc.backward(loss, tape)
        tape.reset()
        assert len(tape) == 0 and not tape.consumed

    def test_unused_branch_contributes_nothing(self):
        x = dc.parameter([1.0, 2.0])
        y = dc.parameter([3.0, 4.0])
        with dc.Tape() as tape:
            dc.mul(y, y)  # recorded but not part of the loss
            loss = dc.tensor_sum(x)
        dc.backward(loss, tape)
        np.testing.assert_array_equal(x.grad, [1.0, 1.0])
        assert y.grad is None

    def test_nested_tapes_record_independently(self):
        x = dc.parameter(2.0)
        with dc.Tape() as outer:
            dc.mul(x, x)
            with dc.Tape() as inner:
                loss_inner = dc.scale(x, 3.0)
            dc.backward(loss_inner, inner)
        assert float(x.grad) == pytest.approx(3.0)
        assert len(outer) == 1 and len(inner) == 1

    def test_interior_tensors_keep_no_grad(self):
        x = dc.parameter([1.0, 2.0])
        with dc.Tape() as tape:
            mid = dc.mul(x, x)
            loss = dc.tensor_sum(mid)
        dc.backward(loss, tape)
        assert mid.grad is None


class TestValidation:
    def test_unknown_kind(self):
        with pytest.raises(dc.InvalidAttributeError):
            dc.apply("nonesuch", [dc.tensor(1.0)])

    def test_conv_channel_mismatch(self):
        with pytest.raises(dc.ShapeMismatchError, match="channels"):
            dc.conv2d(
                dc.tensor(np.zeros((1, 2, 4, 4))),
                dc.tensor(np.zeros((1, 3, 3, 3))),
                dc.tensor(np.zeros(1)),
                stride=1, padding=0,
            )

    def test_conv_kernel_exceeds_input(self):
        with pytest.raises(dc.ShapeMismatchError):
            dc.conv2d(
                dc.tensor(np.zeros((1, 1, 2, 2))),
                dc.tensor(np.zeros((1, 1, 5, 5))),
                dc.tensor(np.zeros(1)),
                stride=1, padding=0,
            )

    def test_conv_bad_stride(self):
        with pytest.raises(dc.InvalidAttributeError):
            dc.conv2d(
                dc.tensor(np.zeros((1, 1, 4, 4))),
                dc.tensor(np.zeros((1, 1, 3, 3))),
                dc.tensor(np.zeros(1)),
                stride=0, padding=0,
            )

    def test_scale_needs_numeric_factor(self):
        with pytest.raises(dc.InvalidAttributeError):
            dc.apply("scale", [dc.tensor(1.0)], factor="two")
        with pytest.raises(dc.InvalidAttributeError):
            dc.apply("scale", [dc.tensor(1.0)])

    def test_add_incompatible_shapes(self):
        with pytest.raises(dc.ShapeMismatchError):
            dc.add(dc.tensor(np.zeros(3)), dc.tensor(np.zeros(4)))

    def test_concat_needs_matching_dims(self):
        with pytest.raises(dc.ShapeMismatchError):
            dc.concat([dc.tensor(np.zeros((2, 3))), dc.tensor(np.zeros((3, 3)))], axis=1)

    def test_concat_axis_out_of_range(self):
        with pytest.raises(dc.InvalidAttributeError):
            dc.concat([dc.tensor(np.zeros((2, 3)))], axis=5)

    def test_linear_width_mismatch(self):
        with pytest.raises(dc.ShapeMismatchError):
            dc.linear(dc.tensor(np.zeros((2, 3))), dc.tensor(np.zeros((4, 5))),
                      dc.tensor(np.zeros(5)))

    def test_dot_needs_vectors(self):
        with pytest.raises(dc.ShapeMismatchError):
            dc.dot(dc.tensor(np.zeros((2, 2))), dc.tensor(np.zeros((2, 2))))

    def test_batch_norm_requires_state(self):
        with pytest.raises(dc.InvalidAttributeError):
            dc.apply(
                "batch_norm",
                [dc.tensor(np.zeros((2, 3))), dc.tensor(np.ones(3)), dc.tensor(np.zeros(3))],
                training=True,
            )

    def test_pool_rank_check(self):
        with pytest.raises(dc.ShapeMismatchError):
            dc.global_avg_pool(dc.tensor(np.zeros((3, 3))))


class TestChecker:
    def test_passes_on_smooth_closure(self, rng):
        a = dc.parameter(rng.normal(size=(3, 4)))
        w = dc.parameter(rng.normal(size=(4, 2)))

        def build(params):
            out = dc.linear(params[0], params[1], dc.constant(np.zeros(2)))
            return dc.mean(dc.mul(out, out))

        report = dc.check_gradients(build, [a, w], names=["a", "w"])
        assert report.passed
        assert report.max_rel_error < 1e-6

    def test_detects_untaped_dependency(self, rng):
        x = dc.parameter(rng.normal(size=5) + 2.0)

        def build(params):
            # second factor bypasses the tape, so the analytic side misses it
            return dc.mean(dc.mul(params[0], dc.constant(params[0].data)))

        report = dc.check_gradients(build, [x])
        assert not report.passed

    def test_ignored_parameter_gets_zeros_on_both_sides(self, rng):
        used = dc.parameter(rng.normal(size=3))
        unused = dc.parameter(rng.normal(size=4))

        def build(params):
            return dc.mean(dc.mul(params[0], params[0]))

        report = dc.check_gradients(build, [used, unused], names=["used", "unused"])
        assert report.passed
        assert report.entries[1].max_rel_error == 0.0

    def test_rejects_nondeterministic_closure(self):
        x = dc.parameter([1.0])
        calls = {"n": 0}

        def build(params):
            calls["n"] += 1
            return dc.mean(dc.scale(params[0], float(calls["n"])))

        with pytest.raises(dc.NonDeterministicClosureError):
            dc.check_gradients(build, [x])

    def test_reports_per_parameter_entries(self, rng):
        x = dc.parameter(rng.normal(size=(2, 2)))
        report = dc.check_gradients(
            lambda ps: dc.mean(dc.mul(ps[0], ps[0])), [x], names=["x"]
        )
        assert [e.name for e in report.entries] == ["x"]
        assert report.entries[0].worst_index


class TestHypothesisInvariants:
    @given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5))
    @settings(max_examples=25, deadline=None)
    def test_l2_normalize_rows_never_exceed_unit(self, n, d, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, d)) * rng.choice([1e-14, 1.0, 1e6])
        out = dc.l2_normalize(dc.tensor(x), axis=1).data
        norms = np.sqrt((out**2).sum(axis=1))
        assert np.all(norms <= 1.0 + 1e-9)

    @given(st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_log_softmax_normalizes(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 7)) * 10
        out = dc.log_softmax(dc.tensor(x), axis=1).data
        np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, atol=1e-9)

    @given(st.integers(0, 1000), st.integers(1, 4))
    @settings(max_examples=25, deadline=None)
    def test_concat_split_round_trip(self, seed, parts):
        rng = np.random.default_rng(seed)
        blocks = [rng.normal(size=(2, rng.integers(1, 4))) for _ in range(parts)]
        joined = dc.concat([dc.tensor(b) for b in blocks], axis=1).data
        np.testing.assert_array_equal(joined, np.concatenate(blocks, axis=1))
