import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wsloc.diffcore import (
    Adam, OptimizerState, Tape, Tensor, bce, conv1d, gather, grad_check, interp_matrix, l1_distance,
    log_prob, mul, optimize_step, relu, resize_linear, scaled_length, sigmoid, softmax, take_columns,
    topk_mean, total, upsample_nearest,
)
from wsloc.errors import InvalidArgument, NumericFailure

from gradcases import param, primitive_cases

SEEDS = range(10)
TOL = 1e-4


class TestTensor:
    def test_data_is_float64_and_readonly(self):
        t = Tensor([1, 2, 3])
        assert t.data.dtype == np.float64
        with pytest.raises(ValueError):
            t.data[0] = 5

    def test_numpy_returns_a_copy(self):
        t = Tensor([1.0, 2.0])
        a = t.numpy()
        a[0] = 9
        assert t.data[0] == 1.0

    def test_operators_match_numpy(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        ta, tb = Tensor(a), Tensor(b)
        np.testing.assert_allclose((ta + tb).data, a + b)
        np.testing.assert_allclose((ta - tb).data, a - b)
        np.testing.assert_allclose((ta * tb).data, a * b)
        np.testing.assert_allclose((ta / 4).data, a / 4)
        np.testing.assert_allclose((-ta).data, -a)
        np.testing.assert_allclose((1.0 - ta).data, 1.0 - a)
        np.testing.assert_allclose((b * ta).data, a * b)

    def test_division_by_tensor_rejected(self):
        with pytest.raises(InvalidArgument):
            Tensor([1.0]) / Tensor([2.0])


class TestTape:
    def test_no_recording_outside_tape(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = mul(x, 3.0)
        assert not y.requires_grad

    def test_constants_are_not_recorded(self):
        with Tape() as tape:
            mul(Tensor([1.0]), 2.0)
        assert tape.ops == []

    def test_ops_recorded_in_forward_order(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        with Tape() as tape:
            total(sigmoid(relu(x)))
        assert [op.name for op in tape.ops] == ["relu", "sigmoid", "sum"]

    def test_backward_runs_in_reverse_order(self):
        x = Tensor([0.5], requires_grad=True)
        seen = []
        with Tape() as tape:
            y = total(relu(mul(x, 2.0)))
        for i, op in enumerate(tape.ops):
            orig = op.backward

            def spy(g, orig=orig, name=op.name):
                seen.append(name)
                return orig(g)

            tape.ops[i] = op._replace(backward=spy)
        tape.backward(y)
        assert seen == ["sum", "relu", "mul"]

    def test_gradient_accumulates_over_reuse(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            y = total(x * x + x)
        tape.backward(y)
        np.testing.assert_allclose(x.grad, [7.0])

    def test_accumulates_across_backward_calls(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                y = total(mul(x, 3.0))
            tape.backward(y)
        np.testing.assert_allclose(x.grad, [6.0, 6.0])

    def test_backward_needs_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = mul(x, 2.0)
        with pytest.raises(InvalidArgument):
            tape.backward(y)

    def test_tapes_are_thread_local(self):
        x = Tensor([1.0], requires_grad=True)
        other = []

        def work():
            with Tape() as t:
                mul(x, 2.0)
            other.append(len(t.ops))

        with Tape() as tape:
            th = threading.Thread(target=work)
            th.start()
            th.join()
        assert tape.ops == [] and other == [1]

    def test_forward_is_deterministic(self, rng):
        x, w, b = rng.normal(size=(3, 9)), rng.normal(size=(4, 3, 3)), rng.normal(size=4)
        a = softmax(conv1d(Tensor(x), Tensor(w), Tensor(b), 1, 1)).data
        c = softmax(conv1d(Tensor(x), Tensor(w), Tensor(b), 1, 1)).data
        assert a.tobytes() == c.tobytes()


class TestConv1d:
    def test_identity_kernel(self):
        out = conv1d(Tensor([[1, 2, 3]]), Tensor([[[1]]]), Tensor([0]))
        np.testing.assert_array_equal(out.data, [[1, 2, 3]])

    def test_strided_padded_sum(self):
        out = conv1d(Tensor([[1, 2, 3, 4]]), Tensor([[[1, 1, 1]]]), Tensor([0]), stride=2, padding=1)
        np.testing.assert_array_equal(out.data, [[3, 9]])

    def test_zero_input_zero_bias(self, rng):
        out = conv1d(Tensor(np.zeros((3, 7))), Tensor(rng.normal(size=(2, 3, 3))), Tensor(np.zeros(2)), 1, 1)
        np.testing.assert_array_equal(out.data, 0)

    def test_matches_direct_sum(self, rng):
        x, w, b = rng.normal(size=(3, 11)), rng.normal(size=(2, 3, 5)), rng.normal(size=2)
        for stride, pad in [(1, 0), (1, 2), (2, 1), (3, 2)]:
            xp = np.pad(x, ((0, 0), (pad, pad)))
            t_out = (11 + 2 * pad - 5) // stride + 1
            ref = np.array([[b[o] + sum(w[o, i, k] * xp[i, t * stride + k] for i in range(3) for k in range(5))
                             for t in range(t_out)] for o in range(2)])
            np.testing.assert_allclose(conv1d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data, ref, atol=1e-12)

    @given(st.integers(1, 40), st.sampled_from([1, 3, 5, 7]))
    def test_same_padding_preserves_length(self, length, k):
        x = Tensor(np.ones((2, length)))
        out = conv1d(x, Tensor(np.ones((1, 2, k))), Tensor([0.0]), 1, (k - 1) // 2)
        assert out.shape == (1, length)

    def test_channel_mismatch(self):
        with pytest.raises(InvalidArgument):
            conv1d(Tensor(np.ones((2, 5))), Tensor(np.ones((1, 3, 3))), Tensor([0.0]))

    def test_kernel_longer_than_padded_input(self):
        with pytest.raises(InvalidArgument):
            conv1d(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 1, 5))), Tensor([0.0]))

    def test_bad_stride_and_padding(self):
        args = (Tensor(np.ones((1, 5))), Tensor(np.ones((1, 1, 3))), Tensor([0.0]))
        with pytest.raises(InvalidArgument):
            conv1d(*args, stride=0)
        with pytest.raises(InvalidArgument):
            conv1d(*args, padding=-1)


class TestResize:
    def test_upscale_example(self):
        out = resize_linear(Tensor([[1.0, 3.0]]), 2)
        np.testing.assert_allclose(out.data, [[1, 1.6667, 2.3333, 3]], atol=1e-4)

    @given(st.integers(1, 30), st.integers(1, 4))
    def test_unit_scale_is_identity(self, length, channels):
        x = Tensor(np.random.default_rng(length).normal(size=(channels, length)))
        assert resize_linear(x, 1.0).data.tobytes() == x.data.tobytes()

    @given(st.integers(1, 30), st.floats(0.1, 4.0))
    def test_constant_stays_constant(self, length, s):
        out = resize_linear(Tensor(np.full((1, length), 5.0)), s)
        np.testing.assert_allclose(out.data, 5.0, rtol=0, atol=1e-12)
        assert out.shape[1] == scaled_length(length, s)

    @pytest.mark.parametrize("s", [0.5, 2.0])
    def test_length_round_trip(self, s):
        # even lengths are the ones where round(s T) / s lands back on T for both s
        for length in range(2, 200, 2):
            x = Tensor(np.zeros((1, length)))
            assert resize_linear(resize_linear(x, s), 1 / s).shape[1] == length

    def test_single_step_input_replicates(self):
        np.testing.assert_array_equal(resize_linear(Tensor([[4.0]]), 3).data, [[4, 4, 4]])

    def test_single_step_output_is_mean(self):
        np.testing.assert_allclose(resize_linear(Tensor([[1.0, 2.0, 6.0]]), 0.1).data, [[3.0]])

    def test_endpoints_are_kept(self, rng):
        x = rng.normal(size=(2, 9))
        out = resize_linear(Tensor(x), 1.7).data
        np.testing.assert_allclose(out[:, [0, -1]], x[:, [0, -1]], atol=1e-12)

    def test_interp_matrix_columns_sum_to_one(self):
        for t, t_out in [(1, 5), (5, 1), (4, 7), (9, 3)]:
            np.testing.assert_allclose(interp_matrix(t, t_out).sum(axis=0), 1.0)

    def test_nonpositive_scale(self):
        with pytest.raises(InvalidArgument):
            resize_linear(Tensor([[1.0, 2.0]]), 0)
        with pytest.raises(InvalidArgument):
            scaled_length(4, -1)


class TestTopk:
    def test_example(self):
        assert topk_mean(Tensor([0.9, 0.1, 0.8, 0.2]), 2).item() == pytest.approx(0.85)

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=20))
    def test_full_and_single_selection(self, row):
        x = Tensor(row)
        assert topk_mean(x, len(row)).item() == pytest.approx(np.mean(row))
        assert topk_mean(x, 1).item() == max(row)

    def test_per_row_over_last_axis(self):
        out = topk_mean(Tensor([[1.0, 5.0, 3.0], [2.0, 2.0, 8.0]]), 2)
        np.testing.assert_allclose(out.data, [4.0, 5.0])

    def test_ties_send_gradient_to_lowest_index(self):
        x = Tensor([1.0, 3.0, 3.0, 3.0], requires_grad=True)
        with Tape() as tape:
            y = topk_mean(x, 2)
        tape.backward(y)
        np.testing.assert_array_equal(x.grad, [0, 0.5, 0.5, 0])

    def test_k_out_of_range(self):
        with pytest.raises(InvalidArgument):
            topk_mean(Tensor([1.0, 2.0]), 3)
        with pytest.raises(InvalidArgument):
            topk_mean(Tensor([1.0, 2.0]), 0)


class TestPrimitives:
    def test_softmax_columns_sum_to_one(self, rng):
        p = softmax(Tensor(rng.normal(size=(5, 7)) * 30), axis=0).data
        np.testing.assert_allclose(p.sum(axis=0), 1.0, rtol=0, atol=1e-12)

    def test_sigmoid_stays_in_open_interval(self):
        s = sigmoid(Tensor([-30.0, 0.0, 30.0])).data
        assert np.all((s > 0) & (s < 1)) and s[1] == 0.5

    def test_l1_distance_is_mean_abs(self):
        a = Tensor([[0.1, 0.5], [0.9, 0.3]])
        b = Tensor([[0.2, 0.4], [0.8, 0.4]])
        assert l1_distance(a, b).item() == pytest.approx(0.1)
        assert l1_distance(a, b).item() == l1_distance(b, a).item()

    def test_bce_half_probability(self):
        assert bce(Tensor([0.5]), np.array([1.0])).item() == pytest.approx(np.log(2))

    def test_bce_clamps(self):
        assert np.isfinite(bce(Tensor([0.0, 1.0]), np.array([1.0, 0.0])).item())
        assert bce(Tensor([1.0, 0.0]), np.array([1.0, 0.0])).item() < 1e-6

    def test_log_prob_clamps_zero(self):
        assert np.isfinite(log_prob(Tensor([0.0])).item())

    def test_gather_and_take_columns(self):
        x = Tensor(np.arange(12.0).reshape(3, 4))
        np.testing.assert_array_equal(gather(x, [0, 2], [1, 3]).data, [1, 11])
        np.testing.assert_array_equal(take_columns(x, [0, 0, 3]).data[:, 2], [3, 7, 11])

    def test_upsample_nearest(self):
        out = upsample_nearest(Tensor([[0.7, 0.6, 0.7, 0.8]]), 2, 8)
        np.testing.assert_array_equal(out.data, [[0.7, 0.7, 0.6, 0.6, 0.7, 0.7, 0.8, 0.8]])
        np.testing.assert_array_equal(upsample_nearest(Tensor([[1.0, 2.0]]), 4, 5).data, [[1, 1, 1, 1, 2]])

    def test_upsample_too_short(self):
        with pytest.raises(InvalidArgument):
            upsample_nearest(Tensor([[1.0]]), 2, 3)


PRIMITIVES = [name for name, _, _ in primitive_cases(np.random.default_rng(0))]


class TestGradients:
    @pytest.mark.parametrize("name", PRIMITIVES)
    @pytest.mark.parametrize("seed", SEEDS)
    def test_primitive(self, name, seed):
        cases = {n: (fn, ps) for n, fn, ps in primitive_cases(np.random.default_rng(seed))}
        fn, params = cases[name]
        assert grad_check(fn, params, eps=1e-5) < TOL

    def test_conv_into_bce(self, rng):
        x, w, b = param(rng, 3, 8), param(rng, 4, 3, 3, scale=0.5), param(rng, 4)
        y = (rng.random(4) < 0.5).astype(float)
        fn = lambda: bce(sigmoid(topk_mean(conv1d(x, w, b, 1, 1), 2)), y)  # noqa: E731
        assert grad_check(fn, [w, b]) < TOL

    def test_linear_function_is_exact(self):
        x = Tensor([0.3, -1.2], requires_grad=True)
        assert grad_check(lambda: total(mul(x, 3.0)), [x]) < 1e-10

    def test_non_finite_value(self):
        x = Tensor([np.inf], requires_grad=True)
        with pytest.raises(NumericFailure):
            grad_check(lambda: total(x), [x])

    def test_leaves_existing_grads_alone(self):
        x = Tensor([1.0], requires_grad=True)
        x.grad = np.array([42.0])
        grad_check(lambda: total(mul(x, 2.0)), [x])
        np.testing.assert_array_equal(x.grad, [42.0])


class TestOptimizer:
    def test_zero_gradients_leave_params(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        state = OptimizerState(lr=0.1)
        optimize_step([x], [np.zeros(2)], state)
        np.testing.assert_array_equal(x.data, [1.0, -2.0])
        assert state.step == 1

    def test_quadratic_descends_monotonically(self):
        x = Tensor([1.0], requires_grad=True)
        opt = Adam([x], lr=0.1)
        history = [abs(x.item())]
        for _ in range(10):
            opt.zero_grad()
            with Tape() as tape:
                y = total(x * x)
            tape.backward(y)
            opt.step()
            history.append(abs(x.item()))
        assert all(b < a for a, b in zip(history, history[1:]))

    def test_matches_adam_formula(self):
        x = Tensor([0.5], requires_grad=True)
        state = OptimizerState(lr=0.01)
        optimize_step([x], [np.array([2.0])], state)
        # first step: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        np.testing.assert_allclose(x.data, [0.5 - 0.01 * 2.0 / (2.0 + 1e-8)], rtol=1e-14)

    def test_zero_learning_rate_is_bit_identical(self, rng):
        x = Tensor(rng.normal(size=5), requires_grad=True)
        before = x.data.tobytes()
        state = OptimizerState(lr=0.0)
        for _ in range(3):
            optimize_step([x], [rng.normal(size=5)], state)
        assert x.data.tobytes() == before

    def test_nan_gradient_leaves_everything(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = Tensor([3.0], requires_grad=True)
        state = OptimizerState(lr=0.1)
        with pytest.raises(NumericFailure):
            optimize_step([y, x], [np.array([1.0]), np.array([0.0, np.nan])], state)
        np.testing.assert_array_equal(x.data, [1.0, 2.0])
        np.testing.assert_array_equal(y.data, [3.0])
        assert state.step == 0 and state.m == []

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgument):
            optimize_step([Tensor([1.0], requires_grad=True)], [np.zeros(2)], OptimizerState(lr=0.1))

    def test_step_counter_increases(self):
        x = Tensor([1.0], requires_grad=True)
        opt = Adam([x], lr=0.1)
        for i in range(1, 4):
            opt.step()
            assert opt.state.step == i
