import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from vitiseg.autodiff import (
    NadamState,
    Parameter,
    RunningStats,
    Tape,
    Tensor,
    avgpool3,
    backward,
    batch_norm,
    concat_channels,
    conv2d,
    dropout,
    elu,
    global_avg_pool,
    grad_check,
    linear,
    maxpool2,
    nadam_step,
    ops,
    record_op,
    sigmoid,
    slice_channels,
    softmax_channels,
    upsample_nearest2,
)
from vitiseg.errors import ConfigError, NumericError, UsageError


def naive_conv(x, k, b, stride, pad):
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    acc = b[oi]
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[ni, ci, yi * stride + u, xi * stride + v] * k[oi, ci, u, v]
                    out[ni, oi, yi, xi] = acc
    return out


class TestConv2d:
    def test_unit_kernel_scales(self):
        out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    def test_stride_shape(self):
        out = conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), stride=2)
        assert out.shape == (1, 1, 2, 2)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_loop_oracle(self, stride, pad):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 2, 5, 5))
        k = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, padding=pad)
        np.testing.assert_allclose(out.data, naive_conv(x, k, b, stride, pad), rtol=0, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ConfigError):
            conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0)])
    def test_gradients(self, stride, pad):
        rng = np.random.default_rng(3)
        k = Parameter(rng.standard_normal((3, 2, 3, 3)))
        b = Parameter(rng.standard_normal(3))
        err = grad_check(lambda t: conv2d(t, k, b, stride, pad), rng.standard_normal((2, 2, 5, 5)), params=[k, b])
        assert err < 1e-6


class TestPooling:
    def test_max_of_four(self):
        out = maxpool2(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
        np.testing.assert_array_equal(out.data, [[[[4.0]]]])

    def test_tie_routes_to_first_element(self):
        x = Tensor(np.full((1, 1, 4, 4), 3.0), requires_grad=True)
        with Tape() as tape:
            out = maxpool2(x)
            loss = out.sum()
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 3.0))
        tape.backward(loss)
        expected = np.zeros((4, 4))
        expected[::2, ::2] = 1.0
        np.testing.assert_array_equal(x.grad[0, 0], expected)

    def test_matches_window_oracle(self):
        x = np.random.default_rng(1).standard_normal((1, 1, 6, 6))
        expected = np.array([[max(x[0, 0, 2 * i + a, 2 * j + b] for a in (0, 1) for b in (0, 1))
                              for j in range(3)] for i in range(3)])
        np.testing.assert_array_equal(maxpool2(Tensor(x)).data[0, 0], expected)

    def test_odd_dims_rejected(self):
        with pytest.raises(ConfigError):
            maxpool2(Tensor(np.ones((1, 1, 3, 4))))

    def test_avgpool3_matches_oracle(self):
        x = np.random.default_rng(2).standard_normal((1, 2, 4, 5))
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.array([[[[xp[0, c, i:i + 3, j:j + 3].sum() / 9 for j in range(5)]
                               for i in range(4)] for c in range(2)]])
        np.testing.assert_allclose(avgpool3(Tensor(x)).data, expected, atol=1e-14)


class TestUpsample:
    def test_single_pixel(self):
        np.testing.assert_array_equal(upsample_nearest2(Tensor([[[[5.0]]]])).data, np.full((1, 1, 2, 2), 5.0))

    def test_pool_inverts_upsample(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
        np.testing.assert_array_equal(maxpool2(upsample_nearest2(Tensor(x))).data, x)

    def test_matches_replication_oracle(self):
        x = np.random.default_rng(4).standard_normal((1, 3, 4, 4))
        out = upsample_nearest2(Tensor(x)).data
        for c in range(3):
            for i in range(8):
                for j in range(8):
                    assert out[0, c, i, j] == x[0, c, i // 2, j // 2]

    def test_backward_sums_blocks(self):
        x = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
        w = np.arange(16.0).reshape(1, 1, 4, 4)
        with Tape() as tape:
            loss = (upsample_nearest2(x) * Tensor(w)).sum()
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad[0, 0], [[0 + 1 + 4 + 5, 2 + 3 + 6 + 7], [8 + 9 + 12 + 13, 10 + 11 + 14 + 15]])


class TestConcat:
    def test_shape(self):
        assert concat_channels(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((1, 3, 2, 2)))).shape == (1, 5, 2, 2)

    def test_slice_back(self):
        x = np.random.default_rng(0).standard_normal((1, 2, 3, 3))
        cat = concat_channels(Tensor(x), Tensor(np.zeros((1, 4, 3, 3))))
        np.testing.assert_array_equal(slice_channels(cat, 0, 2).data, x)

    def test_spatial_mismatch(self):
        with pytest.raises(ConfigError):
            concat_channels(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 2, 2, 2))))

    def test_gradient(self):
        rng = np.random.default_rng(5)
        other = Parameter(rng.standard_normal((2, 3, 3, 3)))
        err = grad_check(lambda t: concat_channels(t, other), rng.standard_normal((2, 2, 3, 3)), params=[other])
        assert err < 1e-6


class TestBatchNorm:
    def _bn(self, c):
        return Parameter(np.ones(c)), Parameter(np.zeros(c)), RunningStats(c)

    def test_standardized_input_unchanged(self):
        x = np.random.default_rng(0).standard_normal((4, 2, 3, 3))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        out = batch_norm(Tensor(x), *self._bn(2), mode="train")
        # epsilon = 1e-5 shrinks a unit-variance input by exactly 1/sqrt(1 + 1e-5)
        np.testing.assert_allclose(out.data, x / np.sqrt(1.0 + 1e-5), atol=1e-12)
        np.testing.assert_allclose(out.data, x, rtol=5e-6, atol=1e-6)

    def test_zero_gamma_gives_beta(self):
        g, _, stats = self._bn(3)
        g.data[:] = 0.0
        beta = Parameter(np.array([0.5, -1.0, 2.0]))
        out = batch_norm(Tensor(np.random.default_rng(1).standard_normal((2, 3, 2, 2))), g, beta, stats)
        np.testing.assert_array_equal(out.data, np.broadcast_to(beta.data.reshape(1, 3, 1, 1), (2, 3, 2, 2)))

    def test_batch_statistics(self):
        x = np.random.default_rng(2).normal(3.0, 5.0, (8, 4, 5, 5))
        out = batch_norm(Tensor(x), *self._bn(4), mode="train").data
        assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-10)
        assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1.0) < 1e-6)

    def test_batch_of_one_rejected_in_train(self):
        with pytest.raises(ConfigError):
            batch_norm(Tensor(np.ones((1, 2, 3, 3))), *self._bn(2), mode="train")

    def test_running_stats_momentum(self):
        x = np.random.default_rng(3).standard_normal((4, 2, 3, 3))
        g, b, stats = self._bn(2)
        batch_norm(Tensor(x), g, b, stats, mode="train")
        np.testing.assert_allclose(stats.mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(stats.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))
        out = batch_norm(Tensor(x), g, b, stats, mode="eval").data
        expected = (x - stats.mean.reshape(1, 2, 1, 1)) / np.sqrt(stats.var.reshape(1, 2, 1, 1) + 1e-5)
        np.testing.assert_allclose(out, expected, atol=1e-14)

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_gradient(self, mode):
        rng = np.random.default_rng(4)
        gamma = Parameter(rng.uniform(0.5, 1.5, 3))
        beta = Parameter(rng.standard_normal(3))
        stats = RunningStats(3)
        stats.mean = rng.standard_normal(3)
        stats.var = rng.uniform(0.5, 2.0, 3)
        err = grad_check(lambda t: batch_norm(t, gamma, beta, stats, mode=mode),
                         rng.standard_normal((3, 3, 2, 2)), params=[gamma, beta])
        assert err < 1e-6


class TestElu:
    def test_zero(self):
        assert elu(Tensor(np.array([0.0]))).data[0] == 0.0

    def test_negative_asymptote(self):
        assert abs(elu(Tensor(np.array([-50.0]))).data[0] + 1.0) < 1e-12

    @pytest.mark.parametrize("x", [-2.0, -0.5, 0.3, 4.0])
    def test_gradient(self, x):
        assert grad_check(elu, np.array([x])) < 1e-6


class TestSoftmax:
    def test_equal_logits(self):
        out = softmax_channels(Tensor(np.zeros((1, 2, 3, 3))))
        np.testing.assert_array_equal(out.data, np.full((1, 2, 3, 3), 0.5))

    def test_saturation(self):
        x = np.zeros((1, 2, 1, 1))
        x[0, 0], x[0, 1] = 50.0, -50.0
        out = softmax_channels(Tensor(x)).data
        assert abs(out[0, 0, 0, 0] - 1.0) < 1e-12 and abs(out[0, 1, 0, 0]) < 1e-12

    def test_matches_formula(self):
        x = np.random.default_rng(0).normal(0, 3, (2, 2, 4, 4))
        out = softmax_channels(Tensor(x)).data
        e = np.exp(x)
        np.testing.assert_allclose(out, e / e.sum(axis=1, keepdims=True), rtol=1e-12)
        assert np.all(np.abs(out.sum(axis=1) - 1.0) < 1e-9)

    def test_rejects_other_channel_counts(self):
        with pytest.raises(ConfigError):
            softmax_channels(Tensor(np.zeros((1, 3, 2, 2))))

    @given(hnp.arrays(np.float64, (1, 2, 3, 3), elements=st.floats(-1e3, 1e3)))
    @settings(max_examples=50, deadline=None)
    def test_sums_to_one(self, x):
        out = softmax_channels(Tensor(x)).data
        assert np.all(np.abs(out.sum(axis=1) - 1.0) < 1e-9)


class TestDropout:
    def test_rate_zero_identity(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal(dropout(x, 0.0, np.random.default_rng(0)).data, x.data)

    def test_eval_identity(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal(dropout(x, 0.7, None, mode="eval").data, x.data)

    def test_half_rate_statistics(self):
        x = Tensor(np.ones(10**6))
        out = dropout(x, 0.5, np.random.default_rng(11)).data
        zero_frac = np.mean(out == 0.0)
        assert abs(zero_frac - 0.5) < 0.002
        assert np.all(out[out != 0.0] == 2.0)

    def test_expectation_preserved(self):
        x = np.random.default_rng(1).uniform(0.5, 1.5, 10**6)
        out = dropout(Tensor(x), 0.3, np.random.default_rng(2)).data
        assert abs(out.mean() - x.mean()) / x.mean() < 0.005

    def test_seed_reproducible(self):
        x = Tensor(np.ones(1000))
        a = dropout(x, 0.2, np.random.default_rng(9)).data
        b = dropout(x, 0.2, np.random.default_rng(9)).data
        np.testing.assert_array_equal(a, b)

    def test_rate_one_rejected(self):
        with pytest.raises(ConfigError):
            dropout(Tensor(np.ones(3)), 1.0, np.random.default_rng(0))


class TestBackward:
    def test_sum_gives_ones(self):
        p = Parameter(np.random.default_rng(0).standard_normal((3, 4)))
        with Tape() as tape:
            loss = p.sum()
        backward(tape, loss)
        np.testing.assert_array_equal(p.grad, np.ones((3, 4)))

    def test_square(self):
        p = Parameter(np.array([3.0]))
        with Tape() as tape:
            loss = (p * p).sum()
        tape.backward(loss)
        assert p.grad[0] == 6.0

    def test_non_scalar_loss(self):
        p = Parameter(np.ones(3))
        with Tape() as tape:
            out = p * 2.0
        with pytest.raises(UsageError):
            tape.backward(out)

    def test_frozen_parameter_gets_zero(self):
        p = Parameter(np.ones(3), trainable=False)
        q = Parameter(np.ones(3))
        with Tape() as tape:
            loss = (p * q).sum()
        tape.backward(loss)
        np.testing.assert_array_equal(p.grad, np.zeros(3))
        np.testing.assert_array_equal(q.grad, np.ones(3))

    def test_reverse_order_and_cleared(self):
        order = []

        def traced(x, tag):
            return record_op(x.data * 1.0, (x,), lambda g: (order.append(tag) or g,), tag)

        p = Parameter(np.ones(2))
        with Tape() as tape:
            loss = traced(traced(traced(p, "a"), "b"), "c").sum()
        assert tape.op_names == ["a", "b", "c", "sum"]
        tape.backward(loss)
        assert order == ["c", "b", "a"]
        assert len(tape) == 0

    def test_no_recording_outside_tape(self):
        p = Parameter(np.ones(2))
        out = p * 2.0
        assert not out.requires_grad

    def test_nan_is_hard_error(self):
        with pytest.raises(NumericError):
            ops.log(Tensor(np.array([-1.0])))

    def test_bit_identical_replay(self):
        def run():
            rng = np.random.default_rng(42)
            k = Parameter(rng.standard_normal((2, 1, 3, 3)))
            x = Tensor(rng.standard_normal((2, 1, 6, 6)))
            with Tape() as tape:
                y = maxpool2(elu(conv2d(x, k, padding=1)))
                loss = dropout(y, 0.3, rng).sum()
            tape.backward(loss)
            return y.data.tobytes(), k.grad.tobytes()

        assert run() == run()


class TestNadam:
    def test_zero_gradient_no_change(self):
        p = Parameter(np.array([1.0, -2.0]))
        state = NadamState.for_params([p])
        nadam_step([p], state, lr=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        assert state.t == 1

    def test_one_step_literal(self):
        # m = 0.1, v = 0.001; m_hat = 0.9*0.1/(1-0.81) + 0.1/0.1 = 28/19; v_hat = 1
        p = Parameter(np.array([1.0]))
        p.grad = np.array([1.0])
        nadam_step([p], NadamState.for_params([p]), lr=0.1)
        assert p.data[0] == pytest.approx(0.8526315804210526, abs=1e-15)

    def test_weight_decay_couples_into_gradient(self):
        a = Parameter(np.array([2.0]))
        a.grad = np.array([0.5])
        b = Parameter(np.array([2.0]))
        b.grad = np.array([0.5 + 0.1 * 2.0])
        nadam_step([a], NadamState.for_params([a]), lr=0.01, weight_decay=0.1)
        nadam_step([b], NadamState.for_params([b]), lr=0.01, weight_decay=0.0)
        assert a.data[0] == b.data[0]

    def test_identical_parameters_stay_identical(self):
        rng = np.random.default_rng(0)
        init = rng.standard_normal(5)
        p, q = Parameter(init.copy()), Parameter(init.copy())
        state = NadamState.for_params([p, q])
        for _ in range(100):
            g = rng.standard_normal(5)
            p.grad, q.grad = g.copy(), g.copy()
            nadam_step([p, q], state, lr=0.01, weight_decay=1e-3)
        np.testing.assert_array_equal(p.data, q.data)
        assert state.t == 100

    def test_frozen_parameter_not_updated(self):
        p = Parameter(np.array([1.0]), trainable=False)
        p.grad = np.array([1.0])
        nadam_step([p], NadamState.for_params([p]), lr=0.1, weight_decay=0.5)
        assert p.data[0] == 1.0


class TestGradCheck:
    def test_linear_exact(self):
        rng = np.random.default_rng(0)
        w = Parameter(rng.standard_normal((4, 3)))
        b = Parameter(rng.standard_normal(3))
        assert grad_check(lambda t: linear(t, w, b), rng.standard_normal((5, 4)), params=[w, b]) < 1e-9

    def test_conv_elu_pool_stack(self):
        rng = np.random.default_rng(1)
        k = Parameter(rng.standard_normal((3, 2, 3, 3)) * 0.5)
        b = Parameter(rng.standard_normal(3) * 0.1)
        err = grad_check(lambda t: maxpool2(elu(conv2d(t, k, b, padding=1))),
                         rng.standard_normal((2, 2, 6, 6)), params=[k, b])
        assert err < 1e-3

    def test_detects_corrupted_adjoint(self):
        def bad_elu(x):
            good = elu(Tensor(x.data))
            slope = np.where(x.data > 0, 1.0, good.data + 1.0)
            return record_op(good.data, (x,), lambda g: (1.1 * g * slope,), "bad_elu")

        assert grad_check(bad_elu, np.random.default_rng(2).standard_normal((2, 3))) > 1e-2


def _op_cases():
    rng = np.random.default_rng(123)
    k = Parameter(rng.standard_normal((2, 3, 3, 3)) * 0.5)
    gamma = Parameter(rng.uniform(0.5, 1.5, 3))
    beta = Parameter(rng.standard_normal(3))
    return {
        "conv2d": (lambda t: conv2d(t, k, padding=1), [k]),
        "maxpool2": (maxpool2, []),
        "avgpool3": (avgpool3, []),
        "upsample_nearest2": (upsample_nearest2, []),
        "global_avg_pool": (global_avg_pool, []),
        "concat_channels": (lambda t: concat_channels(t, elu(t)), []),
        "batch_norm": (lambda t: batch_norm(t, gamma, beta, RunningStats(3)), [gamma, beta]),
        "elu": (elu, []),
        "sigmoid": (sigmoid, []),
        "softmax_channels": (lambda t: softmax_channels(slice_channels(t, 0, 2)), []),
        "dropout": (lambda t: dropout(t, 0.3, np.random.default_rng(0)), []),
        "div_log_clip": (lambda t: ops.log(ops.clip(sigmoid(t), 1e-7, 1 - 1e-7)) / (1.5 + sigmoid(t)), []),
    }


@pytest.mark.parametrize("name", sorted(_op_cases()))
@pytest.mark.parametrize("seed", range(5))
def test_every_op_passes_grad_check(name, seed):
    fn, params = _op_cases()[name]
    x = np.random.default_rng(seed).standard_normal((2, 3, 4, 4))
    assert grad_check(fn, x, step=1e-4, params=params) < 1e-3


@given(hnp.arrays(np.float64, (2, 2, 4, 4), elements=st.floats(-1e3, 1e3)))
@settings(max_examples=40, deadline=None)
def test_ops_finite_on_bounded_inputs(x):
    t = Tensor(x, requires_grad=True)
    k = Parameter(np.full((2, 2, 3, 3), 0.1))
    with Tape() as tape:
        y = softmax_channels(conv2d(elu(maxpool2(upsample_nearest2(t))), k, padding=1))
        y = concat_channels(y, sigmoid(avgpool3(t)))
        loss = y.sum()
    tape.backward(loss)
    assert np.all(np.isfinite(t.grad))
