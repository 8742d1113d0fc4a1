import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from sleepseq import autodiff as ad
from sleepseq.autodiff import Tensor, backward, gradient_check


def leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


class TestBackwardBasics:
    def test_linear(self):
        x = leaf([1.0, 2.0, 3.0])
        backward(ad.tsum(x))
        assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_quadratic(self):
        x = leaf([1.0, -2.0, 3.0])
        backward(ad.tsum(x * x))
        assert_array_equal(x.grad, [2.0, -4.0, 6.0])

    def test_multi_consumer_sums_contributions(self):
        # loss = sum(y) + sum(y*y) with y = 2x: dloss/dx = 2 + 8x (hand-derived)
        x = leaf([1.0, -1.0, 0.5])
        y = x * 2.0
        loss = ad.tsum(y) + ad.tsum(y * y)
        backward(loss)
        assert_allclose(x.grad, 2.0 + 8.0 * x.values)

    def test_repeated_backward_accumulates(self):
        x = leaf([2.0])
        loss = ad.tsum(x * x)
        backward(loss)
        backward(loss)
        assert_allclose(x.grad, [8.0])

    def test_non_scalar_loss_rejected(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(ValueError):
            backward(x * x)

    def test_untracked_graph_is_free(self):
        a = Tensor(np.ones(3))
        out = a * a + a
        assert out._backward is None and not out.requires_grad


class TestOpForward:
    def test_conv_identity_kernel(self):
        x = Tensor(np.array([[[1.0, 2.0, 3.0, 4.0, 5.0]]]))
        k = Tensor(np.array([[[1.0]]]))
        assert_array_equal(ad.conv1d(x, k).values, [[[1, 2, 3, 4, 5]]])

    def test_conv_strided_example(self):
        x = Tensor(np.array([[[1.0, 2.0, 3.0, 4.0]]]))
        k = Tensor(np.array([[[1.0, 1.0]]]))
        assert_array_equal(ad.conv1d(x, k, stride=2).values, [[[3.0, 7.0]]])

    def test_conv_output_length_formula(self):
        x = Tensor(np.zeros((1, 1, 10)))
        k = Tensor(np.zeros((1, 1, 3)))
        assert ad.conv1d(x, k, stride=2, padding=1).shape == (1, 1, 5)

    def test_conv_channel_mismatch(self):
        with pytest.raises(ValueError):
            ad.conv1d(Tensor(np.zeros((1, 2, 8))), Tensor(np.zeros((1, 3, 3))))

    def test_maxpool_example(self):
        x = Tensor(np.array([[[1.0, 3.0, 2.0, 5.0]]]))
        assert_array_equal(ad.maxpool1d(x, 2, 2).values, [[[3.0, 5.0]]])

    def test_softmax_uniform(self):
        out = ad.softmax(Tensor(np.zeros(5)), axis=0)
        assert_allclose(out.values, [0.2] * 5)

    def test_softmax_stable_and_simplex(self):
        rng = np.random.default_rng(0)
        for scale in (1.0, 1e2, 1e4):
            x = Tensor(rng.standard_normal((4, 6)) * scale)
            y = ad.softmax(x, axis=1).values
            assert np.all(np.isfinite(y))
            assert y.min() >= 0
            assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)

    def test_dropout_zero_rate_identity(self):
        x = Tensor(np.arange(6.0))
        out = ad.dropout(x, 0.0, training=True, rng=np.random.default_rng(0))
        assert out is x

    def test_dropout_inference_identity(self):
        x = Tensor(np.arange(6.0))
        assert ad.dropout(x, 0.5, training=False) is x

    def test_dropout_rate_validation(self):
        x = Tensor(np.ones(3))
        with pytest.raises(ValueError):
            ad.dropout(x, 1.0, training=True, rng=np.random.default_rng(0))
        with pytest.raises(ValueError):
            ad.dropout(x, -0.1, training=True, rng=np.random.default_rng(0))

    def test_dropout_deterministic_given_seed(self):
        x = Tensor(np.ones(100))
        a = ad.dropout(x, 0.4, True, np.random.default_rng(11)).values
        b = ad.dropout(x, 0.4, True, np.random.default_rng(11)).values
        assert_array_equal(a, b)

    def test_dropout_expectation(self):
        x = Tensor(np.full(200, 3.0))
        acc = np.zeros(200)
        n = 400
        for seed in range(n):
            acc += ad.dropout(x, 0.5, True, np.random.default_rng(seed)).values
        assert_allclose((acc / n).mean(), 3.0, rtol=0.03)

    def test_matmul_shape_error(self):
        with pytest.raises(ValueError):
            ad.matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))

    def test_embedding_out_of_range(self):
        table = Tensor(np.zeros((4, 2)))
        with pytest.raises(ValueError):
            ad.embedding(table, np.array([4]))


class TestLstmCell:
    def test_zero_weights_fixed_point(self):
        hidden, din = 4, 3
        x = Tensor(np.random.default_rng(0).standard_normal((2, din)))
        h0 = Tensor(np.zeros((2, hidden)))
        c0 = Tensor(np.zeros((2, hidden)))
        W = Tensor(np.zeros((din, 4 * hidden)))
        U = Tensor(np.zeros((hidden, 4 * hidden)))
        b = Tensor(np.zeros(4 * hidden))
        h1, c1 = ad.lstm_cell(x, h0, c0, W, U, b)
        assert_array_equal(h1.values, np.zeros((2, hidden)))
        assert_array_equal(c1.values, np.zeros((2, hidden)))

    def test_gate_saturation_preserves_cell(self):
        hidden, din = 3, 2
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((1, din)))
        h0 = Tensor(rng.standard_normal((1, hidden)))
        c0 = Tensor(rng.standard_normal((1, hidden)))
        W = Tensor(np.zeros((din, 4 * hidden)))
        U = Tensor(np.zeros((hidden, 4 * hidden)))
        b = np.zeros(4 * hidden)
        b[0:hidden] = -50.0  # input gate shut
        b[hidden : 2 * hidden] = 50.0  # forget gate open
        _, c1 = ad.lstm_cell(x, h0, c0, W, U, Tensor(b))
        assert_allclose(c1.values, c0.values, atol=1e-8)

    def test_gradient_vs_finite_differences(self):
        hidden, din = 3, 4
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((2, din)), requires_grad=True)
        h0 = Tensor(rng.standard_normal((2, hidden)))
        c0 = Tensor(rng.standard_normal((2, hidden)))
        W = leaf(rng.standard_normal((din, 4 * hidden)) * 0.5)
        U = leaf(rng.standard_normal((hidden, 4 * hidden)) * 0.5)
        b = leaf(rng.standard_normal(4 * hidden) * 0.5)

        def f():
            h1, c1 = ad.lstm_cell(x, h0, c0, W, U, b)
            return ad.tsum(h1 * h1) + ad.tsum(c1)

        res = gradient_check(f, [W, U, b, x], eps=1e-6)
        assert res.max_rel_error < 1e-4


def _op_cases(rng):
    """Small scalar-valued graphs exercising every differentiable op."""
    a = leaf(rng.standard_normal((3, 4)))
    b = leaf(rng.standard_normal((3, 4)))
    m = leaf(rng.standard_normal((4, 2)))
    v = leaf(rng.standard_normal(4))
    conv_x = leaf(rng.standard_normal((2, 2, 9)))
    conv_k = leaf(rng.standard_normal((3, 2, 3)))
    table = leaf(rng.standard_normal((5, 3)))
    ids = rng.integers(0, 5, size=4)
    drop_seed = int(rng.integers(0, 2**31))
    return {
        "add": ([a, b], lambda: ad.tsum((a + b) * (a + b))),
        "sub": ([a, b], lambda: ad.tsum((a - b) * (a - b))),
        "mul": ([a, b], lambda: ad.tsum(a * b)),
        "broadcast_add": ([a, v], lambda: ad.tsum((a + v) * (a + v))),
        "matmul": ([a, m], lambda: ad.tsum((a @ m) * (a @ m))),
        "reshape": ([a], lambda: ad.tsum(ad.reshape(a, (2, 6)) @ ad.reshape(a, (6, 2)))),
        "narrow": ([a], lambda: ad.tsum(ad.narrow(a, 1, 1, 2) * 3.0)),
        "concat": ([a, b], lambda: ad.tsum(ad.concat([a, b], axis=0) * ad.concat([b, a], axis=0))),
        "sum_axis": ([a], lambda: ad.tsum(ad.tsum(a, axis=1) * ad.tsum(a, axis=1))),
        "mean": ([a], lambda: ad.tmean(a * a)),
        "relu": ([a], lambda: ad.tsum(ad.relu(a))),
        "tanh": ([a], lambda: ad.tsum(ad.tanh(a) * ad.tanh(a))),
        "sigmoid": ([a], lambda: ad.tsum(ad.sigmoid(a) * b)),
        "log": ([a], lambda: ad.tsum(ad.tlog(a * a + 1.0))),
        "softmax": ([a], lambda: ad.tsum(ad.softmax(a, axis=1) * b)),
        "conv1d": ([conv_x, conv_k],
                   lambda: ad.tsum(ad.conv1d(conv_x, conv_k, stride=2, padding=1) * 0.5)),
        "maxpool1d": ([conv_x], lambda: ad.tsum(ad.maxpool1d(conv_x, 3, 2) * 2.0)),
        "embedding": ([table], lambda: ad.tsum(ad.embedding(table, ids) * ad.embedding(table, ids))),
        "dropout": ([a], lambda: ad.tsum(
            ad.dropout(a, 0.3, True, np.random.default_rng(drop_seed)) * b)),
    }


@pytest.mark.parametrize("seed", range(100))
def test_every_op_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, (params, f) in _op_cases(rng).items():
        res = gradient_check(f, params, eps=1e-6)
        assert res.max_rel_error < 1e-4, f"{name} (seed {seed}): {res.worst}"


class TestGradientCheck:
    def test_polynomial_exactness(self):
        x = leaf([3.0])

        def f():
            return ad.tsum(x * x)

        res = gradient_check(f, [x], eps=1e-5)
        assert res.max_rel_error < 1e-8

    def test_relu_kink_skipped(self):
        x = leaf([0.0, 1.0])

        def f():
            return ad.tsum(ad.relu(x))

        res = gradient_check(f, [x], eps=1e-5)
        assert res.n_skipped == 1
        assert res.n_checked == 1
        assert res.max_rel_error < 1e-8

    def test_softmax_cross_entropy_toy(self):
        rng = np.random.default_rng(3)
        logits = leaf(rng.standard_normal((4, 3)))
        onehot = np.eye(3)[rng.integers(0, 3, size=4)]

        def f():
            probs = ad.softmax(logits, axis=1)
            return -ad.tsum(Tensor(onehot) * ad.tlog(probs)) * (1.0 / 4.0)

        res = gradient_check(f, [logits], eps=1e-6)
        assert res.max_rel_error < 1e-6

    def test_non_finite_f_rejected(self):
        x = leaf([-1.0])

        def f():
            return ad.tlog(x)

        with np.errstate(invalid="ignore"), pytest.raises(ad.NumericError):
            gradient_check(f, [x])
