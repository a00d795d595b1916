"""Unit tests for the autodiff tensor engine.

Expected values come from independent oracles: brute-force loops, direct
formula evaluation, central finite differences and binomial statistics.
"""

import math

import numpy as np
import pytest

from cbit.errors import ConfigError, NumericError
from cbit.tensor import (
    Tensor,
    concat,
    cosine_sim,
    flop_count,
    gather_rows,
    grad_check,
    no_grad,
    stack,
)


def fd_gradient(build, value, eps=1e-6):
    """Central-difference gradient of sum(build(Tensor(x))) at x=value."""
    value = np.asarray(value, dtype=np.float64)
    grad = np.zeros_like(value)
    flat = value.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = float(build(Tensor(value.copy())).data.sum())
        flat[i] = orig - eps
        minus = float(build(Tensor(value.copy())).data.sum())
        flat[i] = orig
        grad.reshape(-1)[i] = (plus - minus) / (2 * eps)
    return grad


def check_grad(build, value, rtol=1e-6, atol=1e-8):
    x = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
    out = build(x)
    out.sum().backward()
    expected = fd_gradient(build, value)
    np.testing.assert_allclose(x.grad, expected, rtol=rtol, atol=atol)


class TestMatmul:
    def test_identity(self):
        a = np.arange(12.0).reshape(3, 4)
        out = Tensor(np.eye(3)) @ Tensor(a)
        np.testing.assert_array_equal(out.data, a)

    def test_annihilator(self):
        a = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        out = a @ Tensor(np.zeros((4, 2)))
        np.testing.assert_array_equal(out.data, np.zeros((3, 2)))

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        out = Tensor(a) @ Tensor(b)
        np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 2)))

    def test_gradients(self):
        rng = np.random.default_rng(2)
        b = rng.normal(size=(4, 3))
        check_grad(lambda x: x @ Tensor(b), rng.normal(size=(2, 4)))

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(5, 3, 4))
        b = rng.normal(size=(4, 2))
        out = Tensor(a) @ Tensor(b)
        for i in range(5):
            np.testing.assert_allclose(out.data[i], a[i] @ b, atol=1e-14)

    def test_batched_gradients_shared_weight(self):
        rng = np.random.default_rng(4)
        a = Tensor(rng.normal(size=(3, 2, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        (a @ w).sum().backward()
        # shared weight accumulates over the batch
        expected_w = sum(a.data[i].T @ np.ones((2, 2)) for i in range(3))
        np.testing.assert_allclose(w.grad, expected_w, atol=1e-12)

    def test_flop_counter(self):
        before = flop_count()
        Tensor(np.zeros((3, 4))) @ Tensor(np.zeros((4, 5)))
        assert flop_count() - before == 2 * 3 * 4 * 5


class TestSoftmaxRows:
    def test_uniform_on_equal_values(self):
        out = Tensor([[2.0, 2.0, 2.0, 2.0]]).softmax_rows()
        np.testing.assert_allclose(out.data, np.full((1, 4), 0.25), atol=1e-15)

    def test_saturation(self):
        out = Tensor([[5.0, -1e9]]).softmax_rows()
        assert out.data[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert out.data[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_direct_formula_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(6,)) * 3
        scale = 1.7
        expected = np.exp(x / scale) / np.exp(x / scale).sum()
        out = Tensor(x).softmax_rows(scale)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(6)
        out = Tensor(rng.normal(size=(4, 5, 7)) * 10).softmax_rows(2.0)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(7)
        weights = Tensor(rng.normal(size=(3, 5)))
        check_grad(lambda x: x.softmax_rows(1.3) * weights,
                   rng.normal(size=(3, 5)))

    def test_bad_scale(self):
        with pytest.raises(ConfigError):
            Tensor([[1.0]]).softmax_rows(0.0)


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        gain = Tensor(np.ones(4))
        bias = Tensor(np.zeros(4))
        out = Tensor([[3.0, 3.0, 3.0, 3.0]]).layer_norm(gain, bias)
        np.testing.assert_allclose(out.data, np.zeros((1, 4)), atol=1e-9)

    def test_already_normalized(self):
        gain = Tensor(np.ones(2))
        bias = Tensor(np.zeros(2))
        out = Tensor([[1.0, -1.0]]).layer_norm(gain, bias, eps=1e-12)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-9)

    def test_mean_var_oracle(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(3, 6)) * 4 + 1
        g = rng.normal(size=6)
        b = rng.normal(size=6)
        eps = 1e-12
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        expected = (x - mu) / np.sqrt(var + eps) * g + b
        out = Tensor(x).layer_norm(Tensor(g), Tensor(b), eps)
        np.testing.assert_allclose(out.data, expected, atol=1e-10)

    def test_gradients_all_inputs(self):
        rng = np.random.default_rng(9)
        x0 = rng.normal(size=(2, 5))
        g0 = rng.normal(size=5)
        b0 = rng.normal(size=5)
        w = rng.normal(size=(2, 5))

        def loss():
            return (x.layer_norm(g, b) * w).sum()

        x = Tensor(x0, requires_grad=True)
        g = Tensor(g0, requires_grad=True)
        b = Tensor(b0, requires_grad=True)
        assert grad_check(loss, [x, g, b]) < 1e-6


class TestGelu:
    def test_zero(self):
        assert Tensor([0.0]).gelu().data[0] == 0.0

    def test_large_positive_asymptote(self):
        out = Tensor([12.0]).gelu()
        assert out.data[0] == pytest.approx(12.0, abs=1e-12)

    def test_erf_oracle_at_one(self):
        # 0.5 * 1 * (1 + erf(1/sqrt(2)))
        out = Tensor([1.0]).gelu()
        assert out.data[0] == pytest.approx(0.8413447460685429, abs=1e-15)

    def test_gradients(self):
        rng = np.random.default_rng(10)
        check_grad(lambda x: x.gelu(), rng.normal(size=(3, 4)) * 2)


class TestDropout:
    def test_ratio_zero_identity(self):
        x = Tensor(np.ones((2, 2)))
        assert x.dropout(0.0, np.random.default_rng(0)) is x

    def test_eval_mode_identity(self):
        x = Tensor(np.ones((2, 2)))
        assert x.dropout(0.5, np.random.default_rng(0), training=False) is x

    def test_bad_ratio(self):
        with pytest.raises(ConfigError):
            Tensor([1.0]).dropout(1.0, np.random.default_rng(0))

    def test_survivor_fraction(self):
        x = Tensor(np.ones(1_000_000))
        out = x.dropout(0.5, np.random.default_rng(11))
        survivors = np.count_nonzero(out.data) / x.size
        assert abs(survivors - 0.5) < 0.002

    def test_expectation_preserved(self):
        # inverted dropout: E[dropout(x)] == x
        x = Tensor(np.full(200_000, 2.0))
        out = x.dropout(0.3, np.random.default_rng(12))
        assert abs(out.data.mean() - 2.0) / 2.0 < 0.005

    def test_backward_uses_same_mask(self):
        x = Tensor(np.ones(1000), requires_grad=True)
        out = x.dropout(0.4, np.random.default_rng(13))
        out.sum().backward()
        np.testing.assert_array_equal(x.grad, out.data)


class TestGatherRows:
    def test_basis_row(self):
        out = gather_rows(Tensor(np.eye(4)), [0])
        np.testing.assert_array_equal(out.data, [[1.0, 0.0, 0.0, 0.0]])

    def test_repeated_id_accumulates(self):
        table = Tensor(np.random.default_rng(14).normal(size=(3, 2)),
                       requires_grad=True)
        out = gather_rows(table, [1, 1])
        (out * np.array([[1.0, 2.0], [3.0, 4.0]])).sum().backward()
        np.testing.assert_allclose(table.grad[1], [4.0, 6.0])
        np.testing.assert_allclose(table.grad[0], [0.0, 0.0])

    def test_loop_oracle(self):
        rng = np.random.default_rng(15)
        table = rng.normal(size=(6, 3))
        ids = [4, 0, 5, 0]
        out = gather_rows(Tensor(table), ids)
        for r, i in enumerate(ids):
            np.testing.assert_array_equal(out.data[r], table[i])

    def test_matrix_ids(self):
        table = Tensor(np.arange(8.0).reshape(4, 2))
        out = gather_rows(table, np.array([[0, 1], [3, 2]]))
        assert out.shape == (2, 2, 2)
        np.testing.assert_array_equal(out.data[1, 0], [6.0, 7.0])

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            gather_rows(Tensor(np.eye(2)), [2])


class TestTake:
    def test_gather_and_scatter(self):
        x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        out = x.take(np.array([[0, 5], [5, 11]]))
        np.testing.assert_array_equal(out.data, [[0.0, 5.0], [5.0, 11.0]])
        out.sum().backward()
        expected = np.zeros(12)
        expected[0] = 1.0
        expected[5] = 2.0
        expected[11] = 1.0
        np.testing.assert_array_equal(x.grad.reshape(-1), expected)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            Tensor(np.zeros(3)).take([3])


class TestCosineSim:
    def test_self_similarity(self):
        a = Tensor(np.random.default_rng(16).normal(size=5))
        assert cosine_sim(a, a).item() == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert cosine_sim(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0

    def test_hand_computed(self):
        # (1*2 + 2*1) / (sqrt(5) * sqrt(5)) = 4/5
        out = cosine_sim(Tensor([1.0, 2.0]), Tensor([2.0, 1.0]))
        assert out.item() == pytest.approx(0.8, abs=1e-15)

    def test_zero_norm(self):
        with pytest.raises(NumericError):
            cosine_sim(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))

    def test_gradient(self):
        rng = np.random.default_rng(17)
        b = Tensor(rng.normal(size=6))

        a = Tensor(rng.normal(size=6), requires_grad=True)
        assert grad_check(lambda: cosine_sim(a, b), [a]) < 1e-6


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.random.default_rng(18).normal(size=(3, 4)),
                   requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_squared_norm_gradient(self):
        v = np.random.default_rng(19).normal(size=7)
        x = Tensor(v, requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * v, atol=1e-14)

    def test_non_scalar_seed_rejected(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros(3), requires_grad=True).backward()

    def test_attention_ffn_microgram_vs_finite_differences(self):
        # one attention head plus a tiny FFN, checked end to end
        rng = np.random.default_rng(20)
        h0 = rng.normal(size=(3, 4))
        wq0 = rng.normal(size=(4, 2)) * 0.5
        wv0 = rng.normal(size=(4, 2)) * 0.5
        w10 = rng.normal(size=(2, 4)) * 0.5

        h = Tensor(h0, requires_grad=True)
        wq = Tensor(wq0, requires_grad=True)
        wv = Tensor(wv0, requires_grad=True)
        w1 = Tensor(w10, requires_grad=True)

        def loss():
            q = h @ wq
            attn = (q @ q.mT).softmax_rows(np.sqrt(2.0))
            mixed = attn @ (h @ wv)
            return (mixed @ w1).gelu().sum()

        assert grad_check(loss, [h, wq, wv, w1], eps=1e-5) < 1e-4

    def test_repeatable_given_seed(self):
        def run():
            rng = np.random.default_rng(21)
            x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            y = x.dropout(0.2, np.random.default_rng(99))
            ((y @ y.mT).softmax_rows() * x).sum().backward()
            return x.grad.copy()

        first, second = run(), run()
        np.testing.assert_array_equal(first, second)


class TestGradCheck:
    def test_quadratic_form_is_polynomial_exact(self):
        rng = np.random.default_rng(22)
        a = rng.normal(size=(5, 5))
        a = a + a.T
        x = Tensor(rng.normal(size=(5, 1)), requires_grad=True)
        err = grad_check(lambda: (x.mT @ Tensor(a) @ x).reshape(()), [x])
        assert err < 1e-8


class TestReductionsAndShaping:
    def test_sum_axis_matches_numpy(self):
        rng = np.random.default_rng(23)
        x = rng.normal(size=(2, 3, 4))
        for axis, keep in [(None, False), (0, False), (-1, True), (1, True)]:
            out = Tensor(x).sum(axis=axis, keepdims=keep)
            np.testing.assert_allclose(out.data,
                                       x.sum(axis=axis, keepdims=keep))

    def test_mean_gradient(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        x.mean().backward()
        np.testing.assert_allclose(x.grad, np.full((2, 3), 1 / 6))

    def test_reshape_roundtrip_gradient(self):
        x = Tensor(np.arange(6.0), requires_grad=True)
        x.reshape(2, 3).sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones(6))

    def test_mT(self):
        x = np.arange(24.0).reshape(2, 3, 4)
        out = Tensor(x).mT
        np.testing.assert_array_equal(out.data, np.swapaxes(x, -1, -2))

    def test_logsumexp_oracle(self):
        rng = np.random.default_rng(24)
        x = rng.normal(size=(4, 6)) * 5
        out = Tensor(x).logsumexp()
        expected = np.log(np.exp(x).sum(axis=-1))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_logsumexp_gradient(self):
        rng = np.random.default_rng(25)
        check_grad(lambda t: t.logsumexp(), rng.normal(size=(3, 5)))

    def test_stack_and_concat_gradients(self):
        rng = np.random.default_rng(26)
        vals = [rng.normal(size=4) for _ in range(3)]
        ts = [Tensor(v, requires_grad=True) for v in vals]
        (stack(ts) * rng.normal(size=(3, 4))).sum().backward()
        assert all(t.grad is not None for t in ts)

        mats = [Tensor(rng.normal(size=(2, 2)), requires_grad=True)
                for _ in range(2)]
        concat(mats, axis=-1).sum().backward()
        for m in mats:
            np.testing.assert_array_equal(m.grad, np.ones((2, 2)))


class TestElementwiseGradients:
    @pytest.mark.parametrize("build", [
        lambda x: x.exp(),
        lambda x: (x * x + 1.0).log(),
        lambda x: (x * x + 0.5).sqrt(),
        lambda x: x.sigmoid(),
        lambda x: x.log_sigmoid(),
        lambda x: x / 3.0,
        lambda x: 2.0 / (x * x + 1.0),
        lambda x: x ** 3,
        lambda x: (x - 1.0) * (2.0 - x),
    ])
    def test_against_finite_differences(self, build):
        rng = np.random.default_rng(27)
        check_grad(build, rng.normal(size=(2, 4)))

    def test_log_sigmoid_is_stable(self):
        out = Tensor([-800.0, 0.0, 800.0]).log_sigmoid()
        assert out.data[0] == pytest.approx(-800.0)
        assert out.data[1] == pytest.approx(-math.log(2.0), abs=1e-15)
        assert out.data[2] == pytest.approx(0.0, abs=1e-15)


class TestNumericGuards:
    def test_non_finite_forward_raises(self):
        with pytest.raises(NumericError):
            Tensor([-1.0]).log()

    def test_nan_input_rejected(self):
        with pytest.raises(NumericError):
            Tensor([np.nan])

    def test_no_grad_suppresses_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            out = (x * 2.0).sum()
        assert not out.requires_grad
        assert out._parents == ()
