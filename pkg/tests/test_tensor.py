import math

import numpy as np
import pytest

from eend import tensor as tt
from eend.tensor import (
    DimensionError,
    GraphError,
    NumericError,
    Tensor,
    backward,
    grad_check,
)


def naive_matmul(a, b):
    """Triple-loop reference used as the independent matmul oracle."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        b = np.arange(12.0).reshape(3, 4)
        out = tt.matmul(Tensor(np.eye(3)), Tensor(b))
        assert np.array_equal(out.data, b)

    def test_zeros(self):
        out = tt.matmul(Tensor(np.zeros((2, 3))), Tensor(np.ones((3, 4))))
        assert np.array_equal(out.data, np.zeros((2, 4)))

    def test_hand_case(self):
        out = tt.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        assert np.array_equal(out.data, [[17.0], [39.0]])

    def test_matches_triple_loop_exactly(self):
        rng = np.random.default_rng(0)
        for m, k, n in [(1, 1, 1), (2, 3, 4), (8, 8, 8), (5, 7, 3)]:
            a = rng.standard_normal((m, k))
            b = rng.standard_normal((k, n))
            assert np.array_equal(tt.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b))

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            tt.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


class TestSoftmax:
    def test_uniform_for_zero_input(self):
        out = tt.scaled_softmax_rows(Tensor(np.zeros((4, 4))), 1.0)
        assert np.allclose(out.data, 0.25, atol=0)

    def test_closed_form(self):
        out = tt.scaled_softmax_rows(Tensor([[0.0, math.log(3.0)]]), 1.0)
        assert np.allclose(out.data, [[0.25, 0.75]], atol=1e-15)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((6, 6)) * 30
        out = tt.scaled_softmax_rows(Tensor(a), 0.5)
        assert np.all(np.abs(out.data.sum(axis=1) - 1.0) < 1e-12)
        assert np.all(out.data > 0) and np.all(out.data < 1)

    def test_nonfinite_input_rejected(self):
        t = Tensor(np.zeros((2, 2)))
        t.data[0, 0] = np.nan
        with pytest.raises(NumericError):
            tt.scaled_softmax_rows(t, 1.0)

    def test_masked_block(self):
        a = np.zeros((4, 4))
        a[2:, :] = 1e300  # garbage outside the valid block must be ignored
        a[:, 2:] = 1e300
        out = tt.scaled_softmax_rows(Tensor(a), 1.0, n_valid=2)
        assert np.allclose(out.data[:2, :2], 0.5)
        assert np.all(out.data[2:, :] == 0) and np.all(out.data[:, 2:] == 0)


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        e = Tensor(np.full((3, 4), 2.5))
        out = tt.layer_norm(e, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert np.allclose(out.data, 0.0, atol=1e-6)

    def test_two_point_row(self):
        out = tt.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-9)

    def test_standardizes_random_rows(self):
        rng = np.random.default_rng(2)
        e = rng.standard_normal((5, 32)) * 3 + 1
        out = tt.layer_norm(Tensor(e), Tensor(np.ones(32)), Tensor(np.zeros(32)))
        assert np.all(np.abs(out.data.mean(axis=1)) < 1e-12)
        assert np.all(np.abs(out.data.var(axis=1) - 1.0) < 1e-9)

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        e = rng.standard_normal((4, 8))
        g, b = Tensor(np.ones(8)), Tensor(np.zeros(8))
        out1 = tt.layer_norm(Tensor(e), g, b)
        out2 = tt.layer_norm(Tensor(e + 7.5), g, b)
        assert np.all(np.abs(out1.data - out2.data) < 1e-10)


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert tt.sigmoid(Tensor(np.zeros(3))).data[0] == 0.5

    def test_relu_negative(self):
        assert tt.relu(Tensor([-2.5])).data[0] == 0.0

    def test_tanh_one(self):
        assert abs(tt.tanh(Tensor([1.0])).data[0] - 0.7615941559557649) < 1e-15

    def test_named_dispatch(self):
        x = Tensor([0.3])
        assert tt.elementwise("tanh", x).data[0] == np.tanh(0.3)
        with pytest.raises(ValueError):
            tt.elementwise("gelu", x)


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(tt.sum_all(w))
        assert np.array_equal(w.grad, np.ones((2, 3)))

    def test_quadratic_gives_w(self):
        w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        loss = tt.affine(tt.sum_all(tt.mul(w, w)), 0.5)
        backward(loss)
        assert np.allclose(w.grad, w.data)

    def test_fanout_accumulates(self):
        x = Tensor(np.array(2.0).reshape(()), requires_grad=True)
        # Reuse x in two branches of the same graph.
        a = Tensor(np.full((1, 1), 2.0), requires_grad=True)
        y = tt.add(tt.mul(a, a), a)  # a^2 + a -> grad 2a + 1 = 5
        backward(tt.sum_all(y))
        assert a.grad[0, 0] == 5.0
        assert x.grad is None

    def test_nonscalar_loss_rejected(self):
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(GraphError):
            backward(tt.add(w, w))

    def test_unused_params_get_zero_via_collect(self):
        w = Tensor(np.ones(3), requires_grad=True)
        u = Tensor(np.ones(3), requires_grad=True)
        backward(tt.sum_all(w))
        grads = tt.collect_grads({"w": w, "u": u})
        assert np.array_equal(grads["u"], np.zeros(3))

    def test_replay_bit_identical(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((5, 5))
        b = rng.standard_normal((5, 5))

        def run():
            ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
            out = tt.sum_all(tt.sigmoid(tt.matmul(ta, tb)))
            backward(out)
            return out.data.copy(), ta.grad.copy(), tb.grad.copy()

        r1, r2 = run(), run()
        assert np.array_equal(r1[0], r2[0])
        assert np.array_equal(r1[1], r2[1])
        assert np.array_equal(r1[2], r2[2])


class TestGradCheck:
    def test_linear_is_exact(self):
        w = Tensor(np.linspace(-1, 1, 12).reshape(3, 4), requires_grad=True)
        c = np.random.default_rng(5).standard_normal((3, 4))
        err = grad_check(lambda: tt.sum_all(tt.mul_const(w, c)), {"w": w}, eps=1e-3)
        assert err < 1e-10

    def test_composite_ops(self):
        rng = np.random.default_rng(6)
        w = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        g = Tensor(rng.standard_normal(5), requires_grad=True)
        b = Tensor(rng.standard_normal(5), requires_grad=True)
        x = rng.standard_normal((6, 4))

        def f():
            h = tt.matmul(Tensor(x), w)
            h = tt.layer_norm(h, g, b)
            h = tt.scaled_softmax_rows(h, 0.7)
            return tt.mean_all(tt.tanh(h))

        err = grad_check(f, {"w": w, "g": g, "b": b}, eps=1e-5)
        assert err < 1e-4

    def test_row_column_structure_ops(self):
        rng = np.random.default_rng(7)
        w = Tensor(rng.standard_normal((5, 6)), requires_grad=True)

        def f():
            a = tt.take_cols(w, 1, 4)
            b = tt.concat_cols([a, tt.take_cols(w, 0, 2)])
            c = tt.reverse_rows(b)
            d = tt.stack_rows([tt.row(c, i) for i in range(c.shape[0])])
            e = tt.take_rows(d, 3)
            return tt.sum_all(tt.mul(e, e))

        assert grad_check(f, {"w": w}, eps=1e-5) < 1e-8

    def test_l2_normalize_rows(self):
        rng = np.random.default_rng(8)
        w = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        c = rng.standard_normal((4, 6))

        def f():
            return tt.sum_all(tt.mul_const(tt.l2_normalize_rows(w), c))

        assert grad_check(f, {"w": w}, eps=1e-5) < 1e-6
        norms = np.linalg.norm(tt.l2_normalize_rows(w).data, axis=1)
        assert np.all(np.abs(norms - 1.0) < 1e-12)

    def test_clamp_and_log(self):
        w = Tensor(np.array([[0.2, 0.8], [0.4, 0.6]]), requires_grad=True)

        def f():
            return tt.mean_all(tt.log(tt.clamp(w, 1e-7, 1 - 1e-7)))

        assert grad_check(f, {"w": w}, eps=1e-6) < 1e-6


def test_nonfinite_leaf_rejected():
    with pytest.raises(NumericError):
        Tensor([np.inf, 1.0])
