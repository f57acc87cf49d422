import numpy as np
import pytest
from scipy.signal import correlate2d

from lvit import tensor as T
from lvit.tensor import ShapeError, Tensor, backward, finite_diff_check

# finite-difference tolerance for single ops in 64-bit
OP_TOL = 1e-6


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal(T.add(t64([1, 2]), t64([3, 4])).data, [4, 6])

    def test_relu(self):
        np.testing.assert_array_equal(T.relu(t64([-1, 0, 2])).data, [0, 0, 2])

    def test_sigmoid_zero(self):
        assert T.sigmoid(t64(0.0)).item() == 0.5

    def test_sigmoid_extremes_finite(self):
        out = T.sigmoid(t64([-1000.0, 1000.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [0.0, 1.0])

    def test_exp_clamps_instead_of_overflowing(self):
        assert np.isfinite(T.exp(t64([1e6])).data).all()

    def test_log_of_nonpositive_raises(self):
        with pytest.raises(ValueError):
            T.log(t64([0.0, 1.0]))

    def test_division_by_exact_zero(self):
        with pytest.raises(ZeroDivisionError):
            T.div(t64([1.0]), t64([0.0]))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
            T.add(t64([1, 2]), t64([1, 2, 3]))

    def test_broadcast_trailing_rule(self):
        out = T.add(t64(np.ones((2, 3))), t64([1, 2, 3]))
        np.testing.assert_array_equal(out.data, [[2, 3, 4], [2, 3, 4]])

    def test_default_dtype_is_float32(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32


class TestMatmul:
    def test_identity(self):
        m = t64([[1, 2], [3, 4]])
        np.testing.assert_array_equal(T.matmul(t64(np.eye(2)), m).data, m.data)

    def test_small_product(self):
        assert T.matmul(t64([[1, 2]]), t64([[3], [4]])).data.tolist() == [[11]]

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))

    def test_grad_is_ones_times_b_transpose(self):
        rng = np.random.default_rng(0)
        a, b = t64(rng.normal(size=(3, 4)), True), t64(rng.normal(size=(4, 2)))
        backward(T.sum(T.matmul(a, b)))
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)
        assert finite_diff_check(lambda x: T.sum(T.matmul(x, b)), a) < 1e-8


class TestConv:
    def test_scaling_kernel(self):
        x = t64([[[[1, 2], [3, 4]]]])
        out = T.conv2d(x, t64([[[[2.0]]]]))
        np.testing.assert_array_equal(out.data[0, 0], [[2, 4], [6, 8]])

    def test_delta_kernel_is_identity(self):
        x = t64(np.random.default_rng(1).normal(size=(2, 1, 5, 5)))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1
        np.testing.assert_array_equal(T.conv2d(x, t64(k), padding=1).data, x.data)

    def test_diagonal_kernel(self):
        out = T.conv2d(t64([[[[1, 2], [3, 4]]]]), t64([[[[1, 0], [0, 1]]]]))
        assert out.data.tolist() == [[[[5.0]]]]

    def test_matches_scipy_correlation(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 3, 7, 6))
        k = rng.normal(size=(2, 3, 3, 3))
        out = T.conv2d(t64(x), t64(k), padding=1).data
        for o in range(2):
            ref = sum(correlate2d(np.pad(x[0, c], 1), k[o, c], mode="valid") for c in range(3))
            np.testing.assert_allclose(out[0, o], ref, atol=1e-12)

    def test_stride(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 1, 6, 6))
        k = rng.normal(size=(1, 1, 2, 2))
        full = T.conv2d(t64(x), t64(k)).data
        np.testing.assert_allclose(T.conv2d(t64(x), t64(k), stride=2).data, full[:, :, ::2, ::2])

    def test_bad_stride_and_oversized_kernel(self):
        x = t64(np.ones((1, 1, 3, 3)))
        with pytest.raises(ValueError):
            T.conv2d(x, t64(np.ones((1, 1, 2, 2))), stride=0)
        with pytest.raises(ShapeError):
            T.conv2d(x, t64(np.ones((1, 1, 5, 5))))

    @pytest.mark.parametrize("mode", ["zero", "circular", "edge"])
    def test_weight_and_input_gradients(self, mode):
        rng = np.random.default_rng(4)
        x = t64(rng.normal(size=(2, 2, 5, 5)), True)
        k = t64(rng.normal(size=(3, 2, 3, 3)), True)
        r = rng.normal(size=(2, 3, 5, 5))
        # linear in each argument: no truncation error, so a wide step only cuts roundoff
        assert finite_diff_check(lambda w: T.sum(T.conv2d(x, w, padding=1, mode=mode) * t64(r)), k, 1e-4) < OP_TOL
        assert finite_diff_check(lambda v: T.sum(T.conv2d(v, k, padding=1, mode=mode) * t64(r)), x, 1e-4) < OP_TOL

    def test_circular_padding_shift_commutes(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 1, 8, 8))
        k = t64(rng.normal(size=(1, 1, 3, 3)))
        base = T.conv2d(t64(x), k, padding=1, mode="circular").data
        shifted = T.conv2d(t64(np.roll(x, (2, -3), axis=(2, 3))), k, padding=1, mode="circular").data
        np.testing.assert_array_equal(shifted, np.roll(base, (2, -3), axis=(2, 3)))


class TestPoolAndResample:
    def test_maxpool_value_and_grad(self):
        x = t64([[[[1, 2], [3, 4]]]], True)
        out = T.maxpool2d(x, 2)
        assert out.data.tolist() == [[[[4.0]]]]
        backward(T.sum(out))
        np.testing.assert_array_equal(x.grad[0, 0], [[0, 0], [0, 1]])

    def test_maxpool_ties_go_to_first(self):
        x = t64(np.full((1, 1, 2, 2), 3.0), True)
        backward(T.sum(T.maxpool2d(x, 2)))
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])

    def test_maxpool_constant_field(self):
        out = T.maxpool2d(t64(np.full((1, 2, 4, 4), 0.7)), 2)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 2), 0.7))

    def test_maxpool_indivisible(self):
        with pytest.raises(ShapeError):
            T.maxpool2d(t64(np.ones((1, 1, 3, 4))), 2)

    def test_upsample_identity_and_constant(self):
        x = t64(np.random.default_rng(6).normal(size=(1, 2, 3, 3)))
        np.testing.assert_array_equal(T.upsample_bilinear(x, 1).data, x.data)
        c = T.upsample_bilinear(t64(np.full((1, 1, 3, 3), 2.5)), 4).data
        np.testing.assert_allclose(c, 2.5, atol=1e-12)
        one = T.upsample_bilinear(t64([[[[1.5]]]]), 2).data
        np.testing.assert_allclose(one, np.full((1, 1, 2, 2), 1.5))

    def test_upsample_factor_below_one(self):
        with pytest.raises(ValueError):
            T.upsample_bilinear(t64(np.ones((1, 1, 2, 2))), 0)

    def test_maxpool_of_upsampled_constant(self):
        x = t64(np.full((1, 1, 4, 4), -1.25))
        np.testing.assert_allclose(T.maxpool2d(T.upsample_bilinear(x, 2), 2).data, x.data)

    def test_resample_gradients(self):
        x = t64(np.random.default_rng(7).normal(size=(1, 1, 3, 4)), True)
        r = t64(np.random.default_rng(8).normal(size=(1, 1, 6, 8)))
        assert finite_diff_check(lambda v: T.sum(T.upsample_bilinear(v, 2) * r), x, 1e-4) < OP_TOL


class TestSoftmax:
    def test_values(self):
        np.testing.assert_allclose(T.softmax(t64([0.0, 0.0])).data, [0.5, 0.5])
        np.testing.assert_allclose(T.softmax(t64([np.log(2.0), 0.0])).data, [2 / 3, 1 / 3])

    def test_shift_invariance(self):
        x = np.random.default_rng(9).normal(size=(3, 5))
        np.testing.assert_allclose(T.softmax(t64(x + 17.0)).data, T.softmax(t64(x)).data, atol=1e-15)

    def test_rows_sum_to_one(self):
        x = np.random.default_rng(10).normal(scale=30, size=(4, 7)).astype(np.float32)
        s = T.softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-6)
        assert np.all((s >= 0) & (s <= 1))

    def test_invalid_axis(self):
        with pytest.raises(ValueError):
            T.softmax(t64([1.0, 2.0]), axis=3)

    def test_fused_attention_matches_composed_softmax(self):
        rng = np.random.default_rng(11)
        q, k, v = (t64(rng.normal(size=(2, 3, 5, 4)), True) for _ in range(3))
        fused = T.attention(q, k, v, 0.5).data
        w = T.softmax(T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * 0.5, axis=-1)
        np.testing.assert_allclose(fused, T.matmul(w, v).data, atol=1e-12)
        r = t64(rng.normal(size=(2, 3, 5, 4)))
        for x in (q, k, v):
            def f(z, x=x):
                args = [z if y is x else y for y in (q, k, v)]
                return T.sum(T.attention(*args, 0.5) * r)
            assert finite_diff_check(f, x, 1e-5) < OP_TOL


class TestBackward:
    def test_square(self):
        x = t64(3.0, True)
        backward(x * x)
        assert x.grad == 6.0

    def test_relu_subgradient(self):
        x = t64([-1.0, 2.0], True)
        backward(T.sum(T.relu(x)))
        np.testing.assert_array_equal(x.grad, [0, 1])

    def test_non_scalar_loss(self):
        with pytest.raises(ShapeError):
            backward(t64([1.0, 2.0], True) * 2)

    def test_shared_node_accumulates(self):
        x = t64(2.0, True)
        y = x * x
        backward(y + y * 3)
        assert x.grad == pytest.approx(16.0)

    def test_tape_is_topological_and_unique(self):
        x = t64([1.0, 2.0], True)
        h = T.relu(x) * x
        loss = T.sum(h + h)
        tape = T.Tape.from_output(loss)
        ids = [t.id for t in tape.nodes]
        assert len(ids) == len(set(ids))
        pos = {t.id: i for i, t in enumerate(tape.nodes)}
        for node in tape.nodes:
            for parent in node._parents:
                if parent.requires_grad:
                    assert pos[parent.id] < pos[node.id]

    def test_grad_shapes_match_values(self):
        rng = np.random.default_rng(12)
        w = t64(rng.normal(size=(3, 2, 3, 3)), True)
        b = t64(rng.normal(size=(3,)), True)
        x = t64(rng.normal(size=(2, 2, 6, 6)))
        backward(T.mean(T.conv2d(x, w, b, padding=1)))
        assert w.grad.shape == w.shape and b.grad.shape == b.shape

    def test_no_grad_builds_no_graph(self):
        x = t64([1.0], True)
        with T.no_grad():
            y = x * 2
        assert not y.requires_grad


class TestFiniteDiff:
    def test_sum(self):
        x = t64(np.random.default_rng(13).normal(size=(4, 3)), True)
        assert finite_diff_check(T.sum, x) < 1e-8

    def test_sum_of_squares(self):
        x = t64(np.random.default_rng(14).normal(size=(5,)), True)
        assert finite_diff_check(lambda v: T.sum(v * v), x) < 1e-5

    @pytest.mark.parametrize("op", [T.sigmoid, T.tanh, T.gelu, T.exp, lambda v: T.sqrt(v * v + 1.0)])
    def test_smooth_unary_ops(self, op):
        x = t64(np.random.default_rng(15).normal(size=(6,)), True)
        assert finite_diff_check(lambda v: T.sum(op(v) * v), x) < OP_TOL

    def test_reductions_and_reshapes(self):
        rng = np.random.default_rng(16)
        x = t64(rng.normal(size=(2, 3, 4)), True)
        r = rng.normal(size=(3, 2))

        def f(v):
            m = T.amax(v, axis=2)
            return T.sum(T.transpose(T.reshape(T.mean(v, 2, keepdims=True), (2, 3)), (1, 0)) * t64(r)) + T.sum(m)

        assert finite_diff_check(f, x) < OP_TOL

    def test_concat_take_getitem(self):
        x = t64(np.random.default_rng(17).normal(size=(4, 3)), True)

        def f(v):
            c = T.concat([v, v * 2], axis=1)
            return T.sum(T.take(c, [0, 3, 3], axis=0) * 1.5) + T.sum(v[1:3] * v[1:3])

        assert finite_diff_check(f, x) < OP_TOL

    def test_invalid_eps(self):
        with pytest.raises(ValueError):
            finite_diff_check(T.sum, t64([1.0], True), eps=0)
