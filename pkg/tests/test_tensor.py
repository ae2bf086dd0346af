"""Tensor/autodiff core: op semantics, tape mechanics, gradient checks."""

import numpy as np
import numpy.testing as npt
import pytest

from scopeformer import tensor as T
from scopeformer.tensor import (
    ShapeError, Tape, Tensor, add_bias, backward, clip, concat, conv2d, mul_bias,
    depthwise_conv2d, grad_check, layer_norm, matmul, reduce_mean, reduce_sum,
    reshape, slice_axis, softmax, tile, transpose,
)


# --------------------------------------------------------------------------
# independent oracles (kept loop-based and dumb on purpose)
# --------------------------------------------------------------------------

def matmul_oracle(a, b):
    """Triple-loop matrix product."""
    M, K = a.shape
    K2, N = b.shape
    assert K == K2
    out = np.zeros((M, N))
    for i in range(M):
        for j in range(N):
            for k in range(K):
                out[i, j] += a[i, k] * b[k, j]
    return out


def conv2d_oracle(x, w, stride, padding):
    """Direct sliding-window convolution, NHWC."""
    B, H, W, Cin = x.shape
    k = w.shape[0]
    p = k // 2 if padding == "same" else 0
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    Ho = (H + 2 * p - k) // stride + 1
    Wo = (W + 2 * p - k) // stride + 1
    out = np.zeros((B, Ho, Wo, w.shape[3]))
    for b in range(B):
        for i in range(Ho):
            for j in range(Wo):
                patch = xp[b, i * stride:i * stride + k, j * stride:j * stride + k, :]
                for co in range(w.shape[3]):
                    out[b, i, j, co] = np.sum(patch * w[:, :, :, co])
    return out


def depthwise_oracle(x, w, stride, padding):
    """Depthwise conv as one single-channel conv2d per channel."""
    C = x.shape[3]
    outs = []
    for c in range(C):
        xc = x[:, :, :, c:c + 1]
        wc = w[:, :, c].reshape(w.shape[0], w.shape[1], 1, 1)
        outs.append(conv2d_oracle(xc, wc, stride, padding))
    return np.concatenate(outs, axis=3)


def conv_out_extent(H, k, stride, padding):
    p = k // 2 if padding == "same" else 0
    return (H + 2 * p - k) // stride + 1


def finite_diff(f, x, h=1e-5):
    """Central differences of scalar f at every element of x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

class TestElementwise:
    def test_add(self):
        out = Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])
        npt.assert_array_equal(out.numpy(), [4.0, 6.0])

    def test_relu(self):
        out = T.relu(Tensor([-1.0, 0.0, 2.0]))
        npt.assert_array_equal(out.numpy(), [0.0, 0.0, 2.0])

    def test_sigmoid_at_zero(self):
        assert T.sigmoid(Tensor([0.0])).item() == 0.5

    def test_sub_mul(self):
        a, b = Tensor([5.0, 1.0]), Tensor([2.0, 3.0])
        npt.assert_array_equal((a - b).numpy(), [3.0, -2.0])
        npt.assert_array_equal((a * b).numpy(), [10.0, 3.0])

    def test_scale(self):
        npt.assert_array_equal(T.scale(Tensor([1.0, -2.0]), 2.5).numpy(), [2.5, -5.0])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
            Tensor([1.0, 2.0]) + Tensor([1.0, 2.0, 3.0])

    def test_output_shape_matches_input(self):
        x = Tensor(np.ones((2, 3, 4)))
        for fn in (T.relu, T.gelu, T.sigmoid):
            assert fn(x).shape == (2, 3, 4)

    def test_clip_band(self):
        out = clip(Tensor([-1.0, 0.5, 2.0]), 0.0, 1.0)
        npt.assert_array_equal(out.numpy(), [0.0, 0.5, 1.0])


# --------------------------------------------------------------------------
# matmul
# --------------------------------------------------------------------------

class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        npt.assert_array_equal(matmul(eye, b).numpy(), b.numpy())

    def test_row_sum(self):
        out = matmul(Tensor([[1.0, 2.0, 3.0]]), Tensor([[1.0], [1.0], [1.0]]))
        npt.assert_array_equal(out.numpy(), [[6.0]])

    def test_against_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        got = matmul(Tensor(a), Tensor(b)).numpy()
        npt.assert_allclose(got, matmul_oracle(a, b), atol=1e-12)

    def test_batched_matches_per_slice(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((2, 3, 3, 4))
        b = rng.standard_normal((2, 3, 4, 5))
        got = matmul(Tensor(a), Tensor(b)).numpy()
        for i in range(2):
            for j in range(3):
                npt.assert_allclose(got[i, j], matmul_oracle(a[i, j], b[i, j]), atol=1e-12)

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError, match="inner"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_leading_mismatch(self):
        with pytest.raises(ShapeError, match="leading"):
            matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((3, 4, 2))))


# --------------------------------------------------------------------------
# convolutions
# --------------------------------------------------------------------------

class TestConv2d:
    def test_pointwise_identity(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 5, 5, 3))
        w = np.eye(3).reshape(1, 1, 3, 3)
        out = conv2d(Tensor(x), Tensor(w), stride=1, padding="same")
        npt.assert_allclose(out.numpy(), x, atol=1e-15)

    def test_averaging_kernel_preserves_constant_interior(self):
        x = np.full((1, 6, 6, 1), 3.0)
        w = np.full((3, 3, 1, 1), 1.0 / 9.0)
        out = conv2d(Tensor(x), Tensor(w), stride=1, padding="same").numpy()
        npt.assert_allclose(out[0, 1:-1, 1:-1, 0], 3.0, atol=1e-12)

    def test_stride2_same_halves_224_down_to_7(self):
        h = 224
        assert conv_out_extent(h, 3, 2, "same") == 112
        for _ in range(5):
            h = conv_out_extent(h, 3, 2, "same")
        assert h == 7

    def test_matches_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 6, 5, 3))
        w = rng.standard_normal((3, 3, 3, 4))
        for stride, padding in [(1, "same"), (2, "same"), (1, "valid"), (2, "valid")]:
            got = conv2d(Tensor(x), Tensor(w), stride, padding).numpy()
            npt.assert_allclose(got, conv2d_oracle(x, w, stride, padding), atol=1e-12)

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(ShapeError, match="larger"):
            conv2d(Tensor(np.ones((1, 2, 2, 1))), Tensor(np.ones((5, 5, 1, 1))),
                   stride=1, padding="valid")

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 4, 4, 2))), Tensor(np.ones((3, 3, 3, 4))))


class TestDepthwiseConv2d:
    def test_k1_ones_is_identity(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 4, 4, 3))
        out = depthwise_conv2d(Tensor(x), Tensor(np.ones((1, 1, 3))))
        npt.assert_allclose(out.numpy(), x, atol=1e-15)

    def test_no_cross_channel_mixing(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 5, 5, 2))
        x[:, :, :, 1] = 0.0
        w = rng.standard_normal((3, 3, 2))
        out = depthwise_conv2d(Tensor(x), Tensor(w), padding="same").numpy()
        npt.assert_array_equal(out[:, :, :, 1], 0.0)

    def test_matches_per_channel_oracle(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((1, 5, 5, 2))
        w = rng.standard_normal((3, 3, 2))
        got = depthwise_conv2d(Tensor(x), Tensor(w), stride=1, padding="valid").numpy()
        npt.assert_allclose(got, depthwise_oracle(x, w, 1, "valid"), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            depthwise_conv2d(Tensor(np.ones((1, 4, 4, 2))), Tensor(np.ones((3, 3, 5))))


# --------------------------------------------------------------------------
# softmax / layer norm
# --------------------------------------------------------------------------

class TestSoftmax:
    def test_uniform(self):
        out = softmax(Tensor([7.0, 7.0, 7.0]), axis=0)
        npt.assert_allclose(out.numpy(), [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_closed_form(self):
        # e^0 / (e^0 + 2) = 1/3 and 2 / (1 + 2) = 2/3
        out = softmax(Tensor([0.0, np.log(2.0)]), axis=0)
        npt.assert_allclose(out.numpy(), [1 / 3, 2 / 3], atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((4, 6))
        a = softmax(Tensor(x), axis=1).numpy()
        b = softmax(Tensor(x + 7.0), axis=1).numpy()
        npt.assert_allclose(a, b, atol=1e-12)

    def test_probability_vector_property(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            rank = rng.integers(1, 5)
            shape = tuple(rng.integers(1, 5, size=rank))
            axis = int(rng.integers(0, rank))
            x = rng.standard_normal(shape) * 10
            out = softmax(Tensor(x), axis=axis).numpy()
            assert (out >= 0).all()
            npt.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-12)


class TestLayerNorm:
    def test_constant_slice_is_zero(self):
        x = Tensor(np.full((2, 4), 5.0))
        out = layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        npt.assert_allclose(out.numpy(), 0.0, atol=1e-12)

    def test_two_point_slice(self):
        # mean 2, population variance 1, eps-perturbed
        out = layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        npt.assert_allclose(out.numpy(), [[-1.0, 1.0]], atol=1e-5)

    def test_zero_gamma_gives_beta(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((3, 5))
        beta = rng.standard_normal(5)
        out = layer_norm(Tensor(x), Tensor(np.zeros(5)), Tensor(beta))
        npt.assert_allclose(out.numpy(), np.broadcast_to(beta, (3, 5)), atol=1e-15)

    def test_normalizes_mean_and_variance(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((6, 32)) * 3 + 1
        out = layer_norm(Tensor(x), Tensor(np.ones(32)), Tensor(np.zeros(32))).numpy()
        npt.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
        npt.assert_allclose(out.var(axis=-1), 1.0, atol=1e-3)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


# --------------------------------------------------------------------------
# structural ops
# --------------------------------------------------------------------------

class TestStructural:
    def test_concat_channel_extents_sum(self):
        maps = [Tensor(np.full((2, 7, 7, 4), i)) for i in range(3)]
        out = concat(maps, axis=3)
        assert out.shape == (2, 7, 7, 12)
        npt.assert_array_equal(out.numpy()[..., 4:8], 1.0)

    def test_concat_non_axis_mismatch(self):
        with pytest.raises(ShapeError):
            concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)

    def test_reshape_row_major(self):
        x = np.arange(7 * 7 * 3, dtype=float).reshape(7, 7, 3)
        out = reshape(Tensor(x), (49, 3))
        npt.assert_array_equal(out.numpy().reshape(-1), x.reshape(-1))

    def test_reshape_count_violation(self):
        with pytest.raises(ShapeError):
            reshape(Tensor(np.ones((2, 3))), (7,))

    def test_mean_all(self):
        assert reduce_mean(Tensor(np.ones((2, 3)))).item() == 1.0

    def test_sum_axis(self):
        out = reduce_sum(Tensor([[1.0, 2.0], [3.0, 4.0]]), axis=0)
        npt.assert_array_equal(out.numpy(), [4.0, 6.0])

    def test_transpose_roundtrip(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 3, 4))
        out = transpose(transpose(Tensor(x), (2, 0, 1)), (1, 2, 0))
        npt.assert_array_equal(out.numpy(), x)

    def test_reshape_transpose_conserve_elements(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            rank = int(rng.integers(1, 5))
            shape = tuple(int(s) for s in rng.integers(1, 5, size=rank))
            x = rng.standard_normal(shape)
            perm = tuple(rng.permutation(rank))
            t = transpose(Tensor(x), perm)
            r = reshape(Tensor(x), (x.size,))
            npt.assert_array_equal(np.sort(t.numpy(), axis=None), np.sort(x, axis=None))
            npt.assert_array_equal(np.sort(r.numpy(), axis=None), np.sort(x, axis=None))

    def test_slice_axis(self):
        x = np.arange(24, dtype=float).reshape(2, 3, 4)
        out = slice_axis(Tensor(x), axis=2, start=1, stop=3)
        npt.assert_array_equal(out.numpy(), x[:, :, 1:3])

    def test_tile(self):
        out = tile(Tensor([[1.0, 2.0]]), (3, 1))
        assert out.shape == (3, 2)
        npt.assert_array_equal(out.numpy()[2], [1.0, 2.0])

    def test_add_bias_suffix(self):
        x = np.zeros((2, 3, 4))
        b = np.arange(4, dtype=float)
        out = add_bias(Tensor(x), Tensor(b))
        npt.assert_array_equal(out.numpy()[1, 2], b)
        with pytest.raises(ShapeError):
            add_bias(Tensor(x), Tensor(np.ones(3)))

    def test_mul_bias_per_channel(self):
        x = np.ones((2, 3, 4))
        m = np.array([1.0, 2.0, 3.0, 4.0])
        out = mul_bias(Tensor(x), Tensor(m))
        npt.assert_array_equal(out.numpy()[0, 1], m)
        with pytest.raises(ShapeError):
            mul_bias(Tensor(x), Tensor(np.ones(3)))

    def test_mul_bias_gradients(self):
        rng = np.random.default_rng(44)
        x = Tensor(rng.standard_normal((2, 5, 3)), requires_grad=True)
        m = Tensor(rng.standard_normal(3), requires_grad=True)
        rep_x = grad_check(lambda v: mul_bias(v, Tensor(m.data)).sum(), x)
        rep_m = grad_check(lambda v: mul_bias(Tensor(x.data), v).sum(), m)
        assert rep_x.passed, f"max rel err {rep_x.max_rel_err}"
        assert rep_m.passed, f"max rel err {rep_m.max_rel_err}"


# --------------------------------------------------------------------------
# backward / tape
# --------------------------------------------------------------------------

class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        loss = reduce_sum(x * x)
        backward(loss)
        npt.assert_allclose(x.grad, [2.0, -4.0, 6.0], atol=1e-15)

    def test_matmul_grads_match_finite_differences(self):
        rng = np.random.default_rng(13)
        a0 = rng.standard_normal((3, 4))
        b0 = rng.standard_normal((4, 2))

        a = Tensor(a0, requires_grad=True)
        b = Tensor(b0, requires_grad=True)
        backward(reduce_sum(matmul(a, b)))

        na = finite_diff(lambda v: np.sum(v @ b0), a0.copy())
        nb = finite_diff(lambda v: np.sum(a0 @ v), b0.copy())
        assert np.abs(a.grad - na).max() / max(1.0, np.abs(na).max()) < 1e-6
        assert np.abs(b.grad - nb).max() / max(1.0, np.abs(nb).max()) < 1e-6

    def test_unreached_leaf_keeps_zero_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = Tensor([3.0], requires_grad=True)
        backward(reduce_sum(x * x))
        npt.assert_array_equal(y.grad, [0.0])

    def test_grads_accumulate_across_calls(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(reduce_sum(x * x))
        first = x.grad.copy()
        backward(reduce_sum(Tensor(x.data, requires_grad=False) * x))
        npt.assert_allclose(x.grad, first + x.data, atol=1e-15)

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            backward(x * x)

    def test_shared_subexpression_counted_once_per_path(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x          # 4
        loss = reduce_sum(y + y)   # 2x^2, d/dx = 4x = 8
        backward(loss)
        npt.assert_allclose(x.grad, [8.0], atol=1e-15)


class TestTape:
    def _random_graph(self, rng):
        leaves = [Tensor(rng.standard_normal(3), requires_grad=True) for _ in range(4)]
        a = leaves[0] + leaves[1]
        b = T.relu(leaves[2] * a)
        c = a * b + leaves[3]
        return leaves, reduce_sum(c * c)

    def test_topological_order(self):
        rng = np.random.default_rng(14)
        _, loss = self._random_graph(rng)
        tape = Tape.trace(loss)
        pos = {id(t): i for i, t in enumerate(tape.records)}
        for i, node in enumerate(tape.records):
            for p in node.parents:
                assert pos[id(p)] < i

    def test_backward_visits_each_record_exactly_once(self):
        rng = np.random.default_rng(15)
        _, loss = self._random_graph(rng)
        tape = Tape.trace(loss)
        counts = {}

        def instrument(node):
            orig = node._backward
            def wrapped(g, _node=node, _orig=orig):
                counts[id(_node)] = counts.get(id(_node), 0) + 1
                return _orig(g)
            node._backward = wrapped

        op_nodes = [n for n in tape.records if n.parents]
        for n in op_nodes:
            instrument(n)
        backward(loss)
        assert counts == {id(n): 1 for n in op_nodes}

    def test_requires_grad_off_records_no_parents(self):
        a = Tensor([1.0], requires_grad=False)
        b = Tensor([2.0], requires_grad=False)
        out = a * b
        assert out.parents == () and not out.requires_grad

    def test_no_grad_context(self):
        a = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            out = a * a
        assert out.parents == () and not out.requires_grad


# --------------------------------------------------------------------------
# grad_check
# --------------------------------------------------------------------------

class TestGradCheck:
    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(16)
        x = rng.standard_normal((3, 4))
        x[np.abs(x) < 0.1] += 0.2  # keep clear of the kink
        report = grad_check(lambda t: reduce_sum(T.relu(t)), Tensor(x))
        assert report.passed

    def test_layer_norm(self):
        rng = np.random.default_rng(17)
        gamma = Tensor(rng.standard_normal(6))
        beta = Tensor(rng.standard_normal(6))
        x = Tensor(rng.standard_normal((4, 6)))
        report = grad_check(lambda t: reduce_sum(layer_norm(t, gamma, beta)), x)
        assert report.passed

    def test_nondeterministic_function_detected(self):
        rng = np.random.default_rng(18)

        def noisy(t):
            return reduce_sum(t) + Tensor([rng.standard_normal()])

        with pytest.raises(T.NondeterministicFunctionError):
            grad_check(noisy, Tensor(np.ones(3)))

    def test_random_op_sweep(self):
        # every differentiable op on random inputs, rank <= 4, <= 512 elements
        rng = np.random.default_rng(19)

        def kinkless(shape):
            x = rng.standard_normal(shape)
            x[np.abs(x) < 0.05] += 0.1
            return Tensor(x)

        for shape in [(7,), (4, 9), (2, 3, 4), (2, 3, 2, 4)]:
            c = Tensor(rng.standard_normal(shape))
            cases = [
                lambda t: reduce_sum(t + c),
                lambda t: reduce_sum(t * c),
                lambda t: reduce_sum(T.relu(t)),
                lambda t: reduce_sum(T.gelu(t)),
                lambda t: reduce_sum(T.sigmoid(t)),
                lambda t: reduce_sum(T.scale(t, -1.7)),
                lambda t: reduce_sum(softmax(t, axis=-1) * c),
                lambda t: reduce_mean(t, axis=0).sum(),
            ]
            for f in cases:
                assert grad_check(f, kinkless(shape)).passed
