import numpy as np
import pytest

from smta.autodiff import (
    Tensor,
    backward,
    conv2d,
    finite_difference_gradient,
    linear,
    softmax_channel,
)

from netzoo import random_net, rel_err


def matmul_oracle(a, b):
    """Independent triple-loop matrix multiply."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def conv_oracle(x, k, b):
    """Independent six-loop same-padded 3x3 cross-correlation."""
    c, h, w = x.shape
    f = k.shape[0]
    out = np.zeros((f, h, w))
    for fi in range(f):
        for i in range(h):
            for j in range(w):
                acc = b[fi]
                for ci in range(c):
                    for u in range(3):
                        for v in range(3):
                            ii, jj = i + u - 1, j + v - 1
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += x[ci, ii, jj] * k[fi, ci, u, v]
                out[fi, i, j] = acc
    return out


class TestLinear:
    def test_identity_like_product(self):
        y = linear(Tensor([[1.0, 0.0]]), Tensor([[2.0, 0.0], [0.0, 3.0]]), Tensor([0.0, 0.0]))
        assert np.array_equal(y.data, [[2.0, 0.0]])

    def test_zero_input_passes_bias(self):
        w = Tensor(np.random.default_rng(0).normal(size=(2, 2)))
        y = linear(Tensor([[0.0, 0.0]]), w, Tensor([5.0, -1.0]))
        assert np.array_equal(y.data, [[5.0, -1.0]])

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(42)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        bias = rng.normal(size=(2,))
        y = linear(Tensor(a), Tensor(b), Tensor(bias))
        assert np.allclose(y.data, matmul_oracle(a, b) + bias, atol=1e-12)

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(ValueError, match=r"expected x\[\*,3\]"):
            linear(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 2))), Tensor(np.zeros(2)))


class TestConv2d:
    def test_zero_input_gives_bias(self):
        rng = np.random.default_rng(1)
        k = Tensor(rng.normal(size=(3, 2, 3, 3)))
        y = conv2d(Tensor(np.zeros((2, 4, 4))), k, Tensor([1.0, -2.0, 0.5]))
        for f, bv in enumerate([1.0, -2.0, 0.5]):
            assert np.all(y.data[f] == bv)

    def test_identity_kernel_reproduces_input(self):
        x = np.random.default_rng(2).normal(size=(1, 5, 5))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        y = conv2d(Tensor(x), Tensor(k), Tensor([0.0]))
        assert np.allclose(y.data, x, atol=1e-15)

    def test_matches_direct_loop_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=(3,))
        y = conv2d(Tensor(x), Tensor(k), Tensor(b))
        assert np.allclose(y.data, conv_oracle(x, k, b), atol=1e-12)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ValueError, match="channel mismatch"):
            conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((3, 1, 3, 3))), Tensor(np.zeros(3)))


class TestRelu:
    def test_values(self):
        y = Tensor([-1.0, 0.0, 2.0]).relu()
        assert np.array_equal(y.data, [0.0, 0.0, 2.0])

    def test_all_negative_is_zero(self):
        assert np.all(Tensor([-3.0, -0.1]).relu().data == 0.0)

    def test_subgradient_convention(self):
        x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
        grads = backward(x.relu().sum())
        assert np.array_equal(grads[x], [0.0, 0.0, 1.0])


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        assert np.array_equal(backward(x.sum())[x], [1.0, 1.0, 1.0])

    def test_half_sum_of_squares(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        grads = backward(((x * x).sum()) * 0.5)
        assert np.allclose(grads[x], [1.0, -2.0, 3.0], atol=1e-15)

    def test_non_scalar_root_raises(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            backward(x * 2.0)

    def test_two_layer_net_matches_finite_differences(self):
        leaves, f = random_net(0)
        grads = backward(f())
        for leaf in leaves:
            fd = finite_difference_gradient(f, leaf, h=1e-4)
            assert rel_err(grads[leaf], fd).max() < 1e-4

    def test_shared_leaf_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = (x * x + x * 3.0).sum()
        assert np.allclose(backward(y)[x], [7.0])


class TestFiniteDifference:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(5).normal(size=(4,)))
        fd = finite_difference_gradient(lambda t: t.sum(), x, h=1e-4)
        assert np.all(np.abs(fd - 1.0) < 1e-8)

    def test_square_at_three(self):
        fd = finite_difference_gradient(lambda t: (t * t).sum(), Tensor([3.0]), h=1e-4)
        assert abs(fd[0] - 6.0) < 1e-6

    def test_nonpositive_h_rejected(self):
        with pytest.raises(ValueError):
            finite_difference_gradient(lambda t: t.sum(), Tensor([1.0]), h=0.0)

    def test_agrees_with_backward_on_composites(self):
        for seed in range(6):
            leaves, f = random_net(seed)
            grads = backward(f())
            worst = max(
                rel_err(grads[leaf], finite_difference_gradient(f, leaf, h=1e-4)).max()
                for leaf in leaves
            )
            assert worst < 1e-4, f"seed {seed}: max relative error {worst}"


class TestProperties:
    def test_backward_linearity(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        a, b = 2.5, -1.25

        def f_loss():
            return (x * x).sum()

        def g_loss():
            return (x * 3.0).exp().mean()

        gf = backward(f_loss())[x]
        gg = backward(g_loss())[x]
        combined = backward(f_loss() * a + g_loss() * b)[x]
        assert np.abs(combined - (a * gf + b * gg)).max() < 1e-10

    def test_determinism_bit_identical(self):
        def run():
            rng = np.random.default_rng(11)
            x = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
            k = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
            b = Tensor(rng.normal(size=(2,)), requires_grad=True)
            y = softmax_channel(conv2d(x, k, b).relu()).log().mean()
            g = backward(y)
            return y.data.copy(), {t._op: v for t, v in zip((x, k, b), (g[x], g[k], g[b]))}

        y1, g1 = run()
        y2, g2 = run()
        assert np.array_equal(y1, y2)
        for key in g1:
            assert np.array_equal(g1[key], g2[key])

    def test_forward_stays_finite(self):
        for seed in range(4):
            leaves, f = random_net(seed)
            assert np.isfinite(f().item())

    def test_softmax_channel_sums_to_one(self):
        x = Tensor(np.random.default_rng(13).normal(size=(4, 3, 3)) * 5.0)
        s = softmax_channel(x)
        assert np.allclose(s.data.sum(axis=0), 1.0, atol=1e-12)

    def test_repeated_backward_is_pure(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = (x * x).sum()
        g1 = backward(y)[x]
        g2 = backward(y)[x]
        assert np.array_equal(g1, g2)
