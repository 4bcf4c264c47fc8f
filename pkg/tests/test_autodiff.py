"""Unit tests for the tensor/autodiff core: examples, closed forms, grads."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actionvae import autodiff as ad
from actionvae.autodiff import (ConvKernel, DimensionError, ParameterError,
                                Tape, Tensor)

from oracles import kl_monte_carlo


def kernel(w, b):
    return ConvKernel(Tensor(np.asarray(w, dtype=float)),
                      Tensor(np.asarray(b, dtype=float)))


class TestConv3d:
    def test_zero_input_gives_bias(self):
        rng = np.random.default_rng(0)
        k = kernel(rng.standard_normal((3, 2, 2, 2, 2)), [1.0, -2.0, 0.5])
        out = ad.conv3d(Tensor(np.zeros((2, 4, 4, 4))), k, (1, 1, 1), (0, 0, 0))
        for o, b in enumerate([1.0, -2.0, 0.5]):
            np.testing.assert_array_equal(out.data[o], b)

    def test_identity_kernel(self):
        x = Tensor(np.random.default_rng(1).standard_normal((1, 3, 5, 5)))
        k = kernel(np.ones((1, 1, 1, 1, 1)), [0.0])
        out = ad.conv3d(x, k, (1, 1, 1), (0, 0, 0))
        np.testing.assert_array_equal(out.data, x.data)

    def test_channel_mismatch_raises(self):
        k = kernel(np.ones((1, 3, 1, 1, 1)), [0.0])
        with pytest.raises(DimensionError):
            ad.conv3d(Tensor(np.zeros((2, 4, 4, 4))), k, (1, 1, 1), (0, 0, 0))

    def test_kernel_larger_than_input_raises(self):
        k = kernel(np.ones((1, 1, 5, 1, 1)), [0.0])
        with pytest.raises(DimensionError):
            ad.conv3d(Tensor(np.zeros((1, 2, 4, 4))), k, (1, 1, 1), (0, 0, 0))


class TestDeconv3d:
    def test_zero_input_gives_bias(self):
        rng = np.random.default_rng(2)
        k = kernel(rng.standard_normal((2, 3, 2, 2, 2)), [0.5, -1.0, 2.0])
        out = ad.deconv3d(Tensor(np.zeros((2, 2, 3, 3))), k,
                          (1, 1, 1), (0, 0, 0), (3, 4, 4))
        for c, b in enumerate([0.5, -1.0, 2.0]):
            np.testing.assert_array_equal(out.data[c], b)

    def test_identity_kernel(self):
        x = Tensor(np.random.default_rng(3).standard_normal((1, 2, 4, 4)))
        k = kernel(np.ones((1, 1, 1, 1, 1)), [0.0])
        out = ad.deconv3d(x, k, (1, 1, 1), (0, 0, 0), (2, 4, 4))
        np.testing.assert_array_equal(out.data, x.data)

    def test_inconsistent_output_dims_raise(self):
        k = kernel(np.ones((1, 1, 2, 2, 2)), [0.0])
        with pytest.raises(DimensionError):
            ad.deconv3d(Tensor(np.zeros((1, 2, 2, 2))), k,
                        (1, 1, 1), (0, 0, 0), (9, 9, 9))


class TestAffine:
    def test_identity(self):
        x = Tensor([1.0, 2.0, 3.0])
        out = ad.affine(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_weight_gives_bias(self):
        out = ad.affine(Tensor([5.0, 6.0]), Tensor(np.zeros((3, 2))),
                        Tensor([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(out.data, [1.0, 2.0, 3.0])

    def test_mismatch_raises(self):
        with pytest.raises(DimensionError):
            ad.affine(Tensor([1.0]), Tensor(np.zeros((2, 3))),
                      Tensor(np.zeros(2)))


class TestActivation:
    def test_relu(self):
        out = ad.activation(Tensor([-1.0, 0.0, 2.0]), "relu")
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_sigmoid_at_zero(self):
        assert ad.activation(Tensor([0.0]), "sigmoid").data[0] == 0.5

    def test_sigmoid_gradient_at_zero(self):
        x = Tensor([0.0], requires_grad=True)
        Tape().backward(ad.tsum(ad.activation(x, "sigmoid")))
        assert abs(x.grad[0] - 0.25) < 1e-12
        err = ad.grad_check(
            lambda t: ad.tsum(ad.activation(t, "sigmoid")),
            [Tensor([0.0])], eps=1e-5)
        assert err < 1e-8

    def test_unknown_kind(self):
        with pytest.raises(ParameterError):
            ad.activation(Tensor([0.0]), "tanh")


class TestDropout:
    def test_keep_prob_one_is_identity(self):
        x = Tensor(np.arange(10.0))
        out = ad.dropout(x, 1.0, rng_seed=0, training=True)
        np.testing.assert_array_equal(out.data, x.data)

    def test_inference_is_identity(self):
        x = Tensor(np.arange(10.0))
        out = ad.dropout(x, 0.3, rng_seed=0, training=False)
        np.testing.assert_array_equal(out.data, x.data)

    def test_kept_fraction_and_expectation(self):
        x = Tensor(np.ones(100_000))
        out = ad.dropout(x, 0.5, rng_seed=123, training=True)
        kept = np.count_nonzero(out.data) / x.size
        assert 0.49 <= kept <= 0.51
        assert abs(out.data.mean() - 1.0) < 0.02

    def test_bad_keep_prob(self):
        with pytest.raises(ParameterError):
            ad.dropout(Tensor([1.0]), 0.0, rng_seed=0, training=True)

    def test_deterministic_mask(self):
        x = Tensor(np.ones(1000))
        a = ad.dropout(x, 0.7, rng_seed=9, training=True).data
        b = ad.dropout(x, 0.7, rng_seed=9, training=True).data
        np.testing.assert_array_equal(a, b)


class TestSpp:
    def test_constant_input(self):
        out = ad.spp_pool(Tensor(np.full((2, 3, 8, 8), 3.5)), [4, 2, 1])
        np.testing.assert_array_equal(out.data, 3.5)
        assert out.shape == (42,)

    def test_single_bin_is_global_max(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((3, 2, 6, 6)))
        out = ad.spp_pool(x, [1])
        np.testing.assert_allclose(out.data, x.data.max(axis=(1, 2, 3)))

    def test_bin_too_large(self):
        with pytest.raises(DimensionError):
            ad.spp_pool(Tensor(np.zeros((1, 1, 3, 3))), [4])


class TestConcat:
    def test_shapes(self):
        out = ad.concat(Tensor(np.zeros(2)), Tensor(np.zeros(3)), axis=0)
        assert out.shape == (5,)

    def test_empty(self):
        x = Tensor([1.0, 2.0])
        out = ad.concat(x, Tensor(np.zeros(0)), axis=0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            ad.concat(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))),
                      axis=0)

    def test_gradient_splits(self):
        a = Tensor(np.random.default_rng(5).standard_normal(4),
                   requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        Tape().backward(ad.tsum(ad.concat(a, b, axis=0)))
        np.testing.assert_array_equal(a.grad, np.ones(4))
        np.testing.assert_array_equal(b.grad, np.ones(3))
        err = ad.grad_check(lambda x, y: ad.tsum(ad.concat(x, y, 0)),
                            [a.detach(), b.detach()])
        assert err < 1e-9


class TestSoftmax:
    def test_uniform(self):
        out = ad.softmax(Tensor(np.full(5, 2.0)))
        np.testing.assert_allclose(out.data, 0.2, atol=1e-15)

    def test_closed_form(self):
        out = ad.softmax(Tensor([0.0, math.log(3.0)]))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-14)

    def test_shift_invariance(self):
        rng = np.random.default_rng(6)
        logits = rng.standard_normal(8)
        a = ad.softmax(Tensor(logits)).data
        b = ad.softmax(Tensor(logits + 1000.0)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    @settings(max_examples=50, deadline=None)
    def test_sums_to_one(self, logits):
        p = ad.softmax(Tensor(np.array(logits))).data
        assert abs(p.sum() - 1.0) < 1e-12
        assert (p > 0).all()


class TestCrossEntropy:
    def test_one_hot_is_zero(self):
        p = Tensor([0.0, 1.0, 0.0])
        assert ad.cross_entropy(p, 1).item() == 0.0

    def test_uniform_is_log_n(self):
        p = Tensor(np.full(6, 1.0 / 6.0))
        assert abs(ad.cross_entropy(p, 3).item() - math.log(6)) < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(ParameterError):
            ad.cross_entropy(Tensor(np.full(3, 1 / 3)), 3)

    def test_softmax_ce_grad_is_p_minus_onehot(self):
        rng = np.random.default_rng(7)
        logits = Tensor(rng.standard_normal(6), requires_grad=True)
        p = ad.softmax(logits)
        Tape().backward(ad.cross_entropy(p, 2))
        want = p.data.copy()
        want[2] -= 1.0
        np.testing.assert_allclose(logits.grad, want, atol=1e-12)

    def test_gradient_check(self):
        rng = np.random.default_rng(8)
        err = ad.grad_check(
            lambda t: ad.cross_entropy(ad.softmax(t), 4),
            [Tensor(rng.standard_normal(6))])
        assert err < 1e-6


class TestMse:
    def test_equal_is_zero(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert ad.mse(x, Tensor(x.data.copy())).item() == 0.0

    def test_constant_offset(self):
        x = Tensor(np.zeros((4, 5)))
        y = Tensor(np.full((4, 5), 0.1))
        assert abs(ad.mse(x, y).item() - 0.01) < 1e-15

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.mse(Tensor(np.zeros(2)), Tensor(np.zeros(3)))

    def test_gradient(self):
        rng = np.random.default_rng(9)
        pred = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        target = Tensor(rng.standard_normal((3, 4)))
        Tape().backward(ad.mse(pred, target))
        want = 2.0 * (pred.data - target.data) / pred.size
        np.testing.assert_allclose(pred.grad, want, atol=1e-14)
        assert ad.grad_check(lambda p: ad.mse(p, target),
                             [pred.detach()]) < 1e-8


class TestKl:
    def test_standard_normal_is_zero(self):
        assert ad.kl_std_normal(Tensor(np.zeros(5)),
                                Tensor(np.zeros(5))).item() == 0.0

    def test_unit_mean(self):
        assert abs(ad.kl_std_normal(Tensor([1.0]), Tensor([0.0])).item()
                   - 0.5) < 1e-15

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(10)
        mean = rng.standard_normal(12) * 0.5
        logvar = rng.standard_normal(12) * 0.5
        closed = ad.kl_std_normal(Tensor(mean), Tensor(logvar)).item()
        mc = kl_monte_carlo(mean, logvar, 1_000_000, seed=1)
        assert abs(closed - mc) / max(abs(closed), 1e-8) < 0.01

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        mean = Tensor(rng.standard_normal(6))
        logvar = Tensor(rng.standard_normal(6))
        assert ad.kl_std_normal(mean, logvar).item() >= 0.0


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(11).standard_normal((3, 4)),
                   requires_grad=True)
        Tape().backward(ad.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_self_mse_gives_zero(self):
        x = Tensor(np.random.default_rng(12).standard_normal(5),
                   requires_grad=True)
        Tape().backward(ad.mse(x, x))
        np.testing.assert_array_equal(x.grad, np.zeros(5))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(DimensionError):
            Tape().backward(x)

    def test_unreachable_parameter_has_no_grad(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = Tensor(np.ones(2), requires_grad=True)
        Tape().backward(ad.tsum(x))
        assert y.grad is None


class TestGradCheck:
    def test_linear_is_exact(self):
        rng = np.random.default_rng(13)
        w = rng.standard_normal(6)
        # larger step: central differences are exact on linear maps, so the
        # only error left is roundoff, which shrinks as eps grows
        err = ad.grad_check(lambda t: ad.tsum(ad.mul(t, Tensor(w))),
                            [Tensor(rng.standard_normal(6))], eps=1e-3)
        assert err < 1e-10

    def test_relu_off_kink(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal(8)
        x[np.abs(x) < 1e-2] = 0.5
        err = ad.grad_check(lambda t: ad.tsum(ad.activation(t, "relu")),
                            [Tensor(x)])
        assert err < 1e-6

    def test_conv_sigmoid_composite(self):
        rng = np.random.default_rng(15)
        x = Tensor(rng.standard_normal((2, 3, 4, 4)))
        w = Tensor(rng.standard_normal((2, 2, 2, 2, 2)) * 0.5)
        b = Tensor(rng.standard_normal(2) * 0.1)

        def f(xt, wt, bt):
            out = ad.conv3d(xt, ConvKernel(wt, bt), (1, 1, 1), (1, 1, 1))
            return ad.tsum(ad.activation(out, "sigmoid"))

        assert ad.grad_check(f, [x, w, b], eps=1e-5) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_every_op_grad_check(seed):
    """Gradient correctness sweep across all differentiable ops."""
    rng = np.random.default_rng(1000 + seed)
    x4 = Tensor(rng.standard_normal((2, 3, 5, 5)))
    w = Tensor(rng.standard_normal((2, 2, 2, 3, 3)) * 0.3)
    b = Tensor(rng.standard_normal(2) * 0.1)
    vec = rng.standard_normal(6)
    vec[np.abs(vec) < 1e-3] = 0.1
    v = Tensor(vec)
    target = Tensor(rng.standard_normal((2, 3, 5, 5)))

    cases = [
        (lambda t: ad.tsum(ad.conv3d(t, ConvKernel(w, b), (1, 2, 2),
                                     (1, 1, 1))), x4),
        (lambda t: ad.tsum(ad.deconv3d(
            ad.conv3d(t, ConvKernel(w, b), (1, 1, 1), (0, 0, 0)),
            ConvKernel(w, Tensor(np.zeros(2))), (1, 1, 1), (0, 0, 0),
            (3, 5, 5))), x4),
        (lambda t: ad.tsum(ad.spp_pool(t, [2, 1])), x4),
        (lambda t: ad.mse(t, target), x4),
        (lambda t: ad.tsum(ad.activation(t, "sigmoid")), v),
        (lambda t: ad.tsum(ad.activation(t, "relu")), v),
        (lambda t: ad.cross_entropy(ad.softmax(t), 1), v),
        (lambda t: ad.kl_std_normal(t, Tensor(np.zeros(6))), v),
        (lambda t: ad.kl_std_normal(Tensor(np.zeros(6)), t), v),
        (lambda t: ad.tsum(ad.exp(ad.mul(t, 0.3))), v),
        (lambda t: ad.tsum(ad.slice1d(t, 1, 4)), v),
    ]
    for f, inp in cases:
        assert ad.grad_check(f, [inp.detach()], eps=1e-5) < 1e-4
