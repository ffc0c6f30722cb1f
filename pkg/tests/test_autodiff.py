"""Operator-level tests for the autodiff engine, oracle values frozen first."""

import numpy as np
import pytest

from patchdenoiser import autodiff as ad
from patchdenoiser.autodiff import Tensor
from patchdenoiser.errors import DimensionError, UsageError

from oracles import (bilinear_up2_2d, conv2d_loops, l1_loss_loops,
                     sigmoid_scalar)


class TestConv2d:
    def test_all_ones_zero_padding_sums(self):
        x = Tensor(np.ones((1, 1, 4, 4)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        out = ad.conv2d(x, w, b, stride=1, padding=1).data[0, 0]
        assert out[1, 1] == 9.0
        assert out[2, 2] == 9.0
        assert out[0, 0] == 4.0
        assert out[3, 3] == 4.0

    def test_identity_kernel_is_bit_exact(self, rng):
        x = rng.standard_normal((2, 3, 8, 8))
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)), 1, 1)
        assert np.array_equal(out.data, x)

    def test_strided_matches_loop_oracle(self, rng):
        x = rng.standard_normal((1, 2, 8, 8))
        w = rng.standard_normal((4, 2, 3, 3))
        b = rng.standard_normal(4)
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1)
        assert out.data.shape == (1, 4, 4, 4)
        expected = conv2d_loops(x, w, b, stride=2, padding=1)
        np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 2), (2, 1), (3, 2)])
    def test_output_dims_formula(self, rng, stride, padding):
        x = rng.standard_normal((1, 1, 9, 9))
        w = rng.standard_normal((2, 1, 3, 3))
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(2)), stride, padding)
        expected = (9 + 2 * padding - 3) // stride + 1
        assert out.data.shape == (1, 2, expected, expected)

    def test_channel_mismatch_names_axis(self):
        x = Tensor(np.zeros((1, 3, 4, 4)))
        w = Tensor(np.zeros((2, 2, 3, 3)))
        with pytest.raises(DimensionError, match="axis 1"):
            ad.conv2d(x, w, Tensor(np.zeros(2)), 1, 1)

    def test_kernel_too_large(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        w = Tensor(np.zeros((1, 1, 5, 5)))
        with pytest.raises(DimensionError, match="fit"):
            ad.conv2d(x, w, Tensor(np.zeros(1)), 1, 0)


class TestUpsample2x:
    def test_single_pixel_replicates(self):
        out = ad.upsample2x(Tensor(np.full((1, 1, 1, 1), 5.0)))
        assert np.array_equal(out.data, np.full((1, 1, 2, 2), 5.0))

    def test_ramp_matches_scalar_oracle(self):
        x = np.array([[0.0, 1.0], [0.0, 1.0]])
        out = ad.upsample2x(Tensor(x[None, None]))
        np.testing.assert_allclose(out.data[0, 0], bilinear_up2_2d(x), atol=1e-15)
        for row in out.data[0, 0]:
            np.testing.assert_allclose(row, [0.0, 0.25, 0.75, 1.0], atol=1e-15)

    def test_random_matches_scalar_oracle(self, rng):
        x = rng.standard_normal((5, 7))
        out = ad.upsample2x(Tensor(x[None, None]))
        np.testing.assert_allclose(out.data[0, 0], bilinear_up2_2d(x), atol=1e-12)

    def test_constant_invariance(self, rng):
        c = 0.73
        out = ad.upsample2x(Tensor(np.full((1, 2, 3, 3), c)))
        assert out.data.shape == (1, 2, 6, 6)
        np.testing.assert_allclose(out.data, c, atol=1e-15)


class TestPointwise:
    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(Tensor(np.zeros(1))).data[0] == 0.5

    def test_sigmoid_matches_scalar_oracle(self):
        xs = np.array([-2.0, -1.0, 1.0, 2.0])
        out = ad.sigmoid(Tensor(xs)).data
        for got, x in zip(out, xs):
            assert abs(got - sigmoid_scalar(x)) < 1e-15

    def test_relu(self):
        out = ad.relu(Tensor(np.array([-3.2, 0.0, 3.2]))).data
        np.testing.assert_array_equal(out, [0.0, 0.0, 3.2])

    def test_binary_shape_mismatch(self):
        with pytest.raises(DimensionError, match="axis"):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))
        with pytest.raises(DimensionError):
            ad.mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))))

    def test_scale(self, rng):
        x = rng.standard_normal((3, 3))
        np.testing.assert_allclose(ad.scale(Tensor(x), -2.5).data, -2.5 * x)


class TestL1Loss:
    def test_identical_is_zero(self, rng):
        x = rng.standard_normal((4, 4))
        assert ad.l1_loss(Tensor(x), Tensor(x.copy())).item() == 0.0

    def test_constant_offset(self, rng):
        x = rng.standard_normal((4, 4))
        loss = ad.l1_loss(Tensor(x + 0.1), Tensor(x))
        assert abs(loss.item() - 0.1) < 1e-12

    def test_matches_loop_oracle(self, rng):
        a = rng.standard_normal((3, 5))
        b = rng.standard_normal((3, 5))
        loss = ad.l1_loss(Tensor(a), Tensor(b))
        assert abs(loss.item() - l1_loss_loops(a, b)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.l1_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


class TestBackward:
    def test_linear_case_grad_equals_coefficient(self, rng):
        x = rng.standard_normal((2, 3))
        w = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        # sum(w * x) expressed as N * mean; the far-negative target keeps
        # every sign at +1, so the loss is linear in w and grad(w) == x.
        prod = ad.mul(w, Tensor(x))
        loss = ad.scale(ad.l1_loss(prod, Tensor(np.full((2, 3), -1e9))), x.size)
        loss.backward()
        np.testing.assert_allclose(w.grad, x, atol=1e-9)

    def test_non_scalar_loss_rejected(self):
        t = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(UsageError, match="scalar"):
            ad.add(t, t).backward()

    def test_fanout_gradients_accumulate(self, rng):
        w = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        a = Tensor(rng.standard_normal((3, 3)))
        b = Tensor(rng.standard_normal((3, 3)))
        # w appears on two paths; grad must be the sum of both path grads.
        out = ad.add(ad.mul(w, a), ad.mul(w, b))
        loss = ad.l1_loss(out, Tensor(np.full((3, 3), -1e9)))
        loss.backward()
        np.testing.assert_allclose(w.grad, (a.data + b.data) / 9.0, atol=1e-12)

    def test_conv_l1_composition_matches_finite_differences(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(3), requires_grad=True)
        target = Tensor(rng.standard_normal((1, 3, 6, 6)))

        def f():
            return ad.l1_loss(ad.conv2d(x, w, b, 1, 1), target)

        assert ad.check_gradients(f, [x, w, b], h=1e-5) < 1e-4

    def test_gradients_accumulate_across_backward_calls(self, rng):
        w = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        target = Tensor(np.full((2, 2), -1e9))
        for expected_scale in (1, 2):
            loss = ad.l1_loss(w, target)
            loss.backward()
            np.testing.assert_allclose(w.grad, expected_scale * np.full((2, 2), 0.25),
                                       atol=1e-12)


class TestRearrangeOps:
    def test_reshape_transpose_round_trip_gradient(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)

        def f():
            t = ad.transpose(ad.reshape(x, (2, 12)), (1, 0))
            return ad.l1_loss(t, Tensor(np.zeros((12, 2))))

        assert ad.check_gradients(f, [x]) < 1e-4

    def test_take_rows_permutation_and_gradient(self, rng):
        x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        order = [2, 0, 3, 1]
        out = ad.take_rows(x, order)
        np.testing.assert_array_equal(out.data, x.data[order])

        def f():
            return ad.l1_loss(ad.take_rows(x, order), Tensor(np.zeros((4, 3))))

        assert ad.check_gradients(f, [x]) < 1e-4

    def test_crop2d_and_gradient(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 5, 6)), requires_grad=True)
        out = ad.crop2d(x, 3, 4)
        np.testing.assert_array_equal(out.data, x.data[:, :, :3, :4])

        def f():
            return ad.l1_loss(ad.crop2d(x, 3, 4), Tensor(np.zeros((1, 2, 3, 4))))

        assert ad.check_gradients(f, [x]) < 1e-4

    def test_concat_and_gradient(self, rng):
        a = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((1, 4, 3, 3)), requires_grad=True)
        out = ad.concat([a, b], axis=1)
        assert out.data.shape == (1, 6, 3, 3)

        def f():
            return ad.l1_loss(ad.concat([a, b], axis=1),
                              Tensor(np.zeros((1, 6, 3, 3))))

        assert ad.check_gradients(f, [a, b]) < 1e-4

    def test_concat_dim_mismatch(self):
        with pytest.raises(DimensionError):
            ad.concat([Tensor(np.zeros((1, 2, 3, 3))),
                       Tensor(np.zeros((1, 2, 4, 3)))], axis=1)


class TestNoGrad:
    def test_no_graph_is_built(self, rng):
        w = Tensor(rng.standard_normal((1, 1, 3, 3)), requires_grad=True)
        x = Tensor(rng.standard_normal((1, 1, 4, 4)))
        with ad.no_grad():
            out = ad.conv2d(x, w, Tensor(np.zeros(1)), 1, 1)
        assert out._parents == ()
        assert not out.requires_grad
