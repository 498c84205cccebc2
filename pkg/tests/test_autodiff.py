import numpy as np
import pytest

from protosep import autodiff as ad
from protosep.autodiff import Tensor

from gradcheck_battery import run_battery


class TestPrimitiveValues:
    def test_relu_definition(self):
        assert np.array_equal(ad.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_log_ratio_at_zero(self):
        out = ad.log_ratio(Tensor(0.0), 1e-5)
        assert out.data == pytest.approx(np.log(1e5), abs=1e-9)
        assert out.data == pytest.approx(11.512925, abs=1e-6)

    def test_conv2d_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((5, 6, 3))
        kern = np.eye(3).reshape(1, 1, 3, 3)
        out = ad.conv2d(Tensor(x), Tensor(kern))
        np.testing.assert_array_equal(out.data, x)

    def test_conv2d_shape_and_stride(self):
        x = Tensor(np.zeros((1, 8, 8, 2)))
        k = Tensor(np.zeros((3, 3, 2, 4)))
        assert ad.conv2d(x, k, stride=2, pad=1).shape == (1, 4, 4, 4)

    def test_sigmoid_midpoint(self):
        assert ad.sigmoid(Tensor(0.0)).data == pytest.approx(0.5)

    def test_linear_matches_matrix_product(self):
        rng = np.random.default_rng(1)
        w, x = rng.standard_normal((3, 5)), rng.standard_normal(5)
        np.testing.assert_allclose(ad.linear(Tensor(x), Tensor(w)).data, w @ x)


class TestPrimitiveErrors:
    def test_add_shape_mismatch_names_shapes(self):
        with pytest.raises(ad.ShapeError) as ei:
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        assert "(2, 3)" in str(ei.value) and "(4, 5)" in str(ei.value)

    def test_conv2d_channel_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.conv2d(Tensor(np.zeros((4, 4, 3))), Tensor(np.zeros((3, 3, 2, 8))))

    def test_log_ratio_rejects_nonpositive_gamma(self):
        with pytest.raises(ad.InvalidArgumentError):
            ad.log_ratio(Tensor(1.0), 0.0)
        with pytest.raises(ad.InvalidArgumentError):
            ad.log_ratio(Tensor(1.0), -1e-5)


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor([3.0], requires_grad=True)
        ad.backward(ad.reduce_sum(ad.mul(x, x)))
        np.testing.assert_allclose(x.grad, [6.0])

    def test_relu_inactive_unit(self):
        x = Tensor(-1.0, requires_grad=True)
        ad.backward(ad.reduce_sum(ad.relu(x)))
        assert x.grad == 0.0

    def test_uniform_softmax_gradient(self):
        logits = Tensor([0.0, 0.0], requires_grad=True)
        ad.backward(ad.softmax_cross_entropy(logits, 0))
        np.testing.assert_allclose(logits.grad, [-0.5, 0.5], atol=1e-12)

    def test_nonscalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ad.InvalidArgumentError):
            ad.backward(ad.mul(x, x))

    def test_unreached_leaf_gets_zero_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor(np.ones(3), requires_grad=True)
        ad.backward(ad.reduce_sum(ad.mul(x, x)), leaves=[x, unused])
        np.testing.assert_array_equal(unused.grad, np.zeros(3))

    def test_topo_order_parents_precede(self):
        x = Tensor(np.ones(4), requires_grad=True)
        y = ad.mul(ad.add(x, x), ad.relu(x))
        loss = ad.reduce_sum(y)
        order = ad.topo_order(loss)
        pos = {id(n): i for i, n in enumerate(order)}
        for node in order:
            for parent in node._parents:
                assert pos[id(parent)] < pos[id(node)]

    def test_backward_linearity(self):
        rng = np.random.default_rng(3)
        base = rng.standard_normal((4, 5))

        def grads(which):
            x = Tensor(base.copy(), requires_grad=True)
            l1 = ad.reduce_sum(ad.mul(x, x))
            l2 = ad.reduce_sum(ad.sigmoid(ad.scale(x, 0.5)))
            loss = {"l1": l1, "l2": l2, "both": ad.add(l1, l2)}[which]
            ad.backward(loss)
            return x.grad

        combined = grads("both")
        summed = grads("l1") + grads("l2")
        assert np.abs(combined - summed).max() <= 1e-12


class TestAlgebraicProperties:
    def test_add_mul_commute(self):
        rng = np.random.default_rng(4)
        a, b = Tensor(rng.standard_normal(6)), Tensor(rng.standard_normal(6))
        np.testing.assert_array_equal(ad.add(a, b).data, ad.add(b, a).data)
        np.testing.assert_array_equal(ad.mul(a, b).data, ad.mul(b, a).data)

    def test_scale_by_one_is_identity(self):
        x = Tensor(np.random.default_rng(5).standard_normal(7))
        np.testing.assert_array_equal(ad.scale(x, 1.0).data, x.data)

    def test_max_pool_dominates_avg_pool(self):
        for seed in range(20):
            x = Tensor(np.random.default_rng(seed).standard_normal((5, 6, 3)))
            assert (ad.spatial_max_pool(x).data
                    >= ad.spatial_avg_pool(x).data).all()

    def test_max_pool_tie_routes_to_first_row_major(self):
        x = Tensor(np.array([[[1.0], [2.0]], [[2.0], [0.0]]]), requires_grad=True)
        ad.backward(ad.reduce_sum(ad.spatial_max_pool(x)))
        np.testing.assert_array_equal(x.grad[..., 0], [[0.0, 1.0], [0.0, 0.0]])


class TestFiniteDiff:
    def test_square_at_two(self):
        ok, err = ad.finite_diff_check(lambda t: ad.mul(t, t), Tensor(2.0),
                                       h=1e-5, tol=1e-4)
        assert ok and err < 1e-4

    def test_log_ratio_at_half(self):
        ok, _ = ad.finite_diff_check(lambda t: ad.log_ratio(t, 1e-5),
                                     Tensor(0.5), h=1e-6, tol=1e-4)
        assert ok

    def test_distance_maps_both_arguments(self):
        rng = np.random.default_rng(6)
        z = rng.standard_normal((2, 2, 3))
        protos = rng.standard_normal((4, 3))
        ok_z, _ = ad.finite_diff_check(
            lambda t: ad.sq_l2_distance_maps(t, Tensor(protos)), Tensor(z))
        ok_p, _ = ad.finite_diff_check(
            lambda t: ad.sq_l2_distance_maps(Tensor(z), t), Tensor(protos))
        assert ok_z and ok_p

    def test_detects_a_wrong_gradient(self):
        # sanity: checker must fail when forward and backward disagree
        def broken(t):
            out = ad.mul(t, t)
            good = out._backward

            def bad(g):
                good(g * 0.5)
            out._backward = bad
            return out
        ok, err = ad.finite_diff_check(broken, Tensor(1.5))
        assert not ok and err > 1e-2

    def test_battery_small(self):
        results = run_battery(trials=3, seed=11)
        bad = {k: v for k, v in results.items() if v[0] > 0}
        assert not bad, f"gradient checks failed: {bad}"
