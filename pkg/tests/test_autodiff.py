import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmdistill import autodiff as ad
from mmdistill.autodiff import Tensor, backward, finite_diff_gradcheck
from mmdistill.errors import ContractError, DimensionError, NumericError, ParameterError


def finite_rows(n_min=2, n_max=8):
    return arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(n_min, n_max)),
                  elements=st.floats(-30, 30, allow_nan=False))


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_hand_product(self):
        out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradients_are_transposed_products(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        backward(ad.tsum(ad.matmul(a, b)))
        g = np.ones((3, 2))
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)

    def test_sum_of_product_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        b = Tensor(rng.normal(size=(4, 2)))
        assert finite_diff_gradcheck(lambda x: ad.tsum(ad.matmul(x, b)), rng.normal(size=(3, 4))) < 1e-6

    def test_batched_by_matrix_equals_loop(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
        out = ad.matmul(Tensor(a), Tensor(b)).data
        for i in range(2):
            np.testing.assert_allclose(out[i], a[i] @ b, rtol=1e-13)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ad.softmax_t(Tensor([0.0, 0.0, 0.0]), 1.0).data, [1 / 3] * 3, atol=1e-15)

    def test_two_logits(self):
        np.testing.assert_allclose(ad.softmax_t(Tensor([1.0, 0.0]), 1.0).data, [0.73106, 0.26894], atol=1e-5)

    def test_high_temperature_flattens(self):
        p = ad.softmax_t(Tensor([10.0, 0.0]), 1000.0).data
        assert np.all(np.abs(p - 0.5) < 0.01)

    @pytest.mark.parametrize("T", [0.0, -1.0])
    def test_nonpositive_temperature(self, T):
        with pytest.raises(ParameterError):
            ad.softmax_t(Tensor([1.0, 2.0]), T)

    def test_non_finite_input(self):
        with pytest.raises(NumericError):
            ad.softmax_t(Tensor([1.0, np.inf]), 1.0)
        with pytest.raises(NumericError):
            ad.softmax_t(Tensor([np.nan, 0.0]), 1.0)

    def test_low_temperature_is_stable(self):
        p = ad.softmax_t(Tensor([1000.0, 999.0, -1000.0]), 0.01).data
        assert np.isfinite(p).all() and abs(p.sum() - 1) < 1e-12

    def test_visible_mask_zeroes_hidden_entries(self):
        vis = np.tril(np.ones((3, 3), dtype=bool))
        p = ad.softmax_t(Tensor(np.zeros((3, 3))), 1.0, visible=vis).data
        np.testing.assert_allclose(p, [[1, 0, 0], [0.5, 0.5, 0], [1 / 3, 1 / 3, 1 / 3]])

    @settings(max_examples=60, deadline=None)
    @given(finite_rows(), st.floats(0.05, 20.0), st.floats(-100, 100))
    def test_rows_normalized_and_shift_invariant(self, z, T, c):
        p = ad.softmax_t(Tensor(z), T).data
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(p >= 0) and np.all(p <= 1)
        np.testing.assert_allclose(ad.softmax_t(Tensor(z + c), T).data, p, atol=1e-12)

    def test_backward_against_analytic_jacobian(self):
        z = Tensor([0.0, 0.0], requires_grad=True)
        backward(ad.tsum(ad.softmax_t(z, 1.0) * Tensor([1.0, 0.0])))
        np.testing.assert_allclose(z.grad, [0.25, -0.25], atol=1e-15)

    def test_log_softmax_matches_log_of_softmax(self):
        z = np.random.default_rng(3).normal(size=(4, 6)) * 5
        np.testing.assert_allclose(ad.log_softmax_t(Tensor(z), 0.7).data, np.log(ad.softmax_t(Tensor(z), 0.7).data),
                                   atol=1e-12)


class TestLayerNorm:
    def test_constant_row(self):
        out = ad.layer_norm(Tensor([1.0, 1.0, 1.0, 1.0]), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, np.zeros(4))

    def test_two_values(self):
        out = ad.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [-1, 1], atol=1e-5)

    def test_affine(self):
        out = ad.layer_norm(Tensor([0.0, 2.0]), Tensor([2.0, 2.0]), Tensor([1.0, 1.0]))
        np.testing.assert_allclose(out.data, [-1, 3], atol=1e-4)

    def test_single_feature_is_guarded_by_epsilon(self):
        out = ad.layer_norm(Tensor([[5.0]]), Tensor([1.0]), Tensor([0.0]))
        assert np.isfinite(out.data).all()

    def test_zero_mean_unit_variance_rows(self):
        x = np.random.default_rng(4).normal(3, 5, size=(5, 16))
        out = ad.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), 1, atol=1e-5)


class TestStandardize:
    def test_known_values(self):
        np.testing.assert_allclose(ad.standardize(Tensor([1.0, 2.0, 3.0])).data, [-1.22474, 0, 1.22474], atol=1e-5)

    def test_constant_row_is_zero(self):
        np.testing.assert_array_equal(ad.standardize(Tensor([[4.0, 4.0, 4.0]])).data, np.zeros((1, 3)))

    def test_gradient_through_constant_row_is_zero(self):
        z = Tensor([[2.0, 2.0, 2.0]], requires_grad=True)
        backward(ad.tsum(ad.standardize(z) * Tensor([[1.0, 2.0, 3.0]])))
        np.testing.assert_array_equal(z.grad, np.zeros((1, 3)))


class TestBackward:
    def test_power_rule(self):
        x = Tensor(3.0, requires_grad=True)
        backward(x * x)
        assert x.grad == 6.0

    def test_non_scalar_loss(self):
        with pytest.raises(ContractError):
            backward(Tensor(np.ones(3), requires_grad=True) * 2.0)

    def test_second_backward_without_rebuild_fails(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * x
        backward(y)
        with pytest.raises(ContractError):
            backward(y)

    def test_shared_subexpression_accumulates(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * x
        backward(y + y * 3.0)
        assert x.grad == pytest.approx(16.0)

    def test_deterministic_gradients(self):
        rng = np.random.default_rng(5)
        a, w = rng.normal(size=(6, 5)), rng.normal(size=(5, 3))

        def run():
            x = Tensor(a, requires_grad=True)
            backward(ad.tsum(ad.softmax_t(ad.matmul(x, Tensor(w)), 0.7) * Tensor(np.arange(3.0))))
            return x.grad

        assert np.array_equal(run(), run())

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            y = ad.tsum(x * 2.0)
        assert not y.requires_grad

    def test_no_grad_is_thread_local(self):
        seen = {}

        def worker():
            seen["enabled"] = ad.is_grad_enabled()

        with ad.no_grad():
            t = threading.Thread(target=worker)
            t.start()
            t.join()
        assert seen["enabled"] is True

    def test_constants_receive_no_gradient(self):
        c = Tensor(np.ones(3))
        x = Tensor(np.ones(3), requires_grad=True)
        backward(ad.tsum(x * c))
        assert c.grad is None


class TestGradcheck:
    def test_linear_function_is_exact(self):
        x = np.random.default_rng(6).normal(size=(4, 3))
        assert finite_diff_gradcheck(lambda t: ad.tsum(t), x) < 1e-10

    def test_detects_a_wrong_gradient(self):
        def bad(t):
            return ad._make(np.array((t.data ** 2).sum()), (t,), lambda g: (g * t.data,), "bad")

        assert finite_diff_gradcheck(bad, np.array([1.0, 2.0])) > 0.1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_propagates_as_numeric_error(self):
        with pytest.raises(NumericError):
            finite_diff_gradcheck(lambda t: ad.tsum(ad.log(t)), np.array([-1.0, 1.0]))


class TestIndexingAndShapes:
    def test_unbroadcast_sums_expanded_axes(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        backward(ad.tsum(a * b))
        np.testing.assert_array_equal(b.grad, [2, 2, 2])

    def test_fancy_index_with_repeats_accumulates(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        backward(ad.tsum(x[np.array([0, 0, 2])]))
        np.testing.assert_array_equal(x.grad, [2, 0, 1])

    def test_item_requires_single_element(self):
        with pytest.raises(ContractError):
            Tensor(np.ones(2)).item()
