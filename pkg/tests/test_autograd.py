"""Tensor/autodiff unit tests: exact cases, stability, and finite-difference
verification of every differentiable op."""

import numpy as np
import pytest

from angioqa import autograd as ag
from angioqa.errors import NumericsError, ShapeError

from oracles import finite_difference_grad


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        m = rng.normal(size=(2, 2))
        out = ag.matmul(ag.constant(np.eye(2)), ag.constant(m))
        np.testing.assert_array_equal(out.data, m)

    def test_hand_case(self):
        out = ag.matmul(ag.constant([[1, 2], [3, 4]]), ag.constant([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ag.matmul(ag.constant(np.ones((2, 3))), ag.constant(np.ones((2, 3))))

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(1)
        a = ag.parameter(rng.normal(size=(3, 4)))
        b = ag.constant(rng.normal(size=(4, 2)))

        loss = ag.sum_all(ag.matmul(a, b))
        loss.backward()
        numeric = finite_difference_grad(
            lambda: ag.sum_all(ag.matmul(a, b)).item(), a.data)
        denom = np.maximum(1e-8, np.abs(a.grad) + np.abs(numeric))
        assert np.max(np.abs(a.grad - numeric) / denom) < 1e-6

    def test_backward_formulas(self):
        rng = np.random.default_rng(2)
        a = ag.parameter(rng.normal(size=(3, 4)))
        b = ag.parameter(rng.normal(size=(4, 2)))
        out = ag.matmul(a, b)
        seed = rng.normal(size=(3, 2))
        out.backward(seed)
        np.testing.assert_allclose(a.grad, seed @ b.data.T, atol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ seed, atol=1e-12)


class TestSoftmaxRows:
    def test_symmetric_row(self):
        out = ag.softmax_rows(ag.constant([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)

    def test_hand_case(self):
        out = ag.softmax_rows(ag.constant([[np.log(1.0), np.log(3.0)]]))
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-12)

    def test_stability_large_inputs(self):
        out = ag.softmax_rows(ag.constant([[1000.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1.0, 0.0]], atol=1e-300)

    def test_rows_sum_to_one_random(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-50.0, 50.0, size=(100, 7))
        out = ag.softmax_rows(ag.constant(x))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(out.data >= 0.0)


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 5, 5))
        kernel = np.zeros((3, 3, 3, 3))
        kernel[np.arange(3), np.arange(3), 1, 1] = 1.0
        out = ag.conv2d(ag.constant(x), ag.constant(kernel))
        np.testing.assert_allclose(out.data, x, atol=1e-12)

    def test_all_ones_kernel_interior(self):
        x = np.ones((1, 5, 5))
        out = ag.conv2d(ag.constant(x), ag.constant(np.ones((1, 1, 3, 3))))
        assert out.data[0, 2, 2] == 9.0
        assert out.data[0, 0, 0] == 4.0  # zero padding at the corner

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ag.conv2d(ag.constant(np.ones((2, 4, 4))),
                      ag.constant(np.ones((1, 3, 3, 3))))

    def test_kernel_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(5)
        x = ag.constant(rng.normal(size=(2, 4, 4)))
        k = ag.parameter(rng.normal(size=(3, 2, 3, 3)) * 0.5)

        def f():
            return ag.sum_all(ag.mul(ag.conv2d(x, k), ag.conv2d(x, k))).item()

        loss = ag.sum_all(ag.mul(ag.conv2d(x, k), ag.conv2d(x, k)))
        loss.backward()
        numeric = finite_difference_grad(f, k.data)
        denom = np.maximum(1e-8, np.abs(k.grad) + np.abs(numeric))
        assert np.max(np.abs(k.grad - numeric) / denom) < 1e-6


class TestBilinearSample:
    def test_integer_coords_exact(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 4, 4))
        coords = [(0.0, 0.0), (2.0, 3.0), (3.0, 1.0)]
        out = ag.bilinear_sample(ag.constant(x), ag.constant(coords))
        expected = np.stack([x[:, 0, 0], x[:, 2, 3], x[:, 3, 1]], axis=1)
        np.testing.assert_array_equal(out.data, expected)

    def test_center_of_cell_averages_corners(self):
        x = np.zeros((1, 2, 2))
        x[0] = [[1.0, 2.0], [3.0, 4.0]]
        out = ag.bilinear_sample(ag.constant(x), ag.constant([(0.5, 0.5)]))
        assert out.data[0, 0] == pytest.approx(2.5, abs=1e-15)

    def test_out_of_bounds_is_zero(self):
        x = np.ones((1, 3, 3))
        out = ag.bilinear_sample(ag.constant(x), ag.constant([(-5.0, 1.0), (1.0, 10.0)]))
        np.testing.assert_array_equal(out.data, [[0.0, 0.0]])

    def test_linear_in_values(self):
        # scaling by powers of two commutes with rounding, so this is exact
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 5, 5))
        coords = ag.constant(rng.uniform(0.2, 3.8, size=(6, 2)))
        base = ag.bilinear_sample(ag.constant(x), coords).data
        for alpha in (0.5, 2.0, 8.0):
            scaled = ag.bilinear_sample(ag.constant(alpha * x), coords).data
            np.testing.assert_array_equal(scaled, alpha * base)

    def test_coord_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(8)
        x = ag.constant(rng.normal(size=(2, 6, 6)))
        # keep fractional parts away from the lattice so +/-eps stays in-cell
        coords = ag.parameter(rng.integers(1, 4, size=(5, 2))
                              + rng.uniform(0.3, 0.7, size=(5, 2)))

        def f():
            return ag.sum_all(ag.mul(ag.bilinear_sample(x, coords),
                                     ag.bilinear_sample(x, coords))).item()

        loss = ag.sum_all(ag.mul(ag.bilinear_sample(x, coords),
                                 ag.bilinear_sample(x, coords)))
        loss.backward()
        numeric = finite_difference_grad(f, coords.data, eps=1e-4)
        denom = np.maximum(1e-8, np.abs(coords.grad) + np.abs(numeric))
        assert np.max(np.abs(coords.grad - numeric) / denom) < 1e-5


class TestGradCheckHarness:
    def test_quadratic(self):
        theta = ag.parameter([[3.0]])
        report = ag.grad_check(lambda: ag.mul(theta, theta), {"theta": theta})
        theta.zero_grad()
        ag.mul(theta, theta).backward()
        assert theta.grad[0, 0] == pytest.approx(6.0, abs=1e-12)
        assert report.max_rel_error < 1e-9

    def test_softmax_sum_is_constant(self):
        theta = ag.parameter([[0.3, -1.2, 0.7]])
        report = ag.grad_check(lambda: ag.sum_all(ag.softmax_rows(theta)),
                               {"theta": theta})
        theta.zero_grad()
        ag.sum_all(ag.softmax_rows(theta)).backward()
        assert np.max(np.abs(theta.grad)) < 1e-12
        assert report.max_rel_error < 1e-4

    def test_skips_relu_kink(self):
        # one element sits within eps of the kink: it must be skipped, the
        # others must pass
        theta = ag.parameter([[0.0005, 1.0, -1.0]])
        report = ag.grad_check(lambda: ag.sum_all(ag.relu(theta)), {"theta": theta})
        check = report.per_param["theta"]
        assert check.n_skipped == 1
        assert check.n_checked == 2
        assert check.max_rel_error < 1e-9


class TestOpGradients:
    """Spec invariant: analytic gradients match central finite differences
    within 1e-4 relative error at eps=1e-3 on random small tensors."""

    def test_randomized_trials(self):
        rng = np.random.default_rng(9)

        def build_cases():
            a = ag.parameter(rng.normal(size=(3, 4)))
            b = ag.parameter(rng.normal(size=(3, 4)))
            m = ag.parameter(rng.normal(size=(4, 3)))
            img = ag.parameter(rng.normal(size=(2, 5, 5)))
            ker = ag.parameter(rng.normal(size=(2, 2, 3, 3)) * 0.3)
            coords = ag.parameter(rng.integers(0, 4, size=(6, 2))
                                  + rng.uniform(0.25, 0.75, size=(6, 2)))
            logits = ag.parameter(rng.normal(size=(1, 5)))
            return [
                ("add", {"a": a, "b": b},
                 lambda: ag.sum_all(ag.mul(ag.add(a, b), ag.add(a, b)))),
                ("sub", {"a": a, "b": b},
                 lambda: ag.sum_all(ag.mul(ag.sub(a, b), ag.sub(a, b)))),
                ("mul", {"a": a, "b": b},
                 lambda: ag.sum_all(ag.mul(ag.mul(a, b), b))),
                ("matmul", {"a": a, "m": m},
                 lambda: ag.sum_all(ag.mul(ag.matmul(a, m), ag.matmul(a, m)))),
                ("relu", {"a": a},
                 lambda: ag.sum_all(ag.mul(ag.relu(a), ag.relu(a)))),
                ("softmax", {"a": a},
                 lambda: ag.sum_all(ag.mul(ag.softmax_rows(a), ag.constant(
                     np.arange(12.0).reshape(3, 4))))),
                ("mean_rows", {"a": a},
                 lambda: ag.sum_all(ag.mul(ag.mean_rows(a), ag.mean_rows(a)))),
                ("transpose", {"a": a},
                 lambda: ag.sum_all(ag.mul(ag.transpose(a), ag.transpose(a)))),
                ("reshape", {"a": a},
                 lambda: ag.sum_all(ag.mul(ag.reshape(a, (4, 3)), ag.reshape(a, (4, 3))))),
                ("concat", {"a": a, "b": b},
                 lambda: ag.sum_all(ag.mul(ag.concat_rows([a, b]),
                                           ag.concat_rows([a, b])))),
                ("slice_cols", {"a": a},
                 lambda: ag.sum_all(ag.mul(ag.slice_cols(a, 1, 3),
                                           ag.slice_cols(a, 1, 3)))),
                ("scale", {"a": a},
                 lambda: ag.sum_all(ag.scale(ag.mul(a, a), 2.5))),
                ("conv2d", {"img": img, "ker": ker},
                 lambda: ag.sum_all(ag.mul(ag.conv2d(img, ker), ag.conv2d(img, ker)))),
                ("bilinear", {"img": img, "coords": coords},
                 lambda: ag.sum_all(ag.mul(ag.bilinear_sample(img, coords),
                                           ag.bilinear_sample(img, coords)))),
                ("cross_entropy", {"logits": logits},
                 lambda: ag.cross_entropy(logits, 2)),
            ]

        trials = 0
        while trials < 100:
            for name, params, f in build_cases():
                report = ag.grad_check(f, params, eps=1e-3)
                assert report.max_rel_error < 1e-4, (
                    f"{name}: {report.summary()}")
                trials += 1
                if trials >= 100:
                    break


class TestGraphSemantics:
    def test_diamond_reuse_counts_paths(self):
        x = ag.parameter([[1.5]])
        z = ag.mul(x, x)
        w = ag.add(z, z)  # w = 2 x^2, dw/dx = 4x
        w.backward()
        assert x.grad[0, 0] == pytest.approx(6.0, abs=1e-12)

    def test_grad_accumulates_across_backwards(self):
        x = ag.parameter([[2.0]])
        ag.mul(x, x).backward()
        ag.mul(x, x).backward()
        assert x.grad[0, 0] == pytest.approx(8.0, abs=1e-12)
        x.zero_grad()
        assert x.grad is None

    def test_no_grad_mode(self):
        x = ag.parameter([[2.0]])
        with ag.no_grad():
            y = ag.mul(x, x)
        assert not y.requires_grad

    def test_non_finite_raises(self):
        big = ag.constant([[1e308]])
        with np.errstate(over="ignore"), pytest.raises(NumericsError):
            ag.add(big, big)

    def test_values_are_float64(self):
        out = ag.add(ag.constant([[1, 2]]), ag.constant([[3, 4]]))
        assert out.data.dtype == np.float64
