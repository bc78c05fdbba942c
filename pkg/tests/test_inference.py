import math

import numpy as np
import pytest
from scipy import integrate

from kdm import kernels
from kdm.density import density, make_joint, make_kdm, marginal
from kdm.errors import KernelMismatch, WrongKernelKind
from kdm.inference import (DEGENERATE_DENOM, conditional_density, infer, infer_points,
                           mean_points, pmf_points, point_kdm, predict_mean, predict_pmf,
                           responsibilities, reverse)


def double_loop_infer(rho_x, joint):
    """Direct double loop over input and joint components."""
    kx = joint.x_kernel
    mp = joint.m
    out = [0.0] * mp
    for l in range(rho_x.m):
        num = [joint.weights[i] * kernels.eval_sq(kx, rho_x.components[l], joint.x_components[i])
               for i in range(mp)]
        den = math.fsum(num)
        for i in range(mp):
            r = joint.weights[i] if den < DEGENERATE_DENOM else num[i] / den
            out[i] += rho_x.weights[l] * r
    return np.array(out)


def random_instance(gen, kind="rbf", m=None, mp=None):
    m = m or int(gen.integers(1, 4))
    mp = mp or int(gen.integers(1, 6))
    nx = int(gen.integers(1, 4))
    kx = kernels.rbf(nx, float(gen.uniform(0.3, 2))) if kind == "rbf" else kernels.cosine(nx)
    ky = kernels.cosine(2)
    joint = make_joint(gen.standard_normal((mp, nx)), gen.standard_normal((mp, 2)),
                       gen.random(mp) + 0.01, kx, ky)
    rho = make_kdm(gen.standard_normal((m, nx)), gen.random(m) + 0.01, kx)
    return rho, joint


class TestPointKDM:
    def test_single_component(self):
        rho = point_kdm(np.array([1.0, 2.0]), kernels.rbf(2, 1.0))
        np.testing.assert_array_equal(rho.components, [[1.0, 2.0]])
        np.testing.assert_array_equal(rho.weights, [1.0])

    def test_density_is_norm_const(self):
        k = kernels.rbf(2, 0.3)
        assert density(point_kdm(np.array([1.0, 2.0]), k), [1.0, 2.0]) == kernels.norm_const(k)

    def test_equivalent_to_explicit(self, rng):
        rho, joint = random_instance(rng)
        x = rng.standard_normal(joint.x_kernel.dim)
        a = infer(point_kdm(x, joint.x_kernel), joint).output.weights
        b = infer(make_kdm(x[None, :], [1.0], joint.x_kernel), joint).output.weights
        np.testing.assert_array_equal(a, b)


class TestInfer:
    def test_equidistant_symmetry(self):
        joint = make_joint([[-1.0], [1.0]], [[1.0, 0.0], [0.0, 1.0]], [0.5, 0.5],
                           kernels.rbf(1, 1.0), kernels.cosine(2))
        out = infer(point_kdm(np.array([0.0]), joint.x_kernel), joint).output
        np.testing.assert_allclose(out.weights, [0.5, 0.5], atol=1e-15)

    def test_orthogonal_cosine(self):
        joint = make_joint([[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]], [0.5, 0.5],
                           kernels.cosine(2), kernels.cosine(2))
        out = infer(point_kdm(np.array([1.0, 0.0]), joint.x_kernel), joint).output
        np.testing.assert_array_equal(out.weights, [1.0, 0.0])

    @pytest.mark.parametrize("kind", ["rbf", "cosine"])
    def test_double_loop_oracle(self, kind):
        gen = np.random.default_rng(11)
        for _ in range(50):
            rho, joint = random_instance(gen, kind, m=2, mp=3)
            res = infer(rho, joint)
            np.testing.assert_allclose(res.output.weights, double_loop_infer(rho, joint), rtol=0, atol=1e-14)

    def test_result_invariants(self, rng):
        rho, joint = random_instance(rng)
        res = infer(rho, joint)
        np.testing.assert_allclose(res.responsibilities.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(res.output.weights, rho.weights @ res.responsibilities, atol=1e-15)
        np.testing.assert_array_equal(res.output.components, joint.y_components)
        assert res.output.kernel == joint.y_kernel

    def test_kernel_mismatch(self):
        joint = make_joint([[0.0]], [[1.0]], [1.0], kernels.rbf(1, 1.0), kernels.rbf(1, 1.0))
        with pytest.raises(KernelMismatch):
            infer(point_kdm(np.array([0.0]), kernels.rbf(1, 2.0)), joint)
        with pytest.raises(KernelMismatch):
            infer(point_kdm(np.array([1.0]), kernels.cosine(1)), joint)

    def test_sigma_tolerance(self):
        joint = make_joint([[0.0]], [[1.0]], [1.0], kernels.rbf(1, 1.0), kernels.rbf(1, 1.0))
        infer(point_kdm(np.array([0.0]), kernels.rbf(1, 1.0 + 1e-13)), joint)

    def test_underflow_falls_back_to_prior(self):
        joint = make_joint([[0.0], [1.0]], [[1.0, 0.0], [0.0, 1.0]], [0.3, 0.7],
                           kernels.rbf(1, 0.01), kernels.cosine(2))
        far = make_kdm([[1e3], [0.0]], [0.5, 0.5], joint.x_kernel)
        res = infer(far, joint)
        np.testing.assert_array_equal(res.responsibilities[0], [0.3, 0.7])
        np.testing.assert_allclose(res.output.weights, 0.5 * np.array([0.3, 0.7]) + 0.5 * np.array([1, 0]),
                                   atol=1e-15)
        assert np.all(np.isfinite(res.output.weights))

    def test_responsibilities_dead_mask(self):
        R, denom, dead = responsibilities(np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([0.25, 0.75]))
        assert dead.tolist() == [True, False]
        np.testing.assert_array_equal(R[0], [0.25, 0.75])

    def test_permutation_equivariance(self, rng):
        rho, joint = random_instance(rng, mp=5)
        perm = rng.permutation(joint.m)
        pj = make_joint(joint.x_components[perm], joint.y_components[perm], joint.weights[perm],
                        joint.x_kernel, joint.y_kernel)
        np.testing.assert_allclose(infer(rho, pj).output.weights, infer(rho, joint).output.weights[perm],
                                   atol=1e-15)

    def test_cosine_input_scaling(self, rng):
        rho, joint = random_instance(rng, "cosine")
        scaled = make_kdm(rho.components * rng.uniform(0.1, 10, (rho.m, 1)), rho.weights, rho.kernel)
        np.testing.assert_allclose(infer(scaled, joint).output.weights, infer(rho, joint).output.weights,
                                   atol=1e-14)

    def test_composition(self, rng):
        j1 = make_joint(rng.standard_normal((4, 2)), rng.standard_normal((4, 3)), rng.random(4),
                        kernels.rbf(2, 1.0), kernels.rbf(3, 0.8))
        j2 = make_joint(rng.standard_normal((5, 3)), np.eye(5)[:, :2] + 0.1, rng.random(5),
                        kernels.rbf(3, 0.8), kernels.cosine(2))
        rho = make_kdm(rng.standard_normal((2, 2)), [1, 1], j1.x_kernel)
        mid = infer(rho, j1).output
        out = infer(mid, j2).output
        assert out.weights.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(out.weights >= 0)

    def test_batch_points_match_single(self, rng):
        _, joint = random_instance(rng, mp=4)
        X = rng.standard_normal((6, joint.x_kernel.dim))
        R = infer_points(joint, X)
        for x, r in zip(X, R):
            np.testing.assert_array_equal(infer(point_kdm(x, joint.x_kernel), joint).output.weights, r)


class TestReverse:
    def test_double_reverse(self, rng):
        _, joint = random_instance(rng)
        back = reverse(reverse(joint))
        np.testing.assert_array_equal(back.x_components, joint.x_components)
        np.testing.assert_array_equal(back.y_components, joint.y_components)
        np.testing.assert_array_equal(back.weights, joint.weights)
        assert back.x_kernel == joint.x_kernel

    def test_label_input_gives_simplex(self, rng):
        joint = make_joint(rng.standard_normal((6, 2)), np.eye(2)[rng.integers(0, 2, 6)], rng.random(6),
                           kernels.rbf(2, 1.0), kernels.cosine(2))
        out = infer(point_kdm(np.array([0.0, 1.0]), kernels.cosine(2)), reverse(joint)).output
        assert out.weights.sum() == pytest.approx(1.0, abs=1e-9)
        assert out.kernel == joint.x_kernel


class TestPredictions:
    def test_predict_mean_midpoint(self):
        joint = make_joint([[-1.0], [1.0]], [[0.0], [2.0]], [0.5, 0.5],
                           kernels.rbf(1, 1.0), kernels.rbf(1, 1.0))
        res = infer(point_kdm(np.array([0.0]), joint.x_kernel), joint)
        np.testing.assert_allclose(predict_mean(res), [1.0], atol=1e-15)

    def test_predict_mean_single(self):
        joint = make_joint([[0.0]], [[3.0, 4.0]], [1.0], kernels.rbf(1, 1.0), kernels.rbf(2, 1.0))
        res = infer(point_kdm(np.array([5.0]), joint.x_kernel), joint)
        np.testing.assert_array_equal(predict_mean(res), [3.0, 4.0])

    def test_predict_mean_weighted_sum(self, rng):
        joint = make_joint(rng.standard_normal((4, 1)), rng.standard_normal((4, 2)), rng.random(4),
                           kernels.rbf(1, 1.0), kernels.rbf(2, 1.0))
        res = infer(point_kdm(np.array([0.3]), joint.x_kernel), joint)
        w = res.output.weights
        expected = sum(w[i] * joint.y_components[i] for i in range(4))
        np.testing.assert_allclose(predict_mean(res), expected, atol=1e-15)
        np.testing.assert_allclose(mean_points(joint, [[0.3]])[0], expected, atol=1e-15)

    def test_predict_mean_rejects_cosine(self, rng):
        _, joint = random_instance(rng)
        with pytest.raises(WrongKernelKind):
            predict_mean(infer(point_kdm(np.zeros(joint.x_kernel.dim) + 1, joint.x_kernel), joint))

    def test_pmf_points(self, rng):
        _, joint = random_instance(rng, mp=4)
        X = rng.standard_normal((3, joint.x_kernel.dim))
        pi = pmf_points(joint, X)
        for x, row in zip(X, pi):
            np.testing.assert_allclose(predict_pmf(infer(point_kdm(x, joint.x_kernel), joint)), row,
                                       atol=1e-15)


class TestConditional:
    def test_single_component_is_marginal(self):
        joint = make_joint([[0.0]], [[1.0]], [1.0], kernels.rbf(1, 1.0), kernels.rbf(1, 0.5))
        my = marginal(joint, "y")
        for x0 in (-3.0, 0.0, 10.0):
            assert conditional_density(joint, [x0], [0.7]) == pytest.approx(density(my, [0.7]), rel=1e-14)

    def test_integrates_to_one(self, rng):
        sy = 0.4
        joint = make_joint(rng.standard_normal((4, 1)), rng.uniform(-1, 1, (4, 1)), rng.random(4),
                           kernels.rbf(1, 0.8), kernels.rbf(1, sy))
        g = np.linspace(-1 - 8 * sy, 1 + 8 * sy, 4001)
        vals = conditional_density(joint, [0.2], g[:, None])
        assert integrate.trapezoid(vals, g) == pytest.approx(1.0, abs=1e-3)

    def test_matches_point_inference(self, rng):
        joint = make_joint(rng.standard_normal((4, 2)), rng.standard_normal((4, 1)), rng.random(4),
                           kernels.rbf(2, 0.8), kernels.rbf(1, 0.6))
        x0 = rng.standard_normal(2)
        out = infer(point_kdm(x0, joint.x_kernel), joint).output
        for y in rng.standard_normal((5, 1)):
            assert density(out, y) == pytest.approx(conditional_density(joint, x0, y), abs=1e-12)
