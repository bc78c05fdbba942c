import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate

from kdm import kernels
from kdm.errors import DimMismatch, InvalidKernel, ZeroVector
from kdm.kernels import KernelSpec, eval_sq, gram_sq, grad_sq, norm_const

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def vec(n):
    return arrays(np.float64, n, elements=finite)


class TestKernelSpec:
    def test_rbf_needs_positive_sigma(self):
        with pytest.raises(InvalidKernel):
            KernelSpec("rbf", 2, 0.0)
        with pytest.raises(InvalidKernel):
            KernelSpec("rbf", 2)

    def test_cosine_rejects_sigma(self):
        with pytest.raises(InvalidKernel):
            KernelSpec("cosine", 2, 1.0)

    def test_product_needs_two_factors(self):
        with pytest.raises(InvalidKernel):
            KernelSpec("product", 2, factors=(kernels.cosine(2),))
        with pytest.raises(InvalidKernel):
            KernelSpec("product", 5, factors=(kernels.cosine(2), kernels.cosine(2)))

    @pytest.mark.parametrize("k", [
        kernels.cosine(3),
        kernels.rbf(2, 0.7),
        kernels.rbf(1, 1.3, sigma_min=1e-2),
        kernels.product(kernels.rbf(1, 0.1), kernels.cosine(3)),
    ])
    def test_json_round_trip(self, k):
        assert KernelSpec.from_json(json.loads(json.dumps(k.to_json()))) == k

    def test_json_shape(self):
        assert kernels.rbf(2, 0.5).to_json() == {"kind": "rbf", "dim": 2, "sigma": 0.5}

    def test_same_kernel_tolerance(self):
        a = kernels.rbf(2, 1.0)
        assert kernels.same_kernel(a, kernels.rbf(2, 1.0 + 1e-13))
        assert not kernels.same_kernel(a, kernels.rbf(2, 1.0 + 1e-9))
        assert not kernels.same_kernel(a, kernels.rbf(3, 1.0))
        assert not kernels.same_kernel(a, kernels.cosine(2))


class TestEvalSq:
    def test_cosine_identity(self):
        assert eval_sq(kernels.cosine(3), [1, 0, 0], [1, 0, 0]) == 1.0

    def test_cosine_projection_example(self):
        y = np.sqrt([0.2, 0.3, 0.5])
        assert eval_sq(kernels.cosine(3), [1, 0, 0], y) == pytest.approx(0.2, abs=1e-15)

    def test_rbf_unit_distance(self):
        # k^2 = exp(-d^2 / sigma^2); cross-check through logs
        v = eval_sq(kernels.rbf(1, 1.0), [0.0], [1.0])
        assert v == pytest.approx(math.exp(-1.0), rel=1e-15)
        assert math.log(v) == pytest.approx(-1.0, rel=1e-15)

    def test_product(self):
        k = kernels.product(kernels.rbf(1, 2.0), kernels.cosine(2))
        v = eval_sq(k, [0.0, 1.0, 0.0], [1.0, 1.0, 1.0])
        assert v == pytest.approx(math.exp(-0.25) * 0.5, rel=1e-15)

    def test_zero_vector(self):
        with pytest.raises(ZeroVector):
            eval_sq(kernels.cosine(2), [0.0, 0.0], [1.0, 0.0])
        with pytest.raises(ZeroVector):
            eval_sq(kernels.cosine(2), [1.0, 0.0], [1e-13, 0.0])

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            eval_sq(kernels.rbf(2, 1.0), [0.0], [1.0])

    def test_sigma_floor(self):
        k = kernels.rbf(1, 1e-6)
        assert eval_sq(k, [0.0], [1e-3]) == pytest.approx(math.exp(-1.0))

    @settings(max_examples=60, deadline=None)
    @given(vec(3), vec(3), st.floats(0.05, 5))
    def test_rbf_symmetry_and_range(self, x, y, s):
        k = kernels.rbf(3, s)
        a, b = eval_sq(k, x, y), eval_sq(k, y, x)
        assert a == b
        assert 0.0 <= a <= 1.0
        assert eval_sq(k, x, x) == 1.0

    @settings(max_examples=60, deadline=None)
    @given(vec(4), vec(4), st.floats(0.1, 10), st.floats(0.1, 10))
    def test_cosine_properties(self, x, y, a, b):
        if np.linalg.norm(x) < 1e-3 or np.linalg.norm(y) < 1e-3:
            return
        k = kernels.cosine(4)
        v = eval_sq(k, x, y)
        assert 0.0 <= v <= 1.0 + 1e-15
        assert v == eval_sq(k, y, x)
        assert abs(eval_sq(k, x, x) - 1.0) < 1e-12
        assert eval_sq(k, a * x, b * y) == pytest.approx(v, abs=1e-12)


class TestGram:
    def test_canonical_basis_identity(self, backend):
        np.testing.assert_array_equal(gram_sq(kernels.cosine(3), np.eye(3), np.eye(3)), np.eye(3))

    def test_reduces_to_eval(self, backend):
        k = kernels.rbf(1, 1.0)
        G = gram_sq(k, np.array([[0.0]]), np.array([[0.0], [1.0]]))
        assert G.shape == (1, 2)
        assert G[0, 0] == 1.0
        assert G[0, 1] == eval_sq(k, [0.0], [1.0])

    @pytest.mark.parametrize("k", [kernels.rbf(2, 0.8), kernels.cosine(2),
                                   kernels.product(kernels.rbf(1, 0.5), kernels.cosine(1))])
    def test_bit_identical_to_elementwise(self, backend, rng, k):
        X = rng.standard_normal((4, 2))
        Y = rng.standard_normal((5, 2))
        G = gram_sq(k, X, Y)
        loop = np.array([[eval_sq(k, x, y) for y in Y] for x in X])
        np.testing.assert_array_equal(G, loop)

    @pytest.mark.parametrize("n", [1, 7, 104])
    def test_backends_agree(self, rng, n):
        from kdm import _backend
        if len(_backend.available()) < 2:
            pytest.skip("compiled backend not built")
        X = rng.standard_normal((30, n))
        Y = rng.standard_normal((11, n))
        py, cy = _backend.get("numpy"), _backend.get("cython")
        # summation order differs; compare exponents, which exp() would amplify
        np.testing.assert_allclose(np.log(py.rbf_gram_sq(X, Y, 0.9)),
                                   np.log(cy.rbf_gram_sq(X, Y, 0.9)), rtol=1e-13)
        np.testing.assert_allclose(py.cos_gram_sq(X, Y), cy.cos_gram_sq(X, Y), rtol=1e-12, atol=1e-15)

    def test_chunking_invariant(self, backend, rng):
        k = kernels.rbf(3, 1.1)
        X = rng.standard_normal((2500, 3))
        Y = rng.standard_normal((700, 3))
        full = gram_sq(k, X, Y)
        np.testing.assert_array_equal(full[1234], gram_sq(k, X[1234:1235], Y)[0])


class TestNormConst:
    def test_cosine(self):
        assert norm_const(kernels.cosine(5)) == 1.0

    def test_rbf_1d_quadrature(self):
        # V1 pinned by quadrature of k^2(x, 0) before comparing to the closed form
        k = kernels.rbf(1, 1.0)
        area, _ = integrate.quad(lambda t: eval_sq(k, [t], [0.0]), -np.inf, np.inf)
        assert norm_const(k) == pytest.approx(1.0 / area, rel=1e-10)
        assert norm_const(k) == pytest.approx(1.0 / math.sqrt(math.pi), rel=1e-15)

    def test_product(self):
        k = kernels.product(kernels.rbf(1, 1.0), kernels.cosine(3))
        assert norm_const(k) == norm_const(kernels.rbf(1, 1.0))

    @pytest.mark.parametrize("n,sigma", [(1, 0.3), (1, 2.0), (2, 0.7), (2, 1.5)])
    def test_grid_normalisation(self, n, sigma):
        k = kernels.rbf(n, sigma)
        g = np.linspace(-8 * sigma, 8 * sigma, 801 if n == 1 else 401)
        pts = np.stack(np.meshgrid(*([g] * n), indexing="ij"), -1).reshape(-1, n)
        vals = norm_const(k) * gram_sq(k, pts, np.zeros((1, n)))[:, 0]
        h = g[1] - g[0]
        assert vals.sum() * h ** n == pytest.approx(1.0, abs=1e-3)

    def test_log_norm_const(self):
        k = kernels.product(kernels.rbf(3, 0.4), kernels.rbf(2, 2.0))
        assert kernels.log_norm_const(k) == pytest.approx(math.log(norm_const(k)), rel=1e-14)

    def test_derived_constants(self):
        k = kernels.rbf(1, 2.0)
        assert kernels.kde_bandwidth(k) == pytest.approx(math.sqrt(2.0))
        assert kernels.sampling_std(k) ** 2 == pytest.approx(2.0)


def _fd(f, v, h=1e-5):
    g = np.zeros_like(v)
    for i in range(v.size):
        e = np.zeros_like(v)
        e[i] = h
        g[i] = (f(v + e) - f(v - e)) / (2 * h)
    return g


def _close(a, f, rel=1e-5):
    a, f = np.atleast_1d(a), np.atleast_1d(f)
    return np.all(np.abs(a - f) <= rel * np.maximum(np.abs(a), np.abs(f)) + 1e-10)


class TestGradSq:
    def test_rbf_at_maximum(self):
        g = grad_sq(kernels.rbf(2, 1.0), [1.0, 2.0], [1.0, 2.0])
        assert np.all(g.dx == 0) and np.all(g.dy == 0)
        assert g.dlog_sigma == 0

    def test_cosine_at_maximum(self):
        g = grad_sq(kernels.cosine(3), [1.0, 2.0, 3.0], [2.0, 4.0, 6.0])
        np.testing.assert_allclose(g.dx, 0, atol=1e-15)
        np.testing.assert_allclose(g.dy, 0, atol=1e-15)
        assert g.dlog_sigma is None

    def test_floored_sigma_has_no_sigma_gradient(self):
        g = grad_sq(kernels.rbf(1, 1e-5), [0.0], [1e-3])
        assert g.dlog_sigma == 0.0

    @pytest.mark.parametrize("kind", ["rbf", "cosine", "product"])
    def test_finite_differences(self, kind):
        gen = np.random.default_rng(7)
        checked = 0
        for _ in range(100):
            if kind == "rbf":
                k = kernels.rbf(3, float(gen.uniform(0.5, 2.0)))
            elif kind == "cosine":
                k = kernels.cosine(3)
            else:
                k = kernels.product(kernels.rbf(2, float(gen.uniform(0.5, 2.0))), kernels.cosine(2))
            x = gen.standard_normal(k.dim)
            y = gen.standard_normal(k.dim)
            if eval_sq(k, x, y) <= 1e-8:
                continue
            g = grad_sq(k, x, y)
            assert _close(g.dx, _fd(lambda v: eval_sq(k, v, y), x))
            assert _close(g.dy, _fd(lambda v: eval_sq(k, x, v), y))
            if kind == "rbf":
                def f(ls):
                    return eval_sq(kernels.rbf(3, math.exp(ls[0])), x, y)
                assert _close(g.dlog_sigma, _fd(f, np.array([k.log_sigma])))
            checked += 1
        assert checked > 50
