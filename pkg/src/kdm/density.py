"""Kernel density matrices and joint KDMs.

A KDM is the triplet (components, simplex weights, kernel). Its projection
``f(x) = sum_i p_i k^2(x, c_i)`` times the kernel's normalisation constant
is a density (rbf kernel) or, on the canonical basis, a categorical PMF
(cosine kernel).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from kdm import kernels
from kdm.errors import BadWeights, DimMismatch, WrongKernelKind
from kdm.kernels import KernelSpec

WEIGHT_NEG_TOL = 1e-12
WEIGHT_SUM_TOL = 1e-9
LOG_EPS = 1e-30


def _simplex(p, m):
    p = np.array(p, dtype=np.float64).reshape(-1)
    if p.shape[0] != m:
        raise DimMismatch(f"{p.shape[0]} weights for {m} components")
    if not np.all(np.isfinite(p)):
        raise BadWeights("weights must be finite")
    if np.any(p < -WEIGHT_NEG_TOL):
        raise BadWeights(f"negative weight {p.min()!r}")
    p[p < 0] = 0.0
    total = p.sum()
    if not total > 0:
        raise BadWeights("weights sum to zero")
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        p = p / total
    p.setflags(write=False)
    return p


def _components(C, kernel):
    C = np.array(C, dtype=np.float64)
    if C.ndim == 1:
        C = C[None, :]
    if C.ndim != 2 or C.shape[0] < 1:
        raise DimMismatch(f"components must be a non-empty matrix, got shape {C.shape}")
    if C.shape[1] != kernel.dim:
        raise DimMismatch(f"components have {C.shape[1]} columns, kernel dim is {kernel.dim}")
    if not np.all(np.isfinite(C)):
        raise DimMismatch("components must be finite")
    _check_rows(kernel, C)
    C.setflags(write=False)
    return C


def _check_rows(kernel, C):
    if kernel.kind == "cosine":
        kernels.check_nonzero(C)
    elif kernel.kind == "product":
        d = kernel.factors[0].dim
        _check_rows(kernel.factors[0], C[:, :d])
        _check_rows(kernel.factors[1], C[:, d:])


@dataclass(frozen=True, eq=False)
class KernelDensityMatrix:
    components: np.ndarray
    weights: np.ndarray
    kernel: KernelSpec

    def __post_init__(self):
        C = _components(self.components, self.kernel)
        object.__setattr__(self, "components", C)
        object.__setattr__(self, "weights", _simplex(self.weights, C.shape[0]))

    @property
    def m(self):
        return self.components.shape[0]

    @property
    def dim(self):
        return self.kernel.dim

    def to_json(self):
        return {
            "components": self.components.tolist(),
            "weights": self.weights.tolist(),
            "kernel": self.kernel.to_json(),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(np.array(obj["components"], dtype=np.float64),
                   np.array(obj["weights"], dtype=np.float64),
                   KernelSpec.from_json(obj["kernel"]))


@dataclass(frozen=True, eq=False)
class JointKDM:
    """KDM over pairs ``(x, y)`` with kernel ``k_x (x) k_y``, stored factored."""

    x_components: np.ndarray
    y_components: np.ndarray
    weights: np.ndarray
    x_kernel: KernelSpec
    y_kernel: KernelSpec

    def __post_init__(self):
        X = _components(self.x_components, self.x_kernel)
        Y = _components(self.y_components, self.y_kernel)
        if X.shape[0] != Y.shape[0]:
            raise DimMismatch(f"{X.shape[0]} x components vs {Y.shape[0]} y components")
        object.__setattr__(self, "x_components", X)
        object.__setattr__(self, "y_components", Y)
        object.__setattr__(self, "weights", _simplex(self.weights, X.shape[0]))

    @property
    def m(self):
        return self.x_components.shape[0]

    def to_json(self):
        return {
            "x_components": self.x_components.tolist(),
            "y_components": self.y_components.tolist(),
            "weights": self.weights.tolist(),
            "x_kernel": self.x_kernel.to_json(),
            "y_kernel": self.y_kernel.to_json(),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(np.array(obj["x_components"], dtype=np.float64),
                   np.array(obj["y_components"], dtype=np.float64),
                   np.array(obj["weights"], dtype=np.float64),
                   KernelSpec.from_json(obj["x_kernel"]),
                   KernelSpec.from_json(obj["y_kernel"]))


def make_kdm(C, p, k):
    return KernelDensityMatrix(C, p, k)


def make_joint(X, Y, p, kx, ky):
    return JointKDM(X, Y, p, kx, ky)


def _points(rho_dim, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != rho_dim:
        raise DimMismatch(f"query has shape {x.shape}, KDM dim is {rho_dim}")
    return x, single


def project(rho, x):
    """Projection ``f(x) = sum_i p_i k^2(x, c_i)``; vectorised over rows of ``x``."""
    x, single = _points(rho.dim, x)
    f = kernels.gram_sq(rho.kernel, x, rho.components) @ rho.weights
    return float(f[0]) if single else f


def density(rho, x):
    x, single = _points(rho.dim, x)
    f = kernels.norm_const(rho.kernel) * (kernels.gram_sq(rho.kernel, x, rho.components) @ rho.weights)
    return float(f[0]) if single else f


def log_likelihood(rho, X):
    X, _ = _points(rho.dim, X)
    return float(np.sum(np.log(density(rho, X) + LOG_EPS)))


def categorical_pmf(rho):
    """``pi_j = sum_i p_i (c_ij / |c_i|)^2`` for a cosine KDM."""
    if rho.kernel.kind != "cosine":
        raise WrongKernelKind("categorical_pmf needs a cosine KDM")
    return _pmf(rho.weights, rho.components)


def _pmf(weights, components):
    C = np.asarray(components, dtype=np.float64)
    kernels.check_nonzero(C)
    sq = C * C
    sq = sq / sq.sum(axis=1, keepdims=True)
    return weights @ sq


def flatten(joint):
    """The same distribution as a single KDM with a product kernel."""
    return KernelDensityMatrix(np.hstack([joint.x_components, joint.y_components]),
                               joint.weights,
                               kernels.product(joint.x_kernel, joint.y_kernel))


def unflatten(rho):
    if rho.kernel.kind != "product":
        raise WrongKernelKind("unflatten needs a product-kernel KDM")
    kx, ky = rho.kernel.factors
    return JointKDM(rho.components[:, :kx.dim], rho.components[:, kx.dim:], rho.weights, kx, ky)


def joint_density(joint, x, y):
    """Density of ``joint`` at paired rows of ``x`` and ``y``."""
    x, single = _points(joint.x_kernel.dim, x)
    y, _ = _points(joint.y_kernel.dim, y)
    if x.shape[0] != y.shape[0]:
        raise DimMismatch("x and y must have the same number of rows")
    kx = kernels.gram_sq(joint.x_kernel, x, joint.x_components)
    ky = kernels.gram_sq(joint.y_kernel, y, joint.y_components)
    m = kernels.norm_const(joint.x_kernel) * kernels.norm_const(joint.y_kernel)
    f = m * ((kx * ky) @ joint.weights)
    return float(f[0]) if single else f


def marginal(joint, keep):
    if keep == "x":
        return KernelDensityMatrix(joint.x_components, joint.weights, joint.x_kernel)
    if keep == "y":
        return KernelDensityMatrix(joint.y_components, joint.weights, joint.y_kernel)
    raise ValueError(f"keep must be 'x' or 'y', got {keep!r}")


def is_simplex(p, tol=WEIGHT_SUM_TOL):
    p = np.asarray(p)
    return bool(np.all(p >= 0) and math.isclose(p.sum(), 1.0, abs_tol=tol))
