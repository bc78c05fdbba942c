"""KDM inference: input KDM + joint KDM -> output KDM.

For input components ``x_l`` (weights ``p_l``) and joint components
``(x'_i, y'_i)`` (weights ``p'_i``) the output KDM keeps the ``y'_i`` and
gets weights

    p''_i = sum_l p_l * p'_i k^2(x_l, x'_i) / sum_j p'_j k^2(x_l, x'_j)

The inner fraction is the responsibility matrix. When a row's denominator
underflows below ``DEGENERATE_DENOM`` that row falls back to the prior
``p'`` instead of producing NaN.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kdm import kernels
from kdm.density import JointKDM, KernelDensityMatrix, _pmf
from kdm.errors import DimMismatch, KernelMismatch, WrongKernelKind

DEGENERATE_DENOM = 1e-300


@dataclass(frozen=True, eq=False)
class InferenceResult:
    output: KernelDensityMatrix
    responsibilities: np.ndarray


def point_kdm(x, k):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimMismatch("point_kdm takes a single vector")
    return KernelDensityMatrix(x[None, :], np.ones(1), k)


def responsibilities(kx_sq, prior):
    """Row-normalised ``prior * k^2``, with the prior fallback for dead rows.

    Returns ``(R, denom, degenerate_mask)``.
    """
    A = kx_sq * prior
    denom = A.sum(axis=1)
    dead = ~(denom >= DEGENERATE_DENOM)
    R = A / np.where(dead, 1.0, denom)[:, None]
    if dead.any():
        R[dead] = prior
    return R, denom, dead


def _check_input_kernel(k_in, k_joint):
    if not kernels.same_kernel(k_in, k_joint):
        raise KernelMismatch(
            f"input kernel {k_in.to_json()} does not match joint x kernel {k_joint.to_json()}")


def infer(rho_x, joint):
    _check_input_kernel(rho_x.kernel, joint.x_kernel)
    K = kernels.gram_sq(joint.x_kernel, rho_x.components, joint.x_components)
    R, _, _ = responsibilities(K, joint.weights)
    out = KernelDensityMatrix(joint.y_components, rho_x.weights @ R, joint.y_kernel)
    return InferenceResult(out, R)


def infer_points(joint, X):
    """Output weights ``p''`` for each row of ``X`` taken as a point input.

    Equivalent to ``infer(point_kdm(x), joint).output.weights`` row by row,
    but with a single Gram block.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    K = kernels.gram_sq(joint.x_kernel, X, joint.x_components)
    R, _, _ = responsibilities(K, joint.weights)
    return R


def reverse(joint):
    return JointKDM(joint.y_components, joint.x_components, joint.weights,
                    joint.y_kernel, joint.x_kernel)


def predict_mean(result):
    """Mixture mean ``sum_i p''_i y'_i`` of an rbf output."""
    out = result.output if isinstance(result, InferenceResult) else result
    if out.kernel.kind != "rbf":
        raise WrongKernelKind("predict_mean needs an rbf output KDM")
    return out.weights @ out.components


def predict_pmf(result):
    out = result.output if isinstance(result, InferenceResult) else result
    if out.kernel.kind != "cosine":
        raise WrongKernelKind("predict_pmf needs a cosine output KDM")
    return _pmf(out.weights, out.components)


def pmf_points(joint, X):
    """Class probabilities ``pi`` for each row of ``X`` (cosine y kernel)."""
    if joint.y_kernel.kind != "cosine":
        raise WrongKernelKind("pmf_points needs a cosine y kernel")
    R = infer_points(joint, X)
    sq = joint.y_components ** 2
    sq = sq / sq.sum(axis=1, keepdims=True)
    return R @ sq


def mean_points(joint, X):
    if joint.y_kernel.kind != "rbf":
        raise WrongKernelKind("mean_points needs an rbf y kernel")
    return infer_points(joint, X) @ joint.y_components


def conditional_density(joint, x0, y):
    """``f(y | x0)``: joint density at ``(x0, y)`` over the x-marginal at ``x0``.

    Vectorised over rows of ``y``. A dead denominator yields the y-marginal,
    consistent with :func:`infer`.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    if single:
        y = y[None, :]
    kx = kernels.gram_sq(joint.x_kernel, x0, joint.x_components)
    R, _, _ = responsibilities(kx, joint.weights)
    ky = kernels.gram_sq(joint.y_kernel, y, joint.y_components)
    f = kernels.norm_const(joint.y_kernel) * (ky @ R[0])
    return float(f[0]) if single else f
