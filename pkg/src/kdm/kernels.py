"""Kernels with unit diagonal: cosine, RBF and their tensor product.

Everything downstream only needs the *squared* kernel, so that is what
this module evaluates.

RBF convention
--------------
The kernel is ``k(x, y) = exp(-|x - y|^2 / (2 sigma^2))``, hence
``k^2(x, y) = exp(-|x - y|^2 / sigma^2)``: an unnormalised isotropic
Gaussian with per-dimension standard deviation ``sigma / sqrt(2)``.
Three constants follow from that and nothing else:

* normalisation ``M = (sqrt(pi) * sigma) ** -n``;
* equivalent KDE bandwidth ``sigma / sqrt(2)``;
* sampling covariance ``(sigma^2 / 2) * I``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from kdm import _backend
from kdm.errors import DimMismatch, InvalidKernel, ZeroVector

SIGMA_MIN = 1e-3
ZERO_NORM = 1e-12

KINDS = ("cosine", "rbf", "product")


@dataclass(frozen=True)
class KernelSpec:
    """Immutable kernel description.

    ``sigma`` is only meaningful for ``kind == "rbf"``; evaluation uses
    ``max(sigma, sigma_min)``. A product kernel acts on the concatenation
    of its two factors' inputs.
    """

    kind: str
    dim: int
    sigma: float | None = None
    factors: tuple = ()
    sigma_min: float = SIGMA_MIN

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidKernel(f"unknown kernel kind {self.kind!r}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise InvalidKernel(f"dim must be a positive integer, got {self.dim!r}")
        if self.kind == "rbf":
            if self.sigma is None or not math.isfinite(self.sigma) or self.sigma <= 0:
                raise InvalidKernel(f"rbf kernel needs sigma > 0, got {self.sigma!r}")
            if not self.sigma_min > 0:
                raise InvalidKernel("sigma_min must be positive")
        elif self.sigma is not None:
            raise InvalidKernel(f"{self.kind} kernel takes no sigma")
        if self.kind == "product":
            if len(self.factors) != 2 or not all(isinstance(f, KernelSpec) for f in self.factors):
                raise InvalidKernel("product kernel needs exactly two KernelSpec factors")
            if self.dim != self.factors[0].dim + self.factors[1].dim:
                raise InvalidKernel("product dim must equal the sum of factor dims")
        elif self.factors:
            raise InvalidKernel(f"{self.kind} kernel takes no factors")

    @property
    def log_sigma(self):
        return math.log(self.sigma)

    @property
    def effective_sigma(self):
        return max(self.sigma, self.sigma_min)

    def with_sigma(self, sigma):
        return KernelSpec("rbf", self.dim, float(sigma), sigma_min=self.sigma_min)

    def to_json(self):
        out = {"kind": self.kind, "dim": int(self.dim)}
        if self.kind == "rbf":
            out["sigma"] = float(self.sigma)
            if self.sigma_min != SIGMA_MIN:
                out["sigma_min"] = float(self.sigma_min)
        if self.kind == "product":
            out["factors"] = [f.to_json() for f in self.factors]
        return out

    @classmethod
    def from_json(cls, obj):
        try:
            kind = obj["kind"]
            dim = int(obj["dim"])
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidKernel(f"bad kernel JSON {obj!r}") from exc
        if kind == "product":
            factors = tuple(cls.from_json(f) for f in obj.get("factors", ()))
            return cls("product", dim, factors=factors)
        sigma = obj.get("sigma")
        kwargs = {}
        if "sigma_min" in obj:
            kwargs["sigma_min"] = float(obj["sigma_min"])
        return cls(kind, dim, None if sigma is None else float(sigma), **kwargs)


def cosine(dim):
    return KernelSpec("cosine", dim)


def rbf(dim, sigma, sigma_min=SIGMA_MIN):
    return KernelSpec("rbf", dim, float(sigma), sigma_min=sigma_min)


def product(kx, ky):
    return KernelSpec("product", kx.dim + ky.dim, factors=(kx, ky))


def same_kernel(a, b, tol=1e-12):
    """Structural equality, with ``tol`` slack on sigma."""
    if a.kind != b.kind or a.dim != b.dim:
        return False
    if a.kind == "rbf":
        return abs(a.sigma - b.sigma) <= tol * max(1.0, abs(a.sigma))
    if a.kind == "product":
        return all(same_kernel(fa, fb, tol) for fa, fb in zip(a.factors, b.factors))
    return True


def _as_matrix(X, dim, name):
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != dim:
        raise DimMismatch(f"{name} has shape {X.shape}, kernel expects {dim} columns")
    return X


def check_nonzero(X):
    norms = np.sqrt((X * X).sum(axis=-1))
    bad = np.flatnonzero(~(norms >= ZERO_NORM))
    if bad.size:
        raise ZeroVector(f"cosine kernel on a (near) zero vector at row {int(bad[0])}")


def gram_sq(k, X, Y):
    """Matrix of squared kernel values ``k^2(X_i, Y_j)``."""
    X = _as_matrix(X, k.dim, "X")
    Y = _as_matrix(Y, k.dim, "Y")
    return _gram_sq(k, X, Y)


def _gram_sq(k, X, Y):
    if k.kind == "rbf":
        return _backend.impl.rbf_gram_sq(X, Y, k.effective_sigma)
    if k.kind == "cosine":
        check_nonzero(X)
        check_nonzero(Y)
        return _backend.impl.cos_gram_sq(X, Y)
    kx, ky = k.factors
    d = kx.dim
    gx = _gram_sq(kx, np.ascontiguousarray(X[:, :d]), np.ascontiguousarray(Y[:, :d]))
    gy = _gram_sq(ky, np.ascontiguousarray(X[:, d:]), np.ascontiguousarray(Y[:, d:]))
    return gx * gy


def rbf_gram_sq_dist(k, X, Y):
    """``(K, D2)``: squared RBF Gram block plus squared distances."""
    X = _as_matrix(X, k.dim, "X")
    Y = _as_matrix(Y, k.dim, "Y")
    return _backend.impl.rbf_gram_sq(X, Y, k.effective_sigma, True)


def eval_sq(k, x, y):
    """Squared kernel value for two single points."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1:
        raise DimMismatch("eval_sq takes two vectors")
    return float(gram_sq(k, x, y)[0, 0])


def norm_const(k):
    if k.kind == "cosine":
        return 1.0
    if k.kind == "rbf":
        return (math.sqrt(math.pi) * k.effective_sigma) ** (-k.dim)
    return norm_const(k.factors[0]) * norm_const(k.factors[1])


def log_norm_const(k):
    if k.kind == "cosine":
        return 0.0
    if k.kind == "rbf":
        return -k.dim * (0.5 * math.log(math.pi) + math.log(k.effective_sigma))
    return log_norm_const(k.factors[0]) + log_norm_const(k.factors[1])


def kde_bandwidth(k):
    """Bandwidth of the classic Gaussian KDE equal to an rbf KDM density."""
    return k.effective_sigma / math.sqrt(2.0)


def sampling_std(k):
    return k.effective_sigma / math.sqrt(2.0)


class GradSq(NamedTuple):
    dx: np.ndarray
    dy: np.ndarray
    # float for rbf, None for cosine, tuple of those for product
    dlog_sigma: object


def grad_sq(k, x, y):
    """Analytic gradient of ``k^2(x, y)`` w.r.t. ``x``, ``y`` and ``log sigma``.

    At a floored sigma (``sigma < sigma_min``) the log-sigma derivative is 0.
    """
    x = _as_matrix(x, k.dim, "x")[0]
    y = _as_matrix(y, k.dim, "y")[0]
    return _grad_sq(k, x, y)


def _grad_sq(k, x, y):
    if k.kind == "rbf":
        s = k.effective_sigma
        val = eval_sq(k, x, y)
        diff = x - y
        dx = (-2.0 / (s * s)) * val * diff
        if k.sigma < k.sigma_min:
            dls = 0.0
        else:
            dls = 2.0 * float(diff @ diff) / (s * s) * val
        return GradSq(dx, -dx, dls)
    if k.kind == "cosine":
        check_nonzero(x[None, :])
        check_nonzero(y[None, :])
        c = float(x @ y)
        a = float(x @ x)
        b = float(y @ y)
        f = 2.0 * c / (a * b)
        return GradSq(f * (y - (c / a) * x), f * (x - (c / b) * y), None)
    kx, ky = k.factors
    d = kx.dim
    gx = _grad_sq(kx, x[:d], y[:d])
    gy = _grad_sq(ky, x[d:], y[d:])
    vx = eval_sq(kx, x[:d], y[:d])
    vy = eval_sq(ky, x[d:], y[d:])
    dx = np.concatenate([gx.dx * vy, gy.dx * vx])
    dy = np.concatenate([gx.dy * vy, gy.dy * vx])

    def scale(g, v):
        if g is None:
            return None
        if isinstance(g, tuple):
            return tuple(scale(e, v) for e in g)
        return g * v

    return GradSq(dx, dy, (scale(gx.dlog_sigma, vy), scale(gy.dlog_sigma, vx)))
