"""Ancestral sampling from KDMs.

rbf KDM: pick a component from the weights, then add isotropic Gaussian
noise with per-dimension std ``sigma / sqrt(2)`` (the Gaussian that the
squared kernel is proportional to). cosine KDM: draw canonical-basis
indices from the categorical PMF ``pi``.
"""
import numpy as np

from kdm import kernels
from kdm.density import categorical_pmf
from kdm.errors import WrongKernelKind
from kdm.rng import as_rng


def sample_continuous(rho, n_samples, rng):
    if rho.kernel.kind != "rbf":
        raise WrongKernelKind("sample_continuous needs an rbf KDM")
    rng = as_rng(rng)
    n = int(n_samples)
    if n == 0:
        return np.empty((0, rho.dim))
    idx = rng.categorical(rho.weights, n)
    noise = rng.normal((n, rho.dim))
    return rho.components[idx] + kernels.sampling_std(rho.kernel) * noise


def sample_discrete(rho, n_samples, rng):
    if rho.kernel.kind != "cosine":
        raise WrongKernelKind("sample_discrete needs a cosine KDM")
    rng = as_rng(rng)
    if int(n_samples) == 0:
        return np.empty(0, dtype=np.int64)
    return rng.categorical(categorical_pmf(rho), int(n_samples))


def sample(rho, n_samples, rng):
    """Dispatch on the kernel kind."""
    if rho.kernel.kind == "cosine":
        return sample_discrete(rho, n_samples, rng)
    return sample_continuous(rho, n_samples, rng)
