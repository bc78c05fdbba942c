"""Kernel density matrices: density estimation, inference, training and sampling."""
from kdm.density import (JointKDM, KernelDensityMatrix, categorical_pmf, density,
                         log_likelihood, make_joint, make_kdm, marginal, project)
from kdm.inference import (InferenceResult, conditional_density, infer, point_kdm,
                           predict_mean, reverse)
from kdm.kernels import KernelSpec, eval_sq, gram_sq, grad_sq, norm_const
from kdm.rng import RngState
from kdm.sampling import sample, sample_continuous, sample_discrete
from kdm.training import (BagDataset, LabeledDataset, TrainConfig, fit_discriminative,
                          fit_llp, fit_mle, fit_nonparametric)

__version__ = "0.1.0"

__all__ = [
    "BagDataset", "InferenceResult", "JointKDM", "KernelDensityMatrix", "KernelSpec",
    "LabeledDataset", "RngState", "TrainConfig", "categorical_pmf", "conditional_density",
    "density", "eval_sq", "fit_discriminative", "fit_llp", "fit_mle", "fit_nonparametric",
    "grad_sq", "gram_sq", "infer", "log_likelihood", "make_joint", "make_kdm", "marginal",
    "norm_const", "point_kdm", "predict_mean", "project", "reverse", "sample",
    "sample_continuous", "sample_discrete",
]
