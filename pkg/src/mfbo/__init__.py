"""Constrained multi-fidelity Bayesian optimization.

Fuses cheap low-fidelity and expensive high-fidelity evaluations of a
black-box objective (plus inequality constraints) behind a single
budget-aware loop: GP surrogates per fidelity, a nonlinear two-fidelity
fusion model, weighted expected improvement, and a predictive-variance
rule that decides which fidelity to spend next.
"""

from mfbo.gp import (
    ContractViolation,
    FitConfig,
    FitFailed,
    GpModel,
    Hyperparameters,
    NotPositiveDefinite,
    PosteriorGaussian,
    TrainingSet,
    fit,
    kernel_se,
    nlml,
    nlml_gradient,
    predict,
)

__version__ = "0.1.0"

__all__ = [
    "ContractViolation",
    "FitConfig",
    "FitFailed",
    "GpModel",
    "Hyperparameters",
    "NotPositiveDefinite",
    "PosteriorGaussian",
    "TrainingSet",
    "fit",
    "kernel_se",
    "nlml",
    "nlml_gradient",
    "predict",
    "__version__",
]
