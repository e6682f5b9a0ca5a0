"""Biased subsampling estimators for logistic regression on imbalanced data.

Subpackages:
  glm          weighted, offset-aware logistic regression primitives
  sampling     uniform / case-control / weighted CC / local CC subsampling
  populations  synthetic populations with exact oracles
  asymptotics  population score/Hessian/variance evaluation
  experiments  seeded Monte-Carlo replication harness
  cli          command-line interface
"""

from .glm import (
    FitConfig,
    FitResult,
    GlmError,
    ModelParams,
    ObservationSet,
    Separation,
    Singular,
    fit_logistic,
    hessian,
    neg_log_likelihood,
    score,
)

__all__ = [
    "FitConfig",
    "FitResult",
    "GlmError",
    "ModelParams",
    "ObservationSet",
    "Separation",
    "Singular",
    "fit_logistic",
    "hessian",
    "neg_log_likelihood",
    "score",
]

__version__ = "0.1.0"
