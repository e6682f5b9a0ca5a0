"""Bundled study populations used by the bundled configs and the test suite."""

from __future__ import annotations

import numpy as np

from .populations import DiscretePopulation, StepLogit, TwoClassGaussian

__all__ = [
    "oatmeal",
    "steplogit",
    "example2",
    "simulation1",
    "simulation2",
    "correct_gaussian",
    "correct_discrete",
]


def oatmeal() -> DiscretePopulation:
    """Two binary covariates (exposure, family history) with an interaction.

    10% of the population has a family history; half is exposed,
    independently.  Cell log-odds make the additive model misspecified:
    exposure is protective without family history, harmful with it.
    """
    return DiscretePopulation(
        points=[[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]],
        masses=[0.45, 0.05, 0.45, 0.05],
        logodds=[-5.0, -4.0, -10.0, -1.0],
    )


def steplogit() -> StepLogit:
    """Scalar population with a jump: log-odds -10 + 5x + 3*1{x>0.5}."""
    return StepLogit()


def example2() -> TwoClassGaussian:
    """Bivariate Gaussian classes with unequal covariances, 1% positives."""
    return TwoClassGaussian(
        prior1=0.01,
        mu0=np.zeros(2),
        mu1=[1.5, 1.5],
        sigma0=np.eye(2),
        sigma1=np.diag([0.3, 5.0]),
    )


def simulation1() -> TwoClassGaussian:
    """Five-dimensional misspecified Gaussian study population, 1% positives."""
    return TwoClassGaussian(
        prior1=0.01,
        mu0=np.zeros(5),
        mu1=[1.0, 1.0, 1.0, 1.0, 4.0],
        sigma0=np.diag([1.0, 1.0, 1.0, 1.0, 9.0]),
        sigma1=np.eye(5),
    )


def simulation2(p: int = 50) -> TwoClassGaussian:
    """Correctly specified Gaussian population, 10% positives.

    Half the coordinates of mu1 are 1, the rest 0; identity covariances.
    p=50 is the headline setting; smaller even p gives desk-scale runs.
    """
    if p < 2 or p % 2:
        raise ValueError("p must be even and at least 2")
    mu1 = np.concatenate([np.ones(p // 2), np.zeros(p // 2)])
    return TwoClassGaussian(
        prior1=0.10, mu0=np.zeros(p), mu1=mu1, sigma0=np.eye(p), sigma1=np.eye(p)
    )


def correct_gaussian(p: int = 5, prior1: float = 0.05, mu_scale: float = 0.6) -> TwoClassGaussian:
    """Correctly specified Gaussian population for variance-law studies."""
    return TwoClassGaussian(
        prior1=prior1,
        mu0=np.zeros(p),
        mu1=np.full(p, mu_scale),
        sigma0=np.eye(p),
        sigma1=np.eye(p),
    )


def correct_discrete() -> DiscretePopulation:
    """Discrete population whose log-odds is exactly linear in x."""
    points = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    theta0 = np.array([-2.0, 1.0, 0.5])
    return DiscretePopulation(
        points=points,
        masses=[0.4, 0.3, 0.2, 0.1],
        logodds=theta0[0] + points @ theta0[1:],
    )
