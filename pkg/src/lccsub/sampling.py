"""Subsampling estimators: uniform, case-control, weighted CC, local CC.

Each scheme accepts row i with a probability that may depend on (x_i, y_i),
then fits a weighted logistic regression whose offsets absorb the sampling
tilt, so the fitted coefficients estimate the original-population model
directly.  The equivalent two-step form (plain fit, then add the stored
`adjustment`) is exposed through the subsample and exercised in tests.

Acceptance uses the coupling z_i = 1{u_i <= prob_i} against caller-supplied
uniforms, so one shared uniform stream makes draws comparable across
schemes and pilots.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import _kernels as K
from .glm import FitConfig, FitResult, ModelParams, ObservationSet, fit_logistic

__all__ = [
    "Uniform",
    "CaseControl",
    "WeightedCaseControl",
    "LocalCaseControl",
    "SamplingScheme",
    "WeightedSubsample",
    "EmptySubsample",
    "TooFewCases",
    "PilotFit",
    "acceptance_probability",
    "acceptance_probabilities",
    "draw_subsample",
    "fit_subsample",
    "estimate",
    "fit_pilot_wcc",
    "thin_uniform",
    "class_balanced_scheme",
    "calibrate_lcc_rate",
]


class EmptySubsample(Exception):
    """No rows were accepted."""


class TooFewCases(Exception):
    """A class needed by the scheme is absent from the data."""


@dataclass(frozen=True)
class Uniform:
    """Accept every row with the same rate; weights 1, no adjustment."""

    rate: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.rate <= 1.0:
            raise ValueError("rate must be in (0, 1]")


@dataclass(frozen=True)
class CaseControl:
    """Accept with a1 (cases) or a0 (controls); correct the intercept by
    the log-selection bias b = log(a1/a0) afterwards."""

    a0: float
    a1: float

    def __post_init__(self):
        for name in ("a0", "a1"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must be in (0, 1]")

    @property
    def bias(self) -> float:
        return float(np.log(self.a1 / self.a0))


@dataclass(frozen=True)
class WeightedCaseControl:
    """Case-control acceptance with Horvitz-Thompson weights 1/a(y);
    the weighted fit needs no correction."""

    a0: float
    a1: float

    def __post_init__(self):
        for name in ("a0", "a1"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must be in (0, 1]")


@dataclass(frozen=True)
class LocalCaseControl:
    """Accept with c*|y - ptilde(x)| clipped at 1 and weight floored at 1.

    retain_cases keeps every case (probability 1) with weight
    c*(1 - ptilde(x)) instead, preserving the expected weighted
    contribution of each row.
    """

    pilot: ModelParams
    c: float = 1.0
    retain_cases: bool = False

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("c must be positive")


SamplingScheme = Uniform | CaseControl | WeightedCaseControl | LocalCaseControl


def acceptance_probabilities(scheme: SamplingScheme, features, labels):
    """Vectorized (prob, weight) for every row."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n = labels.shape[0]
    if isinstance(scheme, Uniform):
        return np.full(n, scheme.rate), np.ones(n)
    if isinstance(scheme, CaseControl):
        prob = np.where(labels == 1.0, scheme.a1, scheme.a0)
        return prob, np.ones(n)
    if isinstance(scheme, WeightedCaseControl):
        prob = np.where(labels == 1.0, scheme.a1, scheme.a0)
        return prob, 1.0 / prob
    if isinstance(scheme, LocalCaseControl):
        eta = scheme.pilot.linear_predictor(features)
        # uniforms are irrelevant for prob/weight; pass u=2 so keep is unused
        _, weight, prob = K.lcc_accept(
            eta, labels, scheme.c, np.full(n, 2.0), scheme.retain_cases
        )
        return prob, weight
    raise TypeError(f"unknown scheme {type(scheme)!r}")


def acceptance_probability(scheme: SamplingScheme, x, y) -> tuple[float, float]:
    """Acceptance probability and fit weight for a single row."""
    prob, weight = acceptance_probabilities(
        scheme, np.atleast_2d(np.asarray(x, dtype=np.float64)), [float(y)]
    )
    return float(prob[0]), float(weight[0])


def _scheme_adjustment(scheme: SamplingScheme, p: int) -> np.ndarray:
    """Coefficient vector to add to a plain (offset-free) subsample fit."""
    adj = np.zeros(p + 1)
    if isinstance(scheme, CaseControl):
        adj[0] = -scheme.bias
    elif isinstance(scheme, LocalCaseControl):
        adj = scheme.pilot.as_array()
    return adj


@dataclass(frozen=True)
class WeightedSubsample:
    """Selected rows with fit weights, tilt offsets, and the adjustment.

    offsets are the per-row additions that make the subsample fit report
    original-population coefficients directly; equivalently the plain
    zero-offset fit plus `adjustment` gives the same estimate, since
    offset_i = -adjustment'(1, x_i) row by row.
    """

    source: ObservationSet
    rows: np.ndarray
    weights: np.ndarray
    offsets: np.ndarray
    expected_size: float
    realized_size: int
    scheme: SamplingScheme
    adjustment: np.ndarray

    def to_observation_set(self) -> ObservationSet:
        """Materialize the subsample, combining source weights and offsets."""
        if self.realized_size == 0:
            raise EmptySubsample("no rows were accepted")
        rows = self.rows
        return ObservationSet(
            self.source.features[rows],
            self.source.labels[rows],
            weights=self.source.weights[rows] * self.weights,
            offsets=self.source.offsets[rows] + self.offsets,
        )


def draw_subsample(
    data: ObservationSet, scheme: SamplingScheme, uniforms
) -> WeightedSubsample:
    """Accept-reject pass: row i enters iff uniforms[i] <= prob_i.

    Deterministic given (data, scheme, uniforms).
    """
    uniforms = np.asarray(uniforms, dtype=np.float64)
    if uniforms.shape != (data.n,):
        raise ValueError(f"need {data.n} uniforms, got shape {uniforms.shape}")
    if isinstance(scheme, LocalCaseControl):
        eta = scheme.pilot.linear_predictor(data.features)
        keep, weight, prob = K.lcc_accept(
            eta, data.labels, scheme.c, uniforms, scheme.retain_cases
        )
        rows = np.flatnonzero(keep)
        weights = weight[rows]
        offsets = -eta[rows]
    else:
        prob, weight = acceptance_probabilities(scheme, data.features, data.labels)
        rows = np.flatnonzero(uniforms <= prob)
        weights = weight[rows]
        if isinstance(scheme, CaseControl):
            offsets = np.full(rows.size, scheme.bias)
        else:
            offsets = np.zeros(rows.size)
    return WeightedSubsample(
        source=data,
        rows=rows,
        weights=weights,
        offsets=offsets,
        expected_size=float(prob.sum()),
        realized_size=int(rows.size),
        scheme=scheme,
        adjustment=_scheme_adjustment(scheme, data.p),
    )


def fit_subsample(sub: WeightedSubsample, config: FitConfig | None = None) -> FitResult:
    """Weighted, offset-aware fit of the subsample.

    The offsets encode the sampling tilt, so the returned coefficients are
    already adjusted to the original population (no post-hoc addition).
    """
    return fit_logistic(sub.to_observation_set(), config)


def estimate(
    data: ObservationSet,
    scheme: SamplingScheme,
    rng,
    config: FitConfig | None = None,
) -> ModelParams:
    """Draw one subsample with rng-supplied uniforms and fit it."""
    sub = draw_subsample(data, scheme, rng.random(data.n))
    return fit_subsample(sub, config).params


def class_balanced_scheme(
    labels, target_size: int, weighted: bool
) -> CaseControl | WeightedCaseControl:
    """Acceptance rates giving equal expected class counts, total target_size.

    Expected per-class count is min(target_size/2, n0, n1): when one class
    is exhausted the other is matched to it (all the cases and one control
    per case) and the expected total falls short of the target.
    """
    labels = np.asarray(labels)
    n1 = int(np.sum(labels == 1.0))
    n0 = int(np.sum(labels == 0.0))
    if n1 == 0 or n0 == 0:
        raise TooFewCases(f"class counts (n0={n0}, n1={n1}) cannot be balanced")
    half = min(0.5 * target_size, float(n1), float(n0))
    a1 = half / n1
    a0 = half / n0
    cls = WeightedCaseControl if weighted else CaseControl
    return cls(a0=a0, a1=a1)


@dataclass(frozen=True)
class PilotFit:
    """Pilot coefficients plus the subsample that produced them.

    subsample.rows reports the consumed rows so callers can recycle them
    into the second stage or exclude them from it.
    """

    params: ModelParams
    subsample: WeightedSubsample


def fit_pilot_wcc(
    data: ObservationSet,
    target_size: int,
    rng,
    config: FitConfig | None = None,
) -> PilotFit:
    """Pilot via one pass of weighted case-control sampling.

    Expected class counts are equal and the expected total is target_size,
    capped at the available counts.
    """
    if target_size < data.p + 2:
        raise ValueError("target_size too small to fit the model")
    scheme = class_balanced_scheme(data.labels, target_size, weighted=True)
    sub = draw_subsample(data, scheme, rng.random(data.n))
    return PilotFit(params=fit_subsample(sub, config).params, subsample=sub)


def thin_uniform(sub: WeightedSubsample, n_s: int, rng) -> WeightedSubsample:
    """Uniform without-replacement thinning to exactly n_s rows.

    Weights, offsets, and the adjustment carry through unchanged.
    """
    if n_s > sub.realized_size:
        raise ValueError(f"cannot thin {sub.realized_size} rows to {n_s}")
    pick = np.sort(rng.choice(sub.realized_size, size=n_s, replace=False))
    return replace(
        sub,
        rows=sub.rows[pick],
        weights=sub.weights[pick],
        offsets=sub.offsets[pick],
        expected_size=float(n_s),
        realized_size=int(n_s),
    )


def calibrate_lcc_rate(data: ObservationSet, pilot: ModelParams, target_size: int) -> float:
    """c such that the expected subsample size is about target_size.

    One pass over the acceptance probabilities at c=1; the clipping at
    probability 1 makes the result approximate for c > 1.
    """
    eta = pilot.linear_predictor(data.features)
    expected_c1 = float(np.sum(np.abs(data.labels - K.sigmoid(eta))))
    if expected_c1 <= 0:
        raise ValueError("degenerate pilot: zero expected acceptance")
    return target_size / expected_c1
