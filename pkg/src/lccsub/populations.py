"""Synthetic populations with exact log-odds and population-limit solvers.

Three population kinds:
  DiscretePopulation  finite support, exact cell masses and log-odds
  TwoClassGaussian    class prior + per-class Gaussian features
  StepLogit           scalar X ~ U(0,1) with a jump in the log-odds

Population risk minimizers (the large-sample limits of the estimators) are
solved by damped Newton on a deterministic integration grid: exact cell sums
for discrete populations, two-panel Gauss-Legendre quadrature for the step
population (the integrand is smooth on each side of the jump), and a
deterministic scrambled-Sobol sample per class for Gaussian populations,
with conservative Monte-Carlo standard errors reported.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Union

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from . import _kernels as K
from .glm import ModelParams, ObservationSet

__all__ = [
    "DiscretePopulation",
    "TwoClassGaussian",
    "StepLogit",
    "PopulationSpec",
    "AcceptanceTooLow",
    "Grid",
    "OracleFit",
    "TiltedSample",
    "PrecisionRecallCurve",
    "true_log_odds",
    "conditional_probability",
    "positive_rate",
    "equal_class_bias",
    "integration_grid",
    "population_score",
    "population_theta_star",
    "theta_cc_limit",
    "marginal_odds_ratio",
    "sample_population",
    "sample_conditional",
    "sample_tilted",
    "precision_recall",
]


class AcceptanceTooLow(Exception):
    """Tilted rejection sampling exceeded its proposal cap."""


@dataclass(frozen=True)
class DiscretePopulation:
    """Finite-support population: feature points, masses, conditional log-odds."""

    points: np.ndarray  # (m, p)
    masses: np.ndarray  # (m,), sums to 1
    logodds: np.ndarray  # (m,)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim != 2:
            raise ValueError("points must be 2-d")
        masses = np.array(self.masses, dtype=np.float64, copy=True)
        logodds = np.array(self.logodds, dtype=np.float64, copy=True)
        if masses.shape != (pts.shape[0],) or logodds.shape != (pts.shape[0],):
            raise ValueError("masses/logodds must match the number of points")
        if not np.all(masses > 0):
            raise ValueError("cell masses must be positive")
        if abs(masses.sum() - 1.0) > 1e-12:
            raise ValueError(f"cell masses sum to {masses.sum()!r}, not 1")
        if not np.all(np.isfinite(logodds)):
            raise ValueError("log-odds must be finite")
        for a in (pts, masses, logodds):
            a.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "logodds", logodds)

    @property
    def p(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True, eq=False)
class TwoClassGaussian:
    """P(Y=1) = prior1; X | Y=y ~ N(mu_y, sigma_y)."""

    prior1: float
    mu0: np.ndarray
    mu1: np.ndarray
    sigma0: np.ndarray
    sigma1: np.ndarray

    def __post_init__(self):
        if not 0.0 < self.prior1 < 1.0:
            raise ValueError("prior1 must be in (0,1)")
        mu0 = np.array(self.mu0, dtype=np.float64, copy=True).reshape(-1)
        mu1 = np.array(self.mu1, dtype=np.float64, copy=True).reshape(-1)
        if mu0.shape != mu1.shape:
            raise ValueError("mu0 and mu1 must have the same dimension")
        p = mu0.size
        s0 = np.array(self.sigma0, dtype=np.float64, copy=True)
        s1 = np.array(self.sigma1, dtype=np.float64, copy=True)
        for name, s in (("sigma0", s0), ("sigma1", s1)):
            if s.shape != (p, p):
                raise ValueError(f"{name} must be {p}x{p}")
            if not np.allclose(s, s.T, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
            np.linalg.cholesky(s)  # SPD check
        for a in (mu0, mu1, s0, s1):
            a.flags.writeable = False
        object.__setattr__(self, "prior1", float(self.prior1))
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "mu1", mu1)
        object.__setattr__(self, "sigma0", s0)
        object.__setattr__(self, "sigma1", s1)

    @property
    def p(self) -> int:
        return self.mu0.size

    @cached_property
    def _chol(self):
        return np.linalg.cholesky(self.sigma0), np.linalg.cholesky(self.sigma1)

    @cached_property
    def _inv(self):
        return np.linalg.inv(self.sigma0), np.linalg.inv(self.sigma1)

    @cached_property
    def _logdet(self):
        return (
            float(np.linalg.slogdet(self.sigma0)[1]),
            float(np.linalg.slogdet(self.sigma1)[1]),
        )

    @property
    def correctly_specified(self) -> bool:
        """Equal class covariances make the true log-odds linear in x."""
        return bool(np.allclose(self.sigma0, self.sigma1, atol=1e-12))

    def linear_params(self) -> ModelParams:
        """Exact population coefficients when the log-odds is linear."""
        if not self.correctly_specified:
            raise ValueError("log-odds is not linear: class covariances differ")
        inv = self._inv[0]
        beta = inv @ (self.mu1 - self.mu0)
        alpha = (
            np.log(self.prior1 / (1.0 - self.prior1))
            - 0.5 * (self.mu1 @ inv @ self.mu1 - self.mu0 @ inv @ self.mu0)
        )
        return ModelParams(alpha, beta)


@dataclass(frozen=True)
class StepLogit:
    """X ~ U(0,1); log-odds a + b*x + jump*1{x > threshold}."""

    a: float = -10.0
    b: float = 5.0
    jump: float = 3.0
    threshold: float = 0.5

    def __post_init__(self):
        for name in ("a", "b", "jump", "threshold"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must be in (0,1)")

    @property
    def p(self) -> int:
        return 1


PopulationSpec = Union[DiscretePopulation, TwoClassGaussian, StepLogit]


# ---------------------------------------------------------------------------
# log-odds and sampling


def true_log_odds(spec: PopulationSpec, x) -> np.ndarray:
    """Exact conditional log-odds f(x) at rows of x."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if isinstance(spec, DiscretePopulation):
        out = np.empty(x.shape[0])
        for i, row in enumerate(x):
            match = np.all(spec.points == row, axis=1)
            idx = np.flatnonzero(match)
            if idx.size == 0:
                raise ValueError(f"x={row} is not in the discrete support")
            out[i] = spec.logodds[idx[0]]
        return out
    if isinstance(spec, TwoClassGaussian):
        inv0, inv1 = spec._inv
        ld0, ld1 = spec._logdet
        d1 = x - spec.mu1
        d0 = x - spec.mu0
        q1 = np.einsum("ij,jk,ik->i", d1, inv1, d1)
        q0 = np.einsum("ij,jk,ik->i", d0, inv0, d0)
        prior_term = np.log(spec.prior1 / (1.0 - spec.prior1))
        return prior_term - 0.5 * (q1 - q0) - 0.5 * (ld1 - ld0)
    if isinstance(spec, StepLogit):
        xv = x[:, 0]
        return spec.a + spec.b * xv + spec.jump * (xv > spec.threshold)
    raise TypeError(f"unknown population spec {type(spec)!r}")


def conditional_probability(spec: PopulationSpec, x) -> np.ndarray:
    return K.sigmoid(true_log_odds(spec, x))


def positive_rate(spec: PopulationSpec) -> float:
    """P(Y=1), exact (quadrature-exact for the step population)."""
    if isinstance(spec, TwoClassGaussian):
        return spec.prior1
    grid = integration_grid(spec)
    return float(np.sum(grid.masses * grid.prob1))


def equal_class_bias(spec: PopulationSpec) -> float:
    """log-selection bias b giving equal expected class counts: log(P0/P1)."""
    p1 = positive_rate(spec)
    return float(np.log((1.0 - p1) / p1))


def sample_population(spec: PopulationSpec, n: int, rng) -> ObservationSet:
    """n i.i.d. draws (features, labels) from the population."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if isinstance(spec, TwoClassGaussian):
        labels = (rng.random(n) < spec.prior1).astype(np.float64)
        feats = _gaussian_features(spec, labels, rng)
        return ObservationSet(feats, labels)
    if isinstance(spec, DiscretePopulation):
        idx = rng.choice(spec.points.shape[0], size=n, p=spec.masses)
        feats = spec.points[idx]
        labels = (rng.random(n) < K.sigmoid(spec.logodds[idx])).astype(np.float64)
        return ObservationSet(feats, labels)
    if isinstance(spec, StepLogit):
        x = rng.random(n).reshape(-1, 1)
        labels = (rng.random(n) < conditional_probability(spec, x)).astype(np.float64)
        return ObservationSet(x, labels)
    raise TypeError(f"unknown population spec {type(spec)!r}")


def _gaussian_features(spec: TwoClassGaussian, labels, rng) -> np.ndarray:
    n = labels.shape[0]
    z = rng.standard_normal((n, spec.p))
    L0, L1 = spec._chol
    feats = np.empty_like(z)
    ones = labels == 1.0
    feats[ones] = spec.mu1 + z[ones] @ L1.T
    feats[~ones] = spec.mu0 + z[~ones] @ L0.T
    return feats


def sample_conditional(spec: PopulationSpec, labels, rng) -> np.ndarray:
    """Features drawn from X | Y=label, one row per entry of labels."""
    labels = np.asarray(labels, dtype=np.float64)
    if isinstance(spec, TwoClassGaussian):
        return _gaussian_features(spec, labels, rng)
    if isinstance(spec, DiscretePopulation):
        p = K.sigmoid(spec.logodds)
        out = np.empty((labels.shape[0], spec.p))
        for label, cond in ((1.0, p), (0.0, 1.0 - p)):
            sel = labels == label
            if not np.any(sel):
                continue
            w = spec.masses * cond
            w = w / w.sum()
            idx = rng.choice(spec.points.shape[0], size=int(sel.sum()), p=w)
            out[sel] = spec.points[idx]
        return out
    if isinstance(spec, StepLogit):
        # rejection from U(0,1) against the class-conditional density
        out = np.empty((labels.shape[0], 1))
        for label in (0.0, 1.0):
            sel = np.flatnonzero(labels == label)
            need = sel.size
            if need == 0:
                continue
            grid = np.linspace(0.0, 1.0, 4097).reshape(-1, 1)
            dens = conditional_probability(spec, grid)
            bound = float(dens.max() if label == 1.0 else (1.0 - dens).min() + 1.0)
            got = []
            while need > 0:
                m = max(4 * need, 1024)
                x = rng.random(m)
                px = conditional_probability(spec, x.reshape(-1, 1))
                target = px if label == 1.0 else 1.0 - px
                acc = x[rng.random(m) * bound < target]
                got.append(acc[:need])
                need -= len(got[-1])
            out[sel, 0] = np.concatenate(got)
        return out
    raise TypeError(f"unknown population spec {type(spec)!r}")


@dataclass(frozen=True)
class TiltedSample:
    """Accepted draws from the pilot-tilted measure plus the proposal count."""

    observations: ObservationSet
    proposals: int

    @property
    def acceptance_rate(self) -> float:
        return self.observations.n / self.proposals


def sample_tilted(
    spec: PopulationSpec,
    pilot: ModelParams,
    n_accept: int,
    rng,
    proposal_cap: int = 10**9,
) -> TiltedSample:
    """Rejection-sample the measure tilted by a(x,y) = |y - ptilde(x)|.

    Proposes from the population and accepts each row with probability
    a(x,y), stopping at exactly n_accept acceptances.  The proposal count
    (through the accepting row) supports estimating the marginal acceptance
    probability.
    """
    if n_accept < 1:
        raise ValueError("n_accept must be at least 1")
    feats_parts, label_parts = [], []
    accepted = 0
    proposals = 0
    batch = max(4096, 2 * n_accept)
    rate_num, rate_den = 0.0, 0
    while accepted < n_accept:
        if proposals >= proposal_cap:
            raise AcceptanceTooLow(
                f"{accepted}/{n_accept} acceptances after {proposals} proposals"
            )
        batch = int(min(batch, proposal_cap - proposals, 2**20))
        obs = sample_population(spec, batch, rng)
        eta = pilot.linear_predictor(obs.features)
        a = np.abs(obs.labels - K.sigmoid(eta))
        keep = rng.random(batch) <= a
        hits = np.flatnonzero(keep)
        if accepted + hits.size >= n_accept:
            last = hits[n_accept - accepted - 1]
            proposals += int(last) + 1
            hits = hits[: n_accept - accepted]
        else:
            proposals += batch
        feats_parts.append(obs.features[hits])
        label_parts.append(obs.labels[hits])
        accepted += hits.size
        rate_num += hits.size
        rate_den += batch
        rate = max(rate_num / rate_den, 1e-6)
        batch = int(min(max(4096, 1.2 * (n_accept - accepted) / rate), 2**20))
    return TiltedSample(
        ObservationSet(np.vstack(feats_parts), np.concatenate(label_parts)),
        proposals,
    )


# ---------------------------------------------------------------------------
# integration grids and population solvers


@dataclass(frozen=True)
class Grid:
    """Deterministic x-integration rule with the true p(x) at each node."""

    points: np.ndarray
    masses: np.ndarray
    prob1: np.ndarray
    exact: bool


_STEP_NODES_PER_PANEL = 256
_QMC_LOG2_PER_CLASS = 21
_QMC_SEED = 20140523


def _gauss_legendre(a: float, b: float, n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (b - a) * x + 0.5 * (a + b), 0.5 * (b - a) * w


def integration_grid(
    spec: PopulationSpec,
    mc_nodes: int | None = None,
    rng=None,
    qmc_log2: int = _QMC_LOG2_PER_CLASS,
) -> Grid:
    """Integration rule over the feature distribution.

    Discrete populations integrate exactly over cells; the step population
    uses Gauss-Legendre panels split at the jump.  Gaussian populations use
    a scrambled-Sobol sample per class (deterministic, seeded) unless
    mc_nodes is given, in which case plain Monte-Carlo nodes are drawn from
    rng and masses are 1/mc_nodes.
    """
    if isinstance(spec, DiscretePopulation):
        return Grid(spec.points, spec.masses, K.sigmoid(spec.logodds), True)
    if isinstance(spec, StepLogit):
        x1, w1 = _gauss_legendre(0.0, spec.threshold, _STEP_NODES_PER_PANEL)
        x2, w2 = _gauss_legendre(spec.threshold, 1.0, _STEP_NODES_PER_PANEL)
        pts = np.concatenate([x1, x2]).reshape(-1, 1)
        masses = np.concatenate([w1, w2])
        return Grid(pts, masses, conditional_probability(spec, pts), True)
    if isinstance(spec, TwoClassGaussian):
        if mc_nodes is not None:
            if rng is None:
                rng = np.random.default_rng(_QMC_SEED)
            labels = (rng.random(mc_nodes) < spec.prior1).astype(np.float64)
            pts = _gaussian_features(spec, labels, rng)
            masses = np.full(mc_nodes, 1.0 / mc_nodes)
        else:
            m = 2**qmc_log2
            parts, wparts = [], []
            L0, L1 = spec._chol
            for cls, (mu, L, prior) in enumerate(
                [(spec.mu0, L0, 1.0 - spec.prior1), (spec.mu1, L1, spec.prior1)]
            ):
                sob = qmc.Sobol(d=spec.p, scramble=True, seed=_QMC_SEED + cls)
                u = sob.random(m)
                u = np.clip(u, 1e-15, 1.0 - 1e-15)
                parts.append(mu + ndtri(u) @ L.T)
                wparts.append(np.full(m, prior / m))
            pts = np.vstack(parts)
            masses = np.concatenate(wparts)
        return Grid(pts, masses, conditional_probability(spec, pts), False)
    raise TypeError(f"unknown population spec {type(spec)!r}")


@dataclass(frozen=True)
class OracleFit:
    """Population solver output: coefficients plus Monte-Carlo SEs.

    mc_se is zero for exact (discrete / quadrature) evaluation; for
    Gaussian grids it is a conservative sandwich standard error treating
    the quasi-random nodes as i.i.d.
    """

    params: ModelParams
    mc_se: np.ndarray
    grad_norm: float


def _soft_newton(
    design: np.ndarray,
    masses: np.ndarray,
    target_p: np.ndarray,
    offsets: np.ndarray | float = 0.0,
    tol: float = 1e-12,
    max_iter: int = 200,
    start: np.ndarray | None = None,
):
    """Damped Newton for sum_i m_i * h(theta'x_i + o_i; target_p_i) -> min.

    This is the population score equation: at the optimum
    sum_i m_i (target_p_i - sigmoid(eta_i)) x_i = 0.
    """
    theta = np.zeros(design.shape[1]) if start is None else start.copy()

    def objective(th):
        eta = design @ th + offsets
        return float(np.sum(masses * (np.logaddexp(0.0, eta) - target_p * eta)))

    f = objective(theta)
    grad_norm = np.inf
    for _ in range(max_iter):
        eta = design @ theta + offsets
        mu = K.sigmoid(eta)
        s = design.T @ (masses * (target_p - mu))
        grad_norm = float(np.max(np.abs(s)))
        if grad_norm < tol:
            break
        Hw = masses * mu * (1.0 - mu)
        H = (design * Hw[:, None]).T @ design
        delta = np.linalg.solve(H, s)
        if grad_norm < 1e-7:
            theta = theta + delta
            f = objective(theta)
            continue
        step = 1.0
        for _ in range(60):
            cand = theta + step * delta
            f2 = objective(cand)
            if f2 <= f:
                break
            step *= 0.5
        theta, f = cand, f2
    else:
        raise RuntimeError(f"population solver stalled at |score|={grad_norm:.3g}")
    return theta, grad_norm


def _sandwich_se(design, masses, target_p, theta, offsets=0.0) -> np.ndarray:
    eta = design @ theta + offsets
    mu = K.sigmoid(eta)
    g = design * (masses * (target_p - mu))[:, None]
    B = g.T @ g
    A = (design * (masses * mu * (1.0 - mu))[:, None]).T @ design
    Ainv = np.linalg.inv(A)
    return np.sqrt(np.diag(Ainv @ B @ Ainv))


def population_score(spec: PopulationSpec, theta: ModelParams, grid: Grid | None = None):
    """Population score E[(p(X) - p_theta(X)) (1,X)'] on the spec's grid."""
    grid = grid or integration_grid(spec)
    design = np.column_stack([np.ones(grid.points.shape[0]), grid.points])
    mu = K.sigmoid(design @ theta.as_array())
    return design.T @ (grid.masses * (grid.prob1 - mu))


def population_theta_star(
    spec: PopulationSpec, tol: float = 1e-12, grid: Grid | None = None
) -> OracleFit:
    """Best linear log-odds approximation under the population logit risk.

    Correctly specified Gaussian populations (equal covariances) return the
    exact closed-form coefficients.
    """
    if isinstance(spec, TwoClassGaussian) and spec.correctly_specified and grid is None:
        params = spec.linear_params()
        return OracleFit(params, np.zeros(spec.p + 1), 0.0)
    grid = grid or integration_grid(spec)
    design = np.column_stack([np.ones(grid.points.shape[0]), grid.points])
    theta, grad_norm = _soft_newton(design, grid.masses, grid.prob1, tol=tol)
    if grid.exact:
        se = np.zeros(theta.size)
    else:
        se = _sandwich_se(design, grid.masses, grid.prob1, theta)
    return OracleFit(ModelParams.from_array(theta), se, grad_norm)


def theta_cc_limit(
    spec: PopulationSpec, b: float, tol: float = 1e-12, grid: Grid | None = None
) -> OracleFit:
    """Large-sample limit of the adjusted case-control estimate with bias b.

    The subsampled feature measure reweights x by the marginal acceptance
    e^b p(x) + (1-p(x)) (up to scale), labels follow sigmoid(f(x)+b), and
    the fit carries offset b; the resulting coefficients are already
    adjusted.  b=0 recovers the plain population minimizer.
    """
    grid = grid or integration_grid(spec)
    design = np.column_stack([np.ones(grid.points.shape[0]), grid.points])
    accept_x = np.exp(b) * grid.prob1 + (1.0 - grid.prob1)
    masses = grid.masses * accept_x
    masses = masses / masses.sum()
    target = K.sigmoid(true_log_odds(spec, grid.points) + b)
    theta, grad_norm = _soft_newton(design, masses, target, offsets=b, tol=tol)
    if grid.exact:
        se = np.zeros(theta.size)
    else:
        se = _sandwich_se(design, masses, target, theta, offsets=b)
    return OracleFit(ModelParams.from_array(theta), se, grad_norm)


def marginal_odds_ratio(spec: DiscretePopulation, coordinate: int) -> float:
    """odds(Y=1 | x_j=1) / odds(Y=1 | x_j=0) from exact cell sums."""
    if not isinstance(spec, DiscretePopulation):
        raise TypeError("marginal odds ratios need a discrete population")
    col = spec.points[:, coordinate]
    if not np.all((col == 0.0) | (col == 1.0)) or len(np.unique(col)) != 2:
        raise ValueError(f"coordinate {coordinate} is not binary")
    p = K.sigmoid(spec.logodds)
    odds = []
    for v in (0.0, 1.0):
        sel = col == v
        rate = np.sum(spec.masses[sel] * p[sel]) / np.sum(spec.masses[sel])
        odds.append(rate / (1.0 - rate))
    return float(odds[1] / odds[0])


# ---------------------------------------------------------------------------
# precision-recall


@dataclass(frozen=True)
class PrecisionRecallCurve:
    """One (threshold, precision, recall) row per distinct score, descending."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    def average_precision(self) -> float:
        """Step-integrated area under the precision-recall curve."""
        prev = np.concatenate([[0.0], self.recall[:-1]])
        return float(np.sum(self.precision * (self.recall - prev)))


def precision_recall(theta: ModelParams, test: ObservationSet) -> PrecisionRecallCurve:
    """Threshold sweep of the linear score over a labelled test set."""
    n_pos = float(np.sum(test.labels))
    if n_pos == 0 or n_pos == test.n:
        raise ValueError("test set must contain both classes")
    scores = theta.linear_predictor(test.features)
    order = np.argsort(-scores, kind="stable")
    y_sorted = test.labels[order]
    s_sorted = scores[order]
    distinct = np.ones(test.n, dtype=bool)
    distinct[:-1] = s_sorted[:-1] != s_sorted[1:]
    tp = np.cumsum(y_sorted)[distinct]
    pp = np.arange(1, test.n + 1)[distinct]
    return PrecisionRecallCurve(
        thresholds=s_sorted[distinct],
        precision=tp / pp,
        recall=tp / n_pos,
    )
