"""Mean-zero Gaussian process with exponential covariance.

Exact simulation, log-likelihood and a Nelder-Mead MLE.  The covariance is
``tau^2 * exp(-h / phi^2)``: the distance is divided by the squared range
parameter, an unconventional but deliberate parameterization, and both
parameters are handled on the log scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize

from .grids import Field, GridDomain, pairwise_distances
from .params import MODEL_GAUSSIAN, ParamVector

# Relative diagonal jitter levels tried in order before giving up.
JITTER_LEVELS = (0.0, 1e-12, 1e-10, 1e-8)

# Box bounds for the optimizer on (log_tau2, log_phi2).
LOG_PARAM_BOUND = 30.0


class FactorizationError(RuntimeError):
    """Covariance factorization failed at every jitter level."""

    def __init__(self, attempted):
        self.attempted = tuple(attempted)
        super().__init__(
            f"Cholesky factorization failed with relative jitter levels {self.attempted}"
        )


@dataclass(frozen=True)
class GpParams:
    """Log variance and log range of the exponential covariance."""

    log_tau2: float
    log_phi2: float

    def __post_init__(self):
        if not (np.isfinite(self.log_tau2) and np.isfinite(self.log_phi2)):
            raise ValueError("GP parameters must be finite")

    def to_vector(self) -> ParamVector:
        return ParamVector(np.array([self.log_tau2, self.log_phi2]), MODEL_GAUSSIAN)

    @staticmethod
    def from_vector(theta: ParamVector) -> "GpParams":
        if theta.model != MODEL_GAUSSIAN:
            raise ValueError(f"expected gaussian parameters, got {theta.model}")
        return GpParams(float(theta.values[0]), float(theta.values[1]))


@dataclass
class MleReport:
    iterations: int
    loglik: float
    converged: bool


def exp_covariance(params: GpParams, dist: np.ndarray) -> np.ndarray:
    """tau^2 * exp(-dist / phi^2), elementwise over a distance matrix."""
    tau2 = np.exp(params.log_tau2)
    phi2 = np.exp(params.log_phi2)
    return tau2 * np.exp(-dist / phi2)


def cholesky_with_jitter(cov: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Lower Cholesky factor with escalating diagonal jitter relative to scale.

    ``scale`` defaults to the mean diagonal (tau^2 for a covariance produced
    by exp_covariance).
    """
    if scale is None:
        scale = float(np.mean(np.diag(cov)))
    attempted = []
    eye = np.eye(cov.shape[0])
    for level in JITTER_LEVELS:
        attempted.append(level)
        try:
            return linalg.cholesky(cov + (level * scale) * eye, lower=True)
        except linalg.LinAlgError:
            continue
    raise FactorizationError(attempted)


def gp_cholesky(domain: GridDomain, params: GpParams) -> np.ndarray:
    """Lower factor of the covariance of the process on the domain."""
    return cholesky_with_jitter(exp_covariance(params, pairwise_distances(domain)))


def simulate_gp_given_chol(domain: GridDomain, chol: np.ndarray, rng: np.random.Generator) -> Field:
    return Field(domain, chol @ rng.standard_normal(domain.d))


def simulate_gp(domain: GridDomain, params: GpParams, rng: np.random.Generator) -> Field:
    """One exact draw from N(0, Sigma(params)) on the domain."""
    return simulate_gp_given_chol(domain, gp_cholesky(domain, params), rng)


def gp_loglik(field: Field, dist: np.ndarray, params: GpParams) -> float:
    """Exact mean-zero multivariate normal log density via one factorization."""
    cov = exp_covariance(params, dist)
    chol = cholesky_with_jitter(cov)
    alpha = linalg.solve_triangular(chol, field.values, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    d = field.values.size
    return -0.5 * (d * np.log(2.0 * np.pi) + logdet + alpha @ alpha)


def gp_mle(
    field: Field,
    dist: np.ndarray,
    init: GpParams,
    maxiter: int = 2000,
    tol: float = 1e-8,
) -> tuple[GpParams, MleReport]:
    """Local maximizer of gp_loglik by bounded Nelder-Mead on the log scale."""

    def negloglik(x):
        try:
            return -gp_loglik(field, dist, GpParams(x[0], x[1]))
        except FactorizationError:
            return np.inf

    x0 = np.clip([init.log_tau2, init.log_phi2], -LOG_PARAM_BOUND, LOG_PARAM_BOUND)
    res = optimize.minimize(
        negloglik,
        x0,
        method="Nelder-Mead",
        bounds=[(-LOG_PARAM_BOUND, LOG_PARAM_BOUND)] * 2,
        options={"maxiter": maxiter, "fatol": tol, "xatol": tol},
    )
    report = MleReport(iterations=res.nit, loglik=float(-res.fun), converged=bool(res.success))
    return GpParams(float(res.x[0]), float(res.x[1])), report
