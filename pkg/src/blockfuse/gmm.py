"""One-step GMM fusion of dependent block estimates.

The optimal weight is the inverse of the sample covariance of the per-block
centered bootstrap replicates stacked into Kq-vectors; the combined estimate
is the closed-form weighted average whose precision is the sum of the q x q
sub-blocks of the weight.  A quadratic-form objective is also exposed so the
closed form can be checked against a dense numerical minimizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats

from .bootstrap import BlockEstimates, BootstrapMatrix
from .params import ParamVector

RIDGE_DEFAULT = 1e-8
_ILL_CONDITIONED = 1e-10  # smallest/largest eigenvalue ratio triggering the ridge


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Kq x Kq symmetric positive-definite weight with a q x q block view."""

    w: np.ndarray
    q: int
    ridge_applied: bool = False

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        n = w.shape[0]
        if w.shape != (n, n) or n % self.q != 0:
            raise ValueError(f"weight must be Kq x Kq with q={self.q}, got {w.shape}")
        object.__setattr__(self, "w", w)

    @property
    def K(self) -> int:
        return self.w.shape[0] // self.q

    def blocks(self) -> np.ndarray:
        """(K, q, K, q) view of the sub-blocks."""
        return self.w.reshape(self.K, self.q, self.K, self.q).transpose(0, 2, 1, 3)


@dataclass(frozen=True, eq=False)
class CombinedEstimate:
    theta_c: ParamVector
    precision: np.ndarray  # q x q, the summed weight sub-blocks
    B: int
    K: int
    ridge_applied: bool = False


def center_replicates(matrix: BootstrapMatrix) -> np.ndarray:
    """(B, Kq) per-block centered replicate stacks; columns have exact mean 0."""
    reps = matrix.replicates  # (B, K, q)
    centered = reps - reps.mean(axis=0, keepdims=True)
    return centered.reshape(matrix.B, matrix.K * matrix.q)


def optimal_weight(centered: np.ndarray, ridge: float = RIDGE_DEFAULT) -> WeightMatrix:
    """Inverse of the (B-1)-denominator sample covariance of the stacks.

    A relative ridge is added to the diagonal only when the covariance is
    ill-conditioned; q is inferred by the caller via ``WeightMatrix`` and
    defaults to the full dimension here (set through ``weight_from_bootstrap``
    for the block view).
    """
    centered = np.asarray(centered, dtype=np.float64)
    B, kq = centered.shape
    cov = (centered.T @ centered) / (B - 1)
    cov = 0.5 * (cov + cov.T)

    eigvals = linalg.eigvalsh(cov)
    ridge_applied = False
    if eigvals[0] < _ILL_CONDITIONED * max(eigvals[-1], 0.0) or eigvals[0] <= 0:
        if ridge <= 0:
            raise np.linalg.LinAlgError(
                f"sample covariance of the Kq={kq} stacks is singular with B={B}; "
                "increase B or allow a ridge"
            )
        cov = cov + ridge * float(np.mean(np.diag(cov))) * np.eye(kq)
        ridge_applied = True
    try:
        cho = linalg.cho_factor(cov, lower=True)
    except linalg.LinAlgError as err:
        raise np.linalg.LinAlgError(
            f"covariance factorization failed for Kq={kq}, B={B}: increase B or the ridge"
        ) from err
    w = linalg.cho_solve(cho, np.eye(kq))
    w = 0.5 * (w + w.T)
    return WeightMatrix(w, q=kq, ridge_applied=ridge_applied)


def weight_from_bootstrap(matrix: BootstrapMatrix, ridge: float = RIDGE_DEFAULT) -> WeightMatrix:
    wm = optimal_weight(center_replicates(matrix), ridge=ridge)
    return WeightMatrix(wm.w, q=matrix.q, ridge_applied=wm.ridge_applied)


def _summed_blocks(w: WeightMatrix) -> tuple[np.ndarray, np.ndarray]:
    """(q x q sum over all sub-blocks, q-vector sum of W_{k,k'} theta_{k'})."""
    blocks = w.blocks()
    return blocks.sum(axis=(0, 1)), blocks


def combine(est: BlockEstimates, w: WeightMatrix, B: int = 0) -> CombinedEstimate:
    """Closed-form one-step estimator and its precision matrix."""
    K, q = est.K, est.q
    if w.w.shape[0] != K * q or w.q != q:
        raise ValueError(f"weight dimension {w.w.shape} inconsistent with K={K}, q={q}")
    precision, blocks = _summed_blocks(w)
    # rhs_i = sum_{k,k',j} (W)_{k,k'}[i,j] theta_{k'}[j], computed blockwise
    rhs = np.einsum("abij,bj->i", blocks, est.estimates)
    try:
        cho = linalg.cho_factor(0.5 * (precision + precision.T), lower=True)
    except linalg.LinAlgError as err:
        raise np.linalg.LinAlgError("singular precision in combine") from err
    theta_c = linalg.cho_solve(cho, rhs)
    return CombinedEstimate(
        theta_c=ParamVector(theta_c, est.model),
        precision=precision,
        B=B,
        K=K,
        ridge_applied=w.ridge_applied,
    )


def gmm_objective(theta, est: BlockEstimates, w: WeightMatrix) -> float:
    """Quadratic form of the stacked moments at a fixed weight.

    ``theta`` may be a ParamVector or a plain length-q array, so the function
    can be handed directly to a numeric optimizer.
    """
    values = theta.values if isinstance(theta, ParamVector) else np.asarray(theta)
    psi = (est.estimates - values[None, :]).ravel()
    return float(psi @ w.w @ psi)


def inverse_variance_estimator(est: BlockEstimates, vks: list[np.ndarray]) -> ParamVector:
    """Baseline weighted average ignoring cross-block dependence."""
    if len(vks) != est.K:
        raise ValueError(f"expected {est.K} block variances, got {len(vks)}")
    acc = np.zeros((est.q, est.q))
    rhs = np.zeros(est.q)
    for theta_k, vk in zip(est.estimates, vks):
        cho = linalg.cho_factor(np.asarray(vk, dtype=np.float64), lower=True)
        vinv = linalg.cho_solve(cho, np.eye(est.q))
        acc += vinv
        rhs += vinv @ theta_k
    return ParamVector(linalg.solve(acc, rhs, assume_a="pos"), est.model)


def wald_ci(c: CombinedEstimate, alpha: float) -> np.ndarray:
    """(q, 2) intervals theta_c +- z_{alpha/2} sqrt(diag(precision^-1))."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    z = stats.norm.ppf(1.0 - alpha / 2.0)
    try:
        cov = linalg.inv(c.precision)
    except linalg.LinAlgError as err:
        raise np.linalg.LinAlgError("singular precision in wald_ci") from err
    half = z * np.sqrt(np.diag(cov))
    return np.column_stack([c.theta_c.values - half, c.theta_c.values + half])
