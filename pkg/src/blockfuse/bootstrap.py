"""Block estimates and the parametric bootstrap replicate matrix.

Per-block estimates feed the mean estimator; the B x K x q bootstrap matrix
simulated at the shared center estimates the joint sampling covariance of the
block estimators, including their cross-block dependence, and is what the
GMM combiner inverts.

Every (k, b) cell owns the substream mix64(master_seed, k, b), so results are
independent of execution order, batching and worker count, and any single
cell can be reproduced in isolation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .brown_resnick import BrParams, BrownResnickSampler
from .estimator import TrainedNetwork, predict_values
from .gp import FactorizationError, GpParams, gp_cholesky
from .grids import BlockPartition, Field, extract_block
from .params import MODEL_BROWN_RESNICK, MODEL_GAUSSIAN, MODELS, ParamVector
from .rng import stream

_DACR_MAGIC = b"DACR"
_DACR_VERSION = 1


@dataclass(frozen=True, eq=False)
class BlockEstimates:
    """K per-block estimates theta-hat_k on the estimation scale."""

    estimates: np.ndarray  # (K, q)
    partition: BlockPartition | None  # None when estimates come from a file
    model: str

    def __post_init__(self):
        e = np.asarray(self.estimates, dtype=np.float64)
        if e.ndim != 2 or (self.partition is not None and e.shape[0] != self.partition.K):
            raise ValueError(
                f"expected ({self.partition.K}, q) estimates, got {e.shape}"
            )
        if not np.all(np.isfinite(e)):
            raise ValueError("block estimates must be finite")
        object.__setattr__(self, "estimates", e)

    @property
    def K(self) -> int:
        return self.estimates.shape[0]

    @property
    def q(self) -> int:
        return self.estimates.shape[1]


@dataclass(frozen=True, eq=False)
class BootstrapMatrix:
    """B x K x q replicate estimates simulated at the shared center."""

    replicates: np.ndarray
    center: ParamVector
    model: str

    def __post_init__(self):
        r = np.asarray(self.replicates, dtype=np.float64)
        if r.ndim != 3:
            raise ValueError(f"expected (B, K, q) replicates, got shape {r.shape}")
        if r.shape[0] < 2:
            raise ValueError("need B >= 2 bootstrap replicates")
        if not np.all(np.isfinite(r)):
            raise ValueError("bootstrap replicates must be finite")
        object.__setattr__(self, "replicates", r)

    @property
    def B(self) -> int:
        return self.replicates.shape[0]

    @property
    def K(self) -> int:
        return self.replicates.shape[1]

    @property
    def q(self) -> int:
        return self.replicates.shape[2]


def block_estimates(net: TrainedNetwork, field: Field, part: BlockPartition) -> BlockEstimates:
    """theta-hat_k = predict on block k, for every block, batched."""
    block_dom = part.block_domain
    if not net.input_domain_matches(block_dom):
        raise ValueError(
            f"blocks are {block_dom.ny}x{block_dom.nx}, network expects "
            f"{net.arch.input_ny}x{net.arch.input_nx}"
        )
    stacked = np.stack([extract_block(field, part, k).values for k in range(1, part.K + 1)])
    return BlockEstimates(predict_values(net, stacked, block_dom), part, net.model)


def mean_estimator(est: BlockEstimates) -> ParamVector:
    """Coordinatewise average of the block estimates."""
    return ParamVector(est.estimates.mean(axis=0), est.model)


def _simulate_gaussian_cells(center, block_dom, K, B, master_seed):
    """(B*K, d) fields; one shared factor, per-cell substream normals."""
    params = GpParams(center.values[0], center.values[1])
    chol = gp_cholesky(block_dom, params)
    d = block_dom.d
    z = np.empty((d, B * K))
    for k in range(K):
        for b in range(B):
            z[:, b * K + k] = stream(master_seed, k + 1, b + 1).standard_normal(d)
    return (chol @ z).T  # row b*K + k


_RETRY_SALT = 0x5EED

def _simulate_br_cell(sampler, master_seed, k, b):
    try:
        return sampler.draw(stream(master_seed, k, b)).values
    except FactorizationError:
        # one retry on a shifted substream before giving up
        return sampler.draw(stream(master_seed, k, b, _RETRY_SALT)).values


def parametric_bootstrap(
    model: str,
    center: ParamVector,
    part: BlockPartition,
    net: TrainedNetwork,
    B: int,
    master_seed: int,
) -> BootstrapMatrix:
    """Simulate and refit B replicates per block at the shared center.

    Replicates are conditionally independent across blocks; the dependence
    the combiner exploits enters only through the shared center.
    """
    if model not in MODELS:
        raise ValueError(f"unknown model tag {model!r}")
    K = part.K
    q = center.q
    floor = max(2, K * q + 1)
    if B < floor:
        raise ValueError(f"B={B} below the invertibility floor {floor} (= max(2, K*q + 1))")
    block_dom = part.block_domain

    if model == MODEL_GAUSSIAN:
        fields = _simulate_gaussian_cells(center, block_dom, K, B, master_seed)
    else:
        sampler = BrownResnickSampler(block_dom, BrParams(center.values[0], center.values[1]))
        fields = np.empty((B * K, block_dom.d))
        for b in range(B):
            for k in range(K):
                fields[b * K + k] = _simulate_br_cell(sampler, master_seed, k + 1, b + 1)

    preds = predict_values(net, fields, block_dom)
    return BootstrapMatrix(preds.reshape(B, K, q), center, model)


def bootstrap_se(matrix: BootstrapMatrix, k: int) -> np.ndarray:
    """Per-coordinate sample SD (denominator B-1) of block k's replicates."""
    if not 1 <= k <= matrix.K:
        raise ValueError(f"block index {k} out of range 1..{matrix.K}")
    return matrix.replicates[:, k - 1, :].std(axis=0, ddof=1)


def bootstrap_percentile_ci(matrix: BootstrapMatrix, k: int, alpha: float) -> np.ndarray:
    """(q, 2) empirical quantile interval at alpha/2 and 1 - alpha/2."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if not 1 <= k <= matrix.K:
        raise ValueError(f"block index {k} out of range 1..{matrix.K}")
    reps = matrix.replicates[:, k - 1, :]
    lo = np.quantile(reps, alpha / 2.0, axis=0, method="linear")
    hi = np.quantile(reps, 1.0 - alpha / 2.0, axis=0, method="linear")
    return np.column_stack([lo, hi])


def write_bootstrap_matrix(matrix: BootstrapMatrix, path) -> None:
    """Serialize in the DACR v1 format (b-major, then k, then coordinate)."""
    with open(path, "wb") as fh:
        fh.write(_DACR_MAGIC)
        fh.write(struct.pack("<IIII", _DACR_VERSION, matrix.B, matrix.K, matrix.q))
        fh.write(struct.pack("<B", 0 if matrix.model == MODEL_GAUSSIAN else 1))
        fh.write(np.asarray(matrix.center.values, dtype="<f8").tobytes())
        fh.write(matrix.replicates.astype("<f8").tobytes())


def read_bootstrap_matrix(path) -> BootstrapMatrix:
    with open(path, "rb") as fh:
        if fh.read(4) != _DACR_MAGIC:
            raise ValueError(f"{path}: not a DACR file")
        version, B, K, q = struct.unpack("<IIII", fh.read(16))
        if version != _DACR_VERSION:
            raise ValueError(f"{path}: unsupported DACR version {version}")
        (mcode,) = struct.unpack("<B", fh.read(1))
        model = MODEL_GAUSSIAN if mcode == 0 else MODEL_BROWN_RESNICK
        center = np.frombuffer(fh.read(8 * q), dtype="<f8").copy()
        reps = np.frombuffer(fh.read(8 * B * K * q), dtype="<f8").reshape(B, K, q)
        return BootstrapMatrix(reps.copy(), ParamVector(center, model), model)
