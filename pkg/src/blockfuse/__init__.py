"""Divide-and-conquer neural inference for large gridded spatial fields.

The workflow: partition a gridded field into disjoint blocks, estimate
covariance or dependence parameters per block with a trained convolutional
network, bootstrap within blocks, and fuse the block estimates with a
one-step optimally weighted combination with calibrated confidence intervals.
"""

from .bootstrap import (
    BlockEstimates,
    BootstrapMatrix,
    block_estimates,
    bootstrap_percentile_ci,
    bootstrap_se,
    mean_estimator,
    parametric_bootstrap,
    read_bootstrap_matrix,
    write_bootstrap_matrix,
)
from .brown_resnick import BrParams, simulate_brown_resnick
from .estimator import TrainedNetwork, load_network, predict, save_network, train_cnn
from .gmm import CombinedEstimate, WeightMatrix, combine, wald_ci, weight_from_bootstrap
from .gp import GpParams, gp_loglik, gp_mle, simulate_gp
from .grids import BlockPartition, Field, GridDomain, make_grid, partition, read_field, write_field
from .harness import MetricsTable, StudyConfig, emit_report, run_mc_study
from .params import MODEL_BROWN_RESNICK, MODEL_GAUSSIAN, ParamVector
from .pipeline import GriddedSeries, analyze_dataset, fit_gev_per_site, load_grid_series, to_unit_frechet

__version__ = "0.1.0"

__all__ = [
    "BlockEstimates", "BlockPartition", "BootstrapMatrix", "BrParams",
    "CombinedEstimate", "Field", "GpParams", "GridDomain", "GriddedSeries",
    "MODEL_BROWN_RESNICK", "MODEL_GAUSSIAN", "MetricsTable", "ParamVector",
    "StudyConfig", "TrainedNetwork", "WeightMatrix", "analyze_dataset",
    "block_estimates", "bootstrap_percentile_ci", "bootstrap_se", "combine",
    "emit_report", "fit_gev_per_site", "gp_loglik", "gp_mle", "load_grid_series",
    "load_network", "make_grid", "mean_estimator", "parametric_bootstrap",
    "partition", "predict", "read_bootstrap_matrix", "read_field",
    "run_mc_study", "save_network", "simulate_brown_resnick", "simulate_gp",
    "to_unit_frechet", "train_cnn", "wald_ci", "weight_from_bootstrap",
    "write_bootstrap_matrix", "write_field",
]
