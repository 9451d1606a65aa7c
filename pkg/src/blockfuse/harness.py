"""Monte Carlo study orchestration and reported metrics.

A study simulates truth-level fields on the full domain, fits every block
with the trained network, bootstraps within blocks, fuses with the one-step
GMM combiner and aggregates BIAS / RMSE / ESE / ASE / CP across replicates.

Full-domain Gaussian fields are simulated exactly by dense factorization up
to ``exact_cap`` sites; above that a "stitched" mode simulates block by block
conditionally on nearby already-simulated sites (an approximation, flagged in
the reports).  Brown-Resnick truth fields above the simulation cap fall back
to block-independent draws, also flagged.

All randomness is derived from the master seed through labeled substreams, so
metrics are byte-identical for any worker count.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from . import estimator as est_mod
from .bootstrap import block_estimates, mean_estimator, parametric_bootstrap
from .brown_resnick import BrParams, BrownResnickSampler, DEFAULT_SITE_CAP
from .estimator import (
    OutputScaler,
    TrainConfig,
    TrainedNetwork,
    TrainingGridSpec,
    generate_training_set,
    load_network,
    make_training_grid,
    save_network,
    select_network,
    train_cnn,
)
from .gmm import combine, wald_ci, weight_from_bootstrap
from .gp import GpParams, cholesky_with_jitter, exp_covariance
from .grids import Field, GridDomain, make_grid, partition
from .params import MODEL_BROWN_RESNICK, MODEL_GAUSSIAN, ParamVector
from .rng import mix64, stream

DEFAULT_EXACT_CAP = 60 * 60

# substream labels
_SALT_FIELD = 0xF1E1D
_SALT_BOOT = 0xB007
_SALT_TRAIN = 0x7EA1
_SALT_VAL = 0x0A11


@dataclass(frozen=True)
class StudyConfig:
    """Design of one Monte Carlo study."""

    model: str
    true_params: tuple[float, float]  # estimation scale
    nx: int
    ny: int
    block_nx: int
    block_ny: int
    t1: int
    t2: int
    val_t1: int
    val_t2: int
    halfwidth: tuple[float, float] = (0.5, 0.5)
    grid_center: tuple[float, float] | None = None  # defaults to the truth
    n_seeds: int = 10
    select: str = est_mod.SELECT_VAL_LOSS
    B: int = 500
    R: int = 200
    alpha: float = 0.05
    seed: int = 0
    workers: int = 1
    spacing: float = 1.0
    epochs: int = 300
    batch_size: int = 200
    patience: int = 50
    learning_rate: float = 1e-3
    exact_cap: int = DEFAULT_EXACT_CAP
    stitch_buffer: float = 10.0
    out_dir: str = ""

    def __post_init__(self):
        if self.nx % self.block_nx or self.ny % self.block_ny:
            raise ValueError("block dims must divide domain dims")
        for name in ("t1", "t2", "val_t1", "val_t2", "n_seeds", "B", "R"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def domain(self) -> GridDomain:
        return make_grid(self.nx, self.ny, self.spacing)

    @property
    def block_domain(self) -> GridDomain:
        return make_grid(self.block_nx, self.block_ny, self.spacing)

    @property
    def truth(self) -> ParamVector:
        return ParamVector(np.asarray(self.true_params), self.model)

    def grid_spec(self, counts: tuple[int, int]) -> TrainingGridSpec:
        center = self.grid_center if self.grid_center is not None else self.true_params
        return TrainingGridSpec(
            ParamVector(np.asarray(center), self.model), tuple(self.halfwidth),
            counts[0], counts[1],
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "StudyConfig":
        raw = json.loads(text)
        for key in ("true_params", "halfwidth", "grid_center"):
            if raw.get(key) is not None:
                raw[key] = tuple(raw[key])
        return StudyConfig(**raw)


@dataclass
class MetricsTable:
    parameters: list[str]
    bias: np.ndarray
    rmse: np.ndarray
    ese: np.ndarray
    ase: np.ndarray
    cp: np.ndarray  # percent
    time_mean: float
    time_sd: float
    R: int
    errors: int
    sim_mode: str


# ---------------------------------------------------------------------------
# Full-domain simulators
# ---------------------------------------------------------------------------


class ExactGaussianSimulator:
    mode = "exact"

    def __init__(self, domain: GridDomain, params: GpParams):
        from .gp import gp_cholesky

        self.domain = domain
        self._chol = gp_cholesky(domain, params)

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return self._chol @ rng.standard_normal(self.domain.d)


class StitchedGaussianSimulator:
    """Blockwise conditional sweep for domains beyond the dense cap.

    Blocks are visited in row-major order; each is drawn conditionally on all
    previously simulated sites within ``buffer`` of its bounding box.  The
    conditional gains and factors are precomputed once, so each draw is a few
    small matrix-vector products per block.
    """

    mode = "stitched"

    def __init__(self, domain: GridDomain, params: GpParams, block_nx: int, block_ny: int,
                 buffer: float):
        self.domain = domain
        part = partition(domain, block_nx, block_ny)
        loc = domain.locations()
        tau2 = float(np.exp(params.log_tau2))
        phi2 = float(np.exp(params.log_phi2))

        def cov(a_idx, b_idx):
            diff = loc[a_idx][:, None, :] - loc[b_idx][None, :, :]
            return tau2 * np.exp(-np.hypot(diff[..., 0], diff[..., 1]) / phi2)

        self._plan = []
        done: list[np.ndarray] = []
        for k in range(part.K):
            blk = part.index_map[k]
            if done:
                prev = np.concatenate(done)
                lo = loc[blk].min(axis=0) - buffer
                hi = loc[blk].max(axis=0) + buffer
                near = prev[np.all((loc[prev] >= lo) & (loc[prev] <= hi), axis=1)]
            else:
                near = np.empty(0, dtype=int)
            if near.size:
                s_cc = cov(near, near)
                s_bc = cov(blk, near)
                gain = linalg.solve(s_cc + 1e-10 * tau2 * np.eye(near.size), s_bc.T,
                                    assume_a="pos").T
                resid = cov(blk, blk) - gain @ s_bc.T
            else:
                gain = np.zeros((blk.size, 0))
                resid = cov(blk, blk)
            chol = cholesky_with_jitter(0.5 * (resid + resid.T), scale=tau2)
            self._plan.append((blk, near, gain, chol))
            done.append(blk)

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        y = np.empty(self.domain.d)
        for blk, near, gain, chol in self._plan:
            y[blk] = gain @ y[near] + chol @ rng.standard_normal(blk.size)
        return y


class ExactBrSimulator:
    mode = "exact"

    def __init__(self, domain: GridDomain, params: BrParams):
        self._sampler = BrownResnickSampler(domain, params, site_cap=domain.d)

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return self._sampler.draw(rng).values


class BlockIndependentBrSimulator:
    """Independent per-block draws; ignores cross-block dependence (flagged)."""

    mode = "block-independent"

    def __init__(self, domain: GridDomain, params: BrParams, block_nx: int, block_ny: int):
        self._part = partition(domain, block_nx, block_ny)
        self._sampler = BrownResnickSampler(self._part.block_domain, params)
        self.domain = domain

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        y = np.empty(self.domain.d)
        for idx in self._part.index_map:
            y[idx] = self._sampler.draw(rng).values
        return y


def make_full_field_simulator(config: StudyConfig):
    domain = config.domain
    theta = config.true_params
    if config.model == MODEL_GAUSSIAN:
        params = GpParams(theta[0], theta[1])
        if domain.d <= config.exact_cap:
            return ExactGaussianSimulator(domain, params)
        return StitchedGaussianSimulator(domain, params, config.block_nx, config.block_ny,
                                         config.stitch_buffer)
    params = BrParams(theta[0], theta[1])
    if domain.d <= DEFAULT_SITE_CAP:
        return ExactBrSimulator(domain, params)
    return BlockIndependentBrSimulator(domain, params, config.block_nx, config.block_ny)


# ---------------------------------------------------------------------------
# Network training with on-disk caching
# ---------------------------------------------------------------------------


def _cache_key(config: StudyConfig) -> str:
    relevant = {
        "model": config.model,
        "block": (config.block_nx, config.block_ny, config.spacing),
        "grid": (config.grid_center or config.true_params, config.halfwidth,
                 config.t1, config.t2, config.val_t1, config.val_t2),
        "train": (config.epochs, config.batch_size, config.patience, config.learning_rate),
        "n_seeds": config.n_seeds,
        "select": config.select,
        "seed": config.seed,
    }
    return hashlib.sha256(json.dumps(relevant, sort_keys=True).encode()).hexdigest()[:16]


def train_and_select(config: StudyConfig, cache_dir=None, log=None) -> TrainedNetwork:
    """Train ``n_seeds`` networks on the study's block design and select one.

    When ``cache_dir`` is given, simulated tensors and trained weights are
    reused from disk across runs with the same design.
    """
    key = _cache_key(config)
    net_path = report_path = None
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        net_path = os.path.join(cache_dir, f"net_{key}.dacn")
        report_path = os.path.join(cache_dir, f"net_{key}.json")
        if os.path.exists(net_path) and os.path.exists(report_path):
            net = load_network(net_path)
            with open(report_path) as fh:
                net.report = est_mod.TrainingReport(**json.load(fh))
            return net

    block_dom = config.block_domain
    train_thetas = make_training_grid(config.grid_spec((config.t1, config.t2)))
    val_thetas = make_training_grid(config.grid_spec((config.val_t1, config.val_t2)))
    train_cache = val_cache = None
    if cache_dir is not None:
        train_cache = os.path.join(cache_dir, f"train_{key}.npz")
        val_cache = os.path.join(cache_dir, f"val_{key}.npz")
    train_set = generate_training_set(
        config.model, train_thetas, block_dom, mix64(config.seed, _SALT_TRAIN),
        cache_path=train_cache,
    )
    val_set = generate_training_set(
        config.model, val_thetas, block_dom, mix64(config.seed, _SALT_VAL),
        scaler=train_set.scaler, cache_path=val_cache,
    )
    tc = TrainConfig(config.learning_rate, config.epochs, config.batch_size, config.patience)
    candidates = []
    for s in range(config.n_seeds):
        t0 = time.perf_counter()
        net = train_cnn(train_set, val_set, tc, seed=mix64(config.seed, 0x5EED, s))
        if log:
            log(f"seed {s}: val loss {net.report.best_val_loss:.3e} "
                f"({net.report.epochs_run} epochs, {time.perf_counter() - t0:.0f}s)")
        candidates.append(net)
    chosen = select_network(candidates, config.select, val_set)
    if net_path is not None:
        save_network(chosen, net_path)
        with open(report_path, "w") as fh:
            json.dump(asdict(chosen.report), fh)
    return chosen


# ---------------------------------------------------------------------------
# The study loop
# ---------------------------------------------------------------------------

_WORKER_STATE: dict = {}


def _replicate(args):
    """One Monte Carlo replicate; pure function of (state, r)."""
    state, r = args if isinstance(args, tuple) else (_WORKER_STATE, args)
    config: StudyConfig = state["config"]
    t0 = time.perf_counter()
    values = state["simulator"].draw(stream(config.seed, _SALT_FIELD, r))
    field = Field(config.domain, values)
    est = block_estimates(state["net"], field, state["partition"])
    theta_m = mean_estimator(est)
    boot = parametric_bootstrap(
        config.model, theta_m, state["partition"], state["net"], config.B,
        master_seed=mix64(config.seed, _SALT_BOOT, r),
    )
    w = weight_from_bootstrap(boot)
    comb = combine(est, w, B=config.B)
    ci = wald_ci(comb, config.alpha)
    ase = np.sqrt(np.diag(linalg.inv(comb.precision)))
    elapsed = time.perf_counter() - t0
    return {
        "r": r,
        "theta_c": comb.theta_c.values,
        "theta_m": theta_m.values,
        "ase": ase,
        "ci": ci,
        "elapsed": elapsed,
        "ridge": comb.ridge_applied,
    }


def _init_worker(state):
    _WORKER_STATE.update(state)


def coverage(intervals: list[np.ndarray], truth: ParamVector) -> np.ndarray:
    """Per-coordinate percentage of intervals containing the truth."""
    if not intervals:
        raise ValueError("no intervals")
    arr = np.stack(intervals)  # (n, q, 2)
    hit = (arr[:, :, 0] <= truth.values[None, :]) & (truth.values[None, :] <= arr[:, :, 1])
    return 100.0 * hit.mean(axis=0)


def run_mc_study(
    config: StudyConfig,
    net: TrainedNetwork | None = None,
    cache_dir=None,
    log=None,
) -> tuple[MetricsTable, list[dict]]:
    """Run the full study; returns the metrics table and per-replicate rows."""
    if net is None:
        net = train_and_select(config, cache_dir=cache_dir, log=log)
    simulator = make_full_field_simulator(config)
    part = partition(config.domain, config.block_nx, config.block_ny)
    state = {"config": config, "net": net, "simulator": simulator, "partition": part}

    results: list[dict | None] = [None] * config.R
    failures = []
    if config.workers > 1:
        with ProcessPoolExecutor(
            max_workers=config.workers, initializer=_init_worker, initargs=(state,)
        ) as pool:
            for out in pool.map(_replicate, range(config.R)):
                results[out["r"]] = out
    else:
        for r in range(config.R):
            try:
                results[r] = _replicate((state, r))
            except Exception as err:  # noqa: BLE001 - per-replicate isolation
                failures.append((r, repr(err)))
    ok = [res for res in results if res is not None]
    if len(failures) > 0.01 * config.R or not ok:
        raise RuntimeError(f"{len(failures)}/{config.R} replicates failed: {failures[:3]}")

    truth = config.truth
    theta = np.stack([res["theta_c"] for res in ok])
    ases = np.stack([res["ase"] for res in ok])
    times = np.array([res["elapsed"] for res in ok])
    cis = [res["ci"] for res in ok]
    dev = theta - truth.values[None, :]
    names = (
        ["log_tau2", "log_phi2"] if config.model == MODEL_GAUSSIAN else ["theta1", "theta2"]
    )
    table = MetricsTable(
        parameters=names,
        bias=dev.mean(axis=0),
        rmse=np.sqrt((dev**2).mean(axis=0)),
        ese=theta.std(axis=0, ddof=1),
        ase=ases.mean(axis=0),
        cp=coverage(cis, truth),
        time_mean=float(times.mean()),
        time_sd=float(times.std(ddof=1)) if times.size > 1 else 0.0,
        R=len(ok),
        errors=len(failures),
        sim_mode=simulator.mode,
    )
    return table, ok


def emit_report(table: MetricsTable, rows: list[dict], out_dir) -> dict:
    """Write metrics, per-replicate and timing CSVs plus a plain-text table."""
    if not table.parameters:
        raise ValueError("empty metrics table")
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    def fmt(x):
        return f"{x:.12g}"

    metrics_path = os.path.join(out_dir, "metrics.csv")
    with open(metrics_path, "w") as fh:
        fh.write("parameter,BIAS,RMSE,ESE,ASE,CP\n")
        for i, name in enumerate(table.parameters):
            fh.write(
                f"{name},{fmt(table.bias[i])},{fmt(table.rmse[i])},"
                f"{fmt(table.ese[i])},{fmt(table.ase[i])},{fmt(table.cp[i])}\n"
            )
    paths["metrics"] = metrics_path

    reps_path = os.path.join(out_dir, "replicates.csv")
    q = len(table.parameters)
    with open(reps_path, "w") as fh:
        cols = ["r"]
        for name in table.parameters:
            cols += [f"theta_c_{name}", f"ase_{name}", f"ci_lo_{name}", f"ci_hi_{name}"]
        fh.write(",".join(cols) + "\n")
        for row in rows:
            vals = [str(row["r"])]
            for i in range(q):
                vals += [fmt(row["theta_c"][i]), fmt(row["ase"][i]),
                         fmt(row["ci"][i, 0]), fmt(row["ci"][i, 1])]
            fh.write(",".join(vals) + "\n")
    paths["replicates"] = reps_path

    timing_path = os.path.join(out_dir, "timing.csv")
    with open(timing_path, "w") as fh:
        fh.write("mean_elapsed_s,sd_elapsed_s,R,errors,sim_mode\n")
        fh.write(f"{fmt(table.time_mean)},{fmt(table.time_sd)},{table.R},"
                 f"{table.errors},{table.sim_mode}\n")
    paths["timing"] = timing_path

    text_path = os.path.join(out_dir, "table.txt")
    with open(text_path, "w") as fh:
        fh.write(f"{'parameter':>10} {'BIAS':>10} {'RMSE':>10} {'ESE':>10} "
                 f"{'ASE':>10} {'CP':>7}\n")
        for i, name in enumerate(table.parameters):
            fh.write(
                f"{name:>10} {table.bias[i]:>10.4f} {table.rmse[i]:>10.4f} "
                f"{table.ese[i]:>10.4f} {table.ase[i]:>10.4f} {table.cp[i]:>7.1f}\n"
            )
        fh.write(f"\nmean elapsed {table.time_mean:.3f}s (sd {table.time_sd:.3f}) "
                 f"over R={table.R}, sim mode {table.sim_mode}\n")
    paths["table"] = text_path
    return paths
