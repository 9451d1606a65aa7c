"""End-to-end acceptance checks.

Each test prints one "criterion N (...): PASS/FAIL" verdict line on the
original stdout so the verdicts stay visible under pytest's capture.  The
two network-backed designs look up trained weights in the shared on-disk
cache (tests/../.cache); on a cold cache they retrain, which takes hours
on a single core.
"""

import time

import numpy as np
import pytest
import torch
from scipy import linalg, optimize, stats

from acceptance_designs import CACHE_DIR, coverage_study, single_block_design, timing_study
from blockfuse.bootstrap import (
    BlockEstimates,
    BootstrapMatrix,
    block_estimates,
    bootstrap_percentile_ci,
    bootstrap_se,
    mean_estimator,
    parametric_bootstrap,
)
from blockfuse.brown_resnick import (
    BrownResnickSampler,
    pairwise_ec_theoretical,
    transform_params,
    unit_frechet_cdf,
)
from blockfuse.estimator import Architecture, Cnn
from blockfuse.gmm import combine, gmm_objective, wald_ci, weight_from_bootstrap
from blockfuse.gp import GpParams, exp_covariance, gp_loglik, simulate_gp
from blockfuse.grids import Field, make_grid, pairwise_distances, partition
from blockfuse.harness import (
    _SALT_BOOT,
    _SALT_FIELD,
    StudyConfig,
    coverage,
    emit_report,
    make_full_field_simulator,
    run_mc_study,
    train_and_select,
)
from blockfuse.params import MODEL_GAUSSIAN, ParamVector
from blockfuse.pipeline import GriddedSeries, fit_gev_per_site, to_unit_frechet
from blockfuse.rng import mix64, stream

@pytest.fixture
def verdict(capsys):
    """Print one pass/fail line per criterion, bypassing pytest's capture."""

    def _verdict(num: int, label: str, ok: bool, detail: str) -> None:
        line = f"\ncriterion {num} ({label}): {'PASS' if ok else 'FAIL'} [{detail}]"
        with capsys.disabled():
            print(line, flush=True)
        assert ok, line

    return _verdict


# ---------------------------------------------------------------------------
# 1. closed-form combiner vs dense numerical minimizer
# ---------------------------------------------------------------------------


def _random_fusion_instance(rng, K, B=500, q=2):
    est = BlockEstimates(rng.standard_normal((K, q)), None, MODEL_GAUSSIAN)
    a = rng.standard_normal((K * q, K * q))
    cov = a @ a.T / (K * q) + 0.5 * np.eye(K * q)
    chol = np.linalg.cholesky(cov)
    reps = (chol @ rng.standard_normal((K * q, B))).T.reshape(B, K, q)
    center = ParamVector(rng.standard_normal(q), MODEL_GAUSSIAN)
    return est, BootstrapMatrix(reps, center, MODEL_GAUSSIAN)


def test_criterion_1_combiner_oracle_equivalence(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for i in range(200):
        est, matrix = _random_fusion_instance(rng, K=(2, 3, 5)[i % 3])
        w = weight_from_bootstrap(matrix)
        comb = combine(est, w, B=matrix.B)
        res = optimize.minimize(
            lambda t: gmm_objective(t, est, w),
            est.estimates.mean(axis=0),
            method="Nelder-Mead",
            options={"fatol": 1e-16, "xatol": 1e-12, "maxiter": 10_000},
        )
        worst = max(worst, float(np.abs(res.x - comb.theta_c.values).max()))

    est1, matrix1 = _random_fusion_instance(rng, K=1)
    w1 = weight_from_bootstrap(matrix1)
    ident = float(np.abs(combine(est1, w1).theta_c.values - est1.estimates[0]).max())
    elapsed = time.perf_counter() - t0

    ok = worst < 1e-6 and ident < 1e-12 and elapsed < 60
    verdict(1, "combiner oracle equivalence", ok,
             f"max gap {worst:.2e}, K=1 gap {ident:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. optimal weight converges to the true inverse covariance
# ---------------------------------------------------------------------------


def test_criterion_2_weight_matrix_consistency(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    a = rng.standard_normal((6, 6))
    cov = a @ a.T / 6.0 + np.eye(6)
    B = 100_000
    reps = (np.linalg.cholesky(cov) @ rng.standard_normal((6, B))).T.reshape(B, 3, 2)
    matrix = BootstrapMatrix(reps, ParamVector(np.zeros(2), MODEL_GAUSSIAN), MODEL_GAUSSIAN)
    w = weight_from_bootstrap(matrix).w
    w_true = linalg.inv(cov)
    # normal approximation to the inverse-Wishart entry variance
    dw = np.diag(w_true)
    tol = 3.0 * np.sqrt((np.outer(dw, dw) + w_true**2) / B)
    gap = np.abs(w - w_true)
    elapsed = time.perf_counter() - t0

    ok = bool(np.all(gap < tol)) and elapsed < 60
    verdict(2, "weight-matrix consistency", ok,
             f"worst entry {float((gap / tol).max()):.2f} of 3-sigma budget, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. coverage and calibration of the full pipeline at 40x40 / four blocks
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def coverage_net():
    return train_and_select(coverage_study(), cache_dir=CACHE_DIR)


@pytest.fixture(scope="module")
def coverage_run(coverage_net):
    t0 = time.perf_counter()
    table, rows = run_mc_study(coverage_study(), net=coverage_net)
    return table, rows, time.perf_counter() - t0


def test_criterion_3_gaussian_coverage(coverage_run, verdict):
    table, _, elapsed = coverage_run
    cp_ok = bool(np.all((88.0 <= table.cp) & (table.cp <= 99.0)))
    cal = np.abs(table.ese - table.ase) / table.ese
    cal_ok = bool(np.all(cal < 0.25))
    verdict(3, "Gaussian desk-scale coverage", cp_ok and cal_ok,
             f"CP {table.cp[0]:.1f}/{table.cp[1]:.1f}, "
             f"|ESE-ASE|/ESE {cal[0]:.3f}/{cal[1]:.3f}, {elapsed / 60:.1f} min")


# ---------------------------------------------------------------------------
# 4. per-replicate wall time stays flat as the domain grows
# ---------------------------------------------------------------------------


def test_criterion_4_amortisation_in_domain_size(coverage_net, verdict):
    t0 = time.perf_counter()
    t40 = run_mc_study(timing_study(40), net=coverage_net)[0].time_mean
    t80 = run_mc_study(timing_study(80), net=coverage_net)[0].time_mean
    elapsed = time.perf_counter() - t0
    ratio = t80 / t40
    ok = ratio <= 2.0 and elapsed < 1800
    verdict(4, "amortisation in domain size", ok,
             f"mean per-replicate {t40:.2f}s at 40^2 vs {t80:.2f}s at 80^2, "
             f"ratio {ratio:.2f}, {elapsed / 60:.1f} min")


# ---------------------------------------------------------------------------
# 5. Gaussian simulator and log-likelihood correctness
# ---------------------------------------------------------------------------


def test_criterion_5_gaussian_simulator_correctness(verdict):
    t0 = time.perf_counter()
    params = GpParams(np.log(2.0), np.log(1.5))
    dom = make_grid(3, 3, 1.0)
    sim = make_full_field_simulator(StudyConfig(
        model=MODEL_GAUSSIAN, true_params=(params.log_tau2, params.log_phi2),
        nx=3, ny=3, block_nx=3, block_ny=3, t1=1, t2=1, val_t1=1, val_t2=1,
    ))
    n = 20_000
    draws = np.stack([sim.draw(stream(505, i)) for i in range(n)])
    emp = draws.T @ draws / n  # the process has mean zero by construction
    truth = exp_covariance(params, pairwise_distances(dom))
    dt = np.diag(truth)
    tol = 3.0 * np.sqrt((np.outer(dt, dt) + truth**2) / n)
    cov_worst = float((np.abs(emp - truth) / tol).max())

    dom5 = make_grid(5, 5, 1.0)
    dist5 = pairwise_distances(dom5)
    rel_worst = 0.0
    for i, (lt, lp) in enumerate([(0.0, 0.0), (np.log(3.0), np.log(3.0)), (-0.7, 1.2)]):
        p = GpParams(lt, lp)
        field = simulate_gp(dom5, p, stream(506, i))
        ll = gp_loglik(field, dist5, p)
        c = exp_covariance(p, dist5)
        sign, logdet = np.linalg.slogdet(2.0 * np.pi * c)
        brute = -0.5 * (logdet + field.values @ np.linalg.solve(c, field.values))
        rel_worst = max(rel_worst, abs(ll - brute) / abs(brute))
    elapsed = time.perf_counter() - t0

    ok = cov_worst < 1.0 and rel_worst < 1e-8 and elapsed < 300
    verdict(5, "Gaussian simulator correctness", ok,
             f"cov worst {cov_worst:.2f} of 3-sigma budget, "
             f"loglik rel err {rel_worst:.2e}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 6. max-stable simulator: margins, max-stability, extremal coefficients
# ---------------------------------------------------------------------------


def _ec_with_error(values: np.ndarray, dom, n_distances=10, n_groups=10):
    """Madogram extremal coefficients at exact pair distances, with an MC SE
    from splitting the replicates into independent groups."""
    loc = dom.locations()
    ii, jj = np.triu_indices(dom.d, k=1)
    dists = np.hypot(*(loc[ii] - loc[jj]).T)
    targets = np.unique(np.round(dists, 9))[:n_distances]
    u = unit_frechet_cdf(values)
    per = values.shape[0] // n_groups
    rows = []
    for h in targets:
        mask = np.isclose(dists, h)
        diffs = np.abs(u[:, ii[mask]] - u[:, jj[mask]])[: per * n_groups]
        mado = 0.5 * diffs.reshape(n_groups, per, -1).mean(axis=(1, 2))
        thetas = (0.5 + mado) / (0.5 - mado)
        rows.append((float(h), float(thetas.mean()),
                     float(thetas.std(ddof=1) / np.sqrt(n_groups))))
    return rows


def test_criterion_6_brown_resnick_simulator_correctness(verdict):
    t0 = time.perf_counter()
    dom = make_grid(5, 5, 1.0)
    n = 5000
    samples = {}
    for tag, (lam, nu) in enumerate([(1.0, 1.0), (0.5, 1.5)]):
        sampler = BrownResnickSampler(dom, transform_params(lam, nu))
        samples[(lam, nu)] = np.stack(
            [sampler.draw(stream(43, tag, i)).values for i in range(n)]
        )

    base = samples[(1.0, 1.0)]
    ks_min = min(
        stats.kstest(base[:, j], lambda y: unit_frechet_cdf(y)).pvalue
        for j in range(dom.d)
    )

    # max of 5 rescaled copies has the same law as a single copy
    singles = base[:2500, 0]
    maxima = base[2500:, 0].reshape(500, 5).max(axis=1) / 5.0
    ks_max_stable = stats.ks_2samp(singles, maxima).pvalue

    ec_worst = 0.0
    for (lam, nu), values in samples.items():
        params = transform_params(lam, nu)
        for h, theta_hat, se in _ec_with_error(values, dom):
            z = abs(theta_hat - pairwise_ec_theoretical(params, h)) / (3.0 * se)
            ec_worst = max(ec_worst, z)
    elapsed = time.perf_counter() - t0

    ok = ks_min > 0.01 and ks_max_stable > 0.01 and ec_worst < 1.0 and elapsed < 1800
    verdict(6, "Brown-Resnick simulator correctness", ok,
             f"min site KS p {ks_min:.3f}, max-stability p {ks_max_stable:.3f}, "
             f"EC worst {ec_worst:.2f} of 3-sigma budget, {elapsed / 60:.1f} min")


# ---------------------------------------------------------------------------
# 7 / 8. network sanity at the single-block design; percentile vs Wald CIs
# ---------------------------------------------------------------------------


def _gradient_check_worst() -> float:
    arch = Architecture(4, 4, q=2, conv_layers=((2, 3),), dense_units=5)
    net = Cnn(arch).double()
    torch.manual_seed(0)
    x = torch.randn(3, 1, 4, 4, dtype=torch.float64)
    y = torch.randn(3, 2, dtype=torch.float64)
    loss_fn = torch.nn.MSELoss()
    loss_fn(net(x), y).backward()
    worst = 0.0
    for p in net.parameters():
        grad = p.grad.reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(min(10, flat.numel())):
            h = 1e-6
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss_fn(net(x), y).item()
            flat[i] = orig - h
            dn = loss_fn(net(x), y).item()
            flat[i] = orig
            fd = (up - dn) / (2 * h)
            denom = max(abs(fd), abs(grad[i].item()), 1e-8)
            worst = max(worst, abs(fd - grad[i].item()) / denom)
    return worst


@pytest.fixture(scope="module")
def single_block_runs():
    cfg = single_block_design()
    net = train_and_select(cfg, cache_dir=CACHE_DIR)
    sim = make_full_field_simulator(cfg)
    part = partition(cfg.domain, cfg.block_nx, cfg.block_ny)
    t0 = time.perf_counter()
    ests, ses, wald_cis, perc_cis = [], [], [], []
    for r in range(cfg.R):
        field = Field(cfg.domain, sim.draw(stream(cfg.seed, _SALT_FIELD, r)))
        est = block_estimates(net, field, part)
        boot = parametric_bootstrap(
            cfg.model, mean_estimator(est), part, net, cfg.B,
            master_seed=mix64(cfg.seed, _SALT_BOOT, r),
        )
        comb = combine(est, weight_from_bootstrap(boot), B=cfg.B)
        ests.append(comb.theta_c.values)
        ses.append(bootstrap_se(boot, 1))
        wald_cis.append(wald_ci(comb, cfg.alpha))
        perc_cis.append(bootstrap_percentile_ci(boot, 1, cfg.alpha))
    elapsed = time.perf_counter() - t0
    return cfg, np.stack(ests), np.stack(ses), wald_cis, perc_cis, elapsed


def test_criterion_7_network_sanity(single_block_runs, verdict):
    grad_worst = _gradient_check_worst()
    cfg, ests, ses, _, _, elapsed = single_block_runs
    bias = ests.mean(axis=0) - cfg.truth.values
    sd = ests.std(axis=0, ddof=1)
    ratio = ses.mean(axis=0) / sd
    grad_ok = grad_worst < 1e-4
    bias_ok = bool(np.all(np.abs(bias) * 100.0 < 5.0))
    ratio_ok = bool(np.all((0.8 <= ratio) & (ratio <= 1.25)))
    verdict(7, "network sanity", grad_ok and bias_ok and ratio_ok,
             f"grad rel err {grad_worst:.1e}, "
             f"BIASx100 {100 * bias[0]:.2f}/{100 * bias[1]:.2f}, "
             f"SE/SD {ratio[0]:.2f}/{ratio[1]:.2f}, {elapsed / 60:.1f} min")


def test_criterion_8_percentile_overcoverage(single_block_runs, verdict):
    cfg, _, _, wald_cis, perc_cis, _ = single_block_runs
    cp_wald = coverage(wald_cis, cfg.truth)
    cp_perc = coverage(perc_cis, cfg.truth)
    ok = bool(np.all(cp_perc >= cp_wald))
    verdict(8, "percentile-CI overcoverage", ok,
             f"percentile CP {cp_perc[0]:.1f}/{cp_perc[1]:.1f} vs "
             f"Wald CP {cp_wald[0]:.1f}/{cp_wald[1]:.1f}")


# ---------------------------------------------------------------------------
# 9. worker count never changes the reported bytes
# ---------------------------------------------------------------------------


def test_criterion_9_worker_count_determinism(tmp_path, verdict):
    cfg = StudyConfig(
        model=MODEL_GAUSSIAN, true_params=(0.0, 1.0),
        nx=16, ny=16, block_nx=8, block_ny=8,
        t1=4, t2=4, val_t1=3, val_t2=3,
        n_seeds=1, B=40, R=6, seed=909, epochs=2, batch_size=8,
    )
    cache = str(tmp_path / "cache")
    outputs = []
    for workers in (1, 2):
        cw = StudyConfig(**{**cfg.__dict__, "workers": workers})
        table, rows = run_mc_study(cw, cache_dir=cache)
        paths = emit_report(table, rows, tmp_path / f"w{workers}")
        outputs.append(paths)
    same = all(
        open(outputs[0][key], "rb").read() == open(outputs[1][key], "rb").read()
        for key in ("metrics", "replicates")
    )
    verdict(9, "worker-count determinism", same,
             "metrics and replicate CSVs byte-identical for 1 vs 2 workers")


# ---------------------------------------------------------------------------
# 10. block-maxima fits recover truth and transform to unit Frechet margins
# ---------------------------------------------------------------------------


def test_criterion_10_gev_frechet_round_trip(verdict):
    t0 = time.perf_counter()
    dom = make_grid(5, 4, 1.0)
    loc = dom.locations()
    n_years = 129
    years = np.arange(1890, 1890 + n_years)
    values = np.empty((n_years, dom.d))
    mus = 2.0 + 0.3 * loc[:, 0] / 4.0
    sigmas = 1.0 + 0.1 * loc[:, 1] / 3.0
    xi = 0.1
    for j in range(dom.d):
        values[:, j] = stats.genextreme.rvs(
            c=-xi, loc=mus[j], scale=sigmas[j], size=n_years,
            random_state=stream(1010, j),
        )
    series = GriddedSeries(dom, years, values)

    fit = fit_gev_per_site(series)
    hits = 0
    for j, (p, se) in enumerate(zip(fit.params, fit.ses)):
        truth = np.array([mus[j], sigmas[j], xi])
        got = np.array([p.location, p.scale, p.shape])
        hits += bool(np.all(np.abs(got - truth) <= 3.0 * se))
    frac = hits / dom.d

    out = to_unit_frechet(series, fit)
    ks_min = min(
        stats.kstest(out.values[:, j], lambda y: np.exp(-1.0 / y)).pvalue
        for j in range(dom.d)
    )
    elapsed = time.perf_counter() - t0

    ok = frac >= 0.95 and ks_min > 0.01 and elapsed < 600
    verdict(10, "GEV / unit-Frechet round trip", ok,
             f"{hits}/{dom.d} sites within 3 SE, min KS p {ks_min:.3f}, {elapsed:.0f}s")
