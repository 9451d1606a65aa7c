"""Command-line entry points.

Subcommands: train, bootstrap, combine, mc-study, analyze.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import estimator as est_mod
from .bootstrap import (
    BlockEstimates,
    parametric_bootstrap,
    read_bootstrap_matrix,
    write_bootstrap_matrix,
)
from .estimator import (
    TrainConfig,
    TrainingGridSpec,
    generate_training_set,
    load_network,
    make_training_grid,
    save_network,
    select_network,
    train_cnn,
)
from .gmm import combine, wald_ci, weight_from_bootstrap
from .grids import make_grid, partition, read_field
from .harness import StudyConfig, emit_report, run_mc_study
from .params import MODEL_BROWN_RESNICK, MODEL_GAUSSIAN, ParamVector
from .pipeline import analyze_dataset, load_grid_series
from .rng import mix64

_MODEL_FLAGS = {"gaussian": MODEL_GAUSSIAN, "br": MODEL_BROWN_RESNICK}


def _parse_block(text: str) -> tuple[int, int]:
    try:
        nx, ny = text.lower().split("x")
        return int(nx), int(ny)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected NXxNY, got {text!r}") from None


def _parse_pair(text: str) -> tuple[float, float]:
    try:
        a, b = text.split(",")
        return float(a), float(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a,b got {text!r}") from None


def _cmd_train(args) -> int:
    model = _MODEL_FLAGS[args.model]
    block_nx, block_ny = args.block
    domain = make_grid(block_nx, block_ny, args.spacing)
    center = ParamVector(np.asarray(args.grid_center), model)
    spec = TrainingGridSpec(center, (args.halfwidth, args.halfwidth), args.t1, args.t2)
    val_spec = TrainingGridSpec(
        center, (args.halfwidth, args.halfwidth), args.val_t1, args.val_t2
    )
    train_set = generate_training_set(
        model, make_training_grid(spec), domain, mix64(args.seed, 0x7EA1)
    )
    val_set = generate_training_set(
        model, make_training_grid(val_spec), domain, mix64(args.seed, 0x0A11),
        scaler=train_set.scaler,
    )
    tc = TrainConfig(args.lr, args.epochs, args.batch_size, args.patience)
    candidates = []
    for s in range(args.seeds):
        net = train_cnn(train_set, val_set, tc, seed=mix64(args.seed, 0x5EED, s))
        print(
            f"seed {s}: val loss {net.report.best_val_loss:.4e} "
            f"after {net.report.epochs_run} epochs",
            file=sys.stderr,
        )
        candidates.append(net)
    criterion = (
        est_mod.SELECT_VAL_LOSS if args.select == "val-loss" else est_mod.SELECT_ABS_AVB
    )
    chosen = select_network(candidates, criterion, val_set)
    save_network(chosen, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_bootstrap(args) -> int:
    net = load_network(args.net)
    field = read_field(args.field)
    block_nx, block_ny = args.blocks
    part = partition(field.domain, block_nx, block_ny)
    from .bootstrap import block_estimates, mean_estimator

    est = block_estimates(net, field, part)
    center = mean_estimator(est)
    matrix = parametric_bootstrap(net.model, center, part, net, args.B, args.seed)
    write_bootstrap_matrix(matrix, args.out)
    print(f"wrote {args.out} (B={matrix.B}, K={matrix.K})")
    return 0


def _cmd_combine(args) -> int:
    boot = read_bootstrap_matrix(args.boot)
    estimates = np.loadtxt(args.estimates, delimiter=",", ndmin=2)
    if estimates.shape != (boot.K, boot.q):
        raise SystemExit(
            f"estimates CSV is {estimates.shape}, bootstrap expects ({boot.K}, {boot.q})"
        )
    est = BlockEstimates(estimates, None, boot.center.model)
    w = weight_from_bootstrap(boot)
    comb = combine(est, w, B=boot.B)
    ci = wald_ci(comb, args.alpha)
    payload = {
        "theta_c": comb.theta_c.values.tolist(),
        "precision": comb.precision.tolist(),
        "ci": ci.tolist(),
        "alpha": args.alpha,
        "B": boot.B,
        "K": boot.K,
        "ridge_applied": comb.ridge_applied,
    }
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=1)
    print(f"wrote {args.out}")
    return 0


def _cmd_mc_study(args) -> int:
    with open(args.config) as fh:
        config = StudyConfig.from_json(fh.read())
    out_dir = args.out or config.out_dir or "study_out"
    table, rows = run_mc_study(
        config, cache_dir=args.cache, log=lambda msg: print(msg, file=sys.stderr)
    )
    paths = emit_report(table, rows, out_dir)
    manifest = {"seed": config.seed, "workers": config.workers, "files": {}}
    for name, path in paths.items():
        with open(path, "rb") as fh:
            manifest["files"][os.path.basename(path)] = hashlib.sha256(
                fh.read()
            ).hexdigest()
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    with open(paths["table"]) as fh:
        print(fh.read())
    return 0


def _cmd_analyze(args) -> int:
    series = load_grid_series(args.data, args.format)
    net = load_network(args.net)
    block_nx, block_ny = args.blocks
    part = partition(series.domain, block_nx, block_ny)
    report = analyze_dataset(
        series, net, part, args.B, args.alpha, seed=args.seed, out_dir=args.out
    )
    n_fail = len(report["failures"])
    print(f"analyzed {len(report['years'])} years ({n_fail} failures), wrote {args.out}")
    return 1 if n_fail and not report["years"] else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blockfuse",
        description="Divide-and-conquer neural inference for gridded spatial fields",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="simulate training fields and train a block estimator")
    p.add_argument("--model", choices=sorted(_MODEL_FLAGS), required=True)
    p.add_argument("--block", type=_parse_block, required=True, metavar="NXxNY")
    p.add_argument("--grid-center", type=_parse_pair, required=True, metavar="A,B")
    p.add_argument("--halfwidth", type=float, default=0.5)
    p.add_argument("--t1", type=int, required=True)
    p.add_argument("--t2", type=int, required=True)
    p.add_argument("--val-t1", type=int, default=20)
    p.add_argument("--val-t2", type=int, default=20)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--select", choices=["val-loss", "avb"], default="val-loss")
    p.add_argument("--spacing", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=200)
    p.add_argument("--patience", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("bootstrap", help="parametric bootstrap of an observed field")
    p.add_argument("--net", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--blocks", type=_parse_block, required=True, metavar="NXxNY")
    p.add_argument("--B", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_bootstrap)

    p = sub.add_parser("combine", help="fuse block estimates with the optimal weight")
    p.add_argument("--boot", required=True)
    p.add_argument("--estimates", required=True, help="CSV of K rows x q columns")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_combine)

    p = sub.add_parser("mc-study", help="run a Monte Carlo study from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--cache", default=None, help="directory for training caches")
    p.set_defaults(func=_cmd_mc_study)

    p = sub.add_parser("analyze", help="full per-year analysis of a gridded dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=["csv", "dacf-set"], default="csv")
    p.add_argument("--net", required=True)
    p.add_argument("--blocks", type=_parse_block, required=True, metavar="NXxNY")
    p.add_argument("--B", type=int, required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_analyze)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
