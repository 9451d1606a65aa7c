import json

import numpy as np
import pytest

from blockfuse.bootstrap import block_estimates, read_bootstrap_matrix
from blockfuse.cli import main
from blockfuse.estimator import load_network
from blockfuse.gp import GpParams, simulate_gp
from blockfuse.grids import make_grid, partition, write_field
from blockfuse.harness import StudyConfig
from blockfuse.params import MODEL_GAUSSIAN
from blockfuse.rng import stream


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    rc = main([
        "train", "--model", "gaussian", "--block", "8x8", "--grid-center", "0,1",
        "--t1", "4", "--t2", "4", "--val-t1", "3", "--val-t2", "3",
        "--seeds", "1", "--epochs", "2", "--batch-size", "8",
        "--out", str(root / "net.dacn"),
    ])
    assert rc == 0
    dom = make_grid(16, 16, 1.0)
    field = simulate_gp(dom, GpParams(0.0, 1.0), stream(70))
    write_field(field, root / "obs.dacf")
    return root, dom, field


def test_train_writes_loadable_network(workspace):
    root, _, _ = workspace
    net = load_network(root / "net.dacn")
    assert net.model == MODEL_GAUSSIAN
    assert (net.arch.input_nx, net.arch.input_ny) == (8, 8)


def test_bootstrap_command(workspace):
    root, _, _ = workspace
    rc = main([
        "bootstrap", "--net", str(root / "net.dacn"), "--field", str(root / "obs.dacf"),
        "--blocks", "8x8", "--B", "20", "--seed", "2", "--out", str(root / "boot.dacr"),
    ])
    assert rc == 0
    matrix = read_bootstrap_matrix(root / "boot.dacr")
    assert (matrix.B, matrix.K, matrix.q) == (20, 4, 2)


def test_combine_command(workspace):
    root, dom, field = workspace
    main([
        "bootstrap", "--net", str(root / "net.dacn"), "--field", str(root / "obs.dacf"),
        "--blocks", "8x8", "--B", "20", "--seed", "2", "--out", str(root / "boot.dacr"),
    ])
    net = load_network(root / "net.dacn")
    est = block_estimates(net, field, partition(dom, 8, 8))
    np.savetxt(root / "est.csv", est.estimates, delimiter=",")
    rc = main([
        "combine", "--boot", str(root / "boot.dacr"), "--estimates", str(root / "est.csv"),
        "--alpha", "0.05", "--out", str(root / "combined.json"),
    ])
    assert rc == 0
    payload = json.loads((root / "combined.json").read_text())
    for key in ("theta_c", "precision", "ci", "B", "K", "ridge_applied"):
        assert key in payload
    ci = np.asarray(payload["ci"])
    theta = np.asarray(payload["theta_c"])
    assert np.all(ci[:, 0] <= theta) and np.all(theta <= ci[:, 1])


def test_mc_study_command(workspace, tmp_path):
    root, _, _ = workspace
    cfg = StudyConfig(
        model=MODEL_GAUSSIAN, true_params=(0.0, 1.0), nx=16, ny=16,
        block_nx=8, block_ny=8, t1=4, t2=4, val_t1=3, val_t2=3,
        n_seeds=1, B=30, R=3, seed=4, epochs=2, batch_size=8,
    )
    (tmp_path / "study.json").write_text(cfg.to_json())
    rc = main([
        "mc-study", "--config", str(tmp_path / "study.json"),
        "--out", str(tmp_path / "out"), "--cache", str(tmp_path / "cache"),
    ])
    assert rc == 0
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert "metrics.csv" in manifest["files"]
    assert (tmp_path / "out" / "metrics.csv").exists()


def test_bad_block_spec_rejected():
    with pytest.raises(SystemExit):
        main(["bootstrap", "--net", "x", "--field", "y", "--blocks", "8by8",
              "--B", "10", "--out", "z"])
