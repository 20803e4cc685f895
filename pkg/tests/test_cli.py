import json

import numpy as np
import pytest

from trajvae import cli, tvae
from trajvae.trajkit import Dataset, Trajectory, read_dataset, write_dataset

TINY = ["--epochs", "2", "--hidden", "8", "--k", "4", "--batch", "16"]


def run(*argv):
    return cli.dispatch([str(a) for a in argv])


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert run("--seed", 1, "simulate", "--count", 66, "--out", d / "sim.jsonl") == 0
    assert run("train", "--data", d / "sim.jsonl", "--out", d / "m.bin", *TINY) == 0
    return d


def test_simulate_split_sizes(tmp_path):
    assert run("simulate", "--count", 2200, "--noise-std", 0.01, "--out", tmp_path / "s.jsonl") == 0
    assert read_dataset(tmp_path / "s.jsonl").split_sizes() == {"train": 2000, "val": 0, "test": 200}


def test_simulate_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run("--seed", 5, "simulate", "--count", 22, "--out", tmp_path / f"{name}.jsonl") == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert run("--seed", 6, "simulate", "--count", 22, "--out", tmp_path / "c.jsonl") == 0
    assert (tmp_path / "a.jsonl").read_bytes() != (tmp_path / "c.jsonl").read_bytes()


def test_train_deterministic_and_outputs(sim, tmp_path):
    for name in ("a", "b"):
        assert run("train", "--data", sim / "sim.jsonl", "--out", tmp_path / f"{name}.bin", *TINY) == 0
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    hist = (tmp_path / "a.bin.history.csv").read_text().splitlines()
    assert hist[0] == "epoch,train_loss,val_loss" and len(hist) == 3


def test_train_ci_flag(sim, tmp_path):
    assert run("train", "--data", sim / "sim.jsonl", "--out", tmp_path / "ci.bin", "--ci", *TINY) == 0
    assert tvae.load_model(tmp_path / "ci.bin").ci
    assert not tvae.load_model(sim / "m.bin").ci


def test_usage_errors(capsys):
    assert run("bogus") == 1
    assert "usage" in capsys.readouterr().err
    assert run() == 1
    assert run("simulate", "--count", 5, "--out", "x", "--nope") == 1
    assert run("bench", "--reps", 3) == 1


def test_config_merge_flags_win(sim, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("count = 11\nnoise_std = 0.5\nseed = 9\n")
    assert run("--config", cfg, "simulate", "--count", 22, "--out", tmp_path / "s.jsonl") == 0
    out = capsys.readouterr().out
    assert "count = 22" in out and "noise_std = 0.5" in out and "seed = 9" in out
    assert len(read_dataset(tmp_path / "s.jsonl")) == 22
    cfg.write_text("colour = blue\n")
    assert run("--config", cfg, "simulate", "--out", tmp_path / "t.jsonl") == 1
    cfg.write_text("drag_coeff = 0.0\ncount = 11\n")
    assert run("--config", cfg, "simulate", "--out", tmp_path / "u.jsonl") == 0
    assert "drag_coeff = 0.0" in capsys.readouterr().out


def test_data_errors(sim, tmp_path):
    assert run("train", "--data", tmp_path / "missing.jsonl", "--out", tmp_path / "m.bin") == 2
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": 0, "t": [0, 1]}\n')
    assert run("train", "--data", bad, "--out", tmp_path / "m.bin") == 2


def test_predict_moments(sim, tmp_path):
    out = tmp_path / "mom.jsonl"
    assert run("predict", "--model", sim / "m.bin", "--data", sim / "sim.jsonl", "--given", 30,
               "--samples", 30, "--moments", "--out", out) == 0
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(recs) == 66
    cov = np.array(recs[0]["cov"])
    assert np.array(recs[0]["pos"]).shape == (216, 3) and cov.shape == (216, 3, 3)
    np.testing.assert_allclose(cov, np.swapaxes(cov, 1, 2))


def test_predict_samples_sigma_zero_deterministic(sim, tmp_path):
    outs = []
    for seed in (1, 2):
        out = tmp_path / f"p{seed}.jsonl"
        assert run("--seed", seed, "predict", "--model", sim / "m.bin", "--data", sim / "sim.jsonl",
                   "--given", 20, "--samples", 1, "--sigma-zero", "--out", out) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    out = tmp_path / "ens.jsonl"
    assert run("predict", "--model", sim / "m.bin", "--data", sim / "sim.jsonl", "--samples", 3, "--out", out) == 0
    assert len(out.read_text().splitlines()) == 3 * 66


def test_predict_corrupt_model(sim, tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"\x00garbage")
    assert run("predict", "--model", bad, "--data", sim / "sim.jsonl", "--out", tmp_path / "o.jsonl") == 2
    assert "manifest version" in capsys.readouterr().err


def test_predict_grid_mismatch(sim, tmp_path):
    f = tmp_path / "slow.jsonl"
    write_dataset(f, Dataset([Trajectory(0, 0.02 * np.arange(10), np.zeros((10, 3)))]))
    assert run("predict", "--model", sim / "m.bin", "--data", f, "--out", tmp_path / "o.jsonl") == 2


def test_evaluate_writes_curves_and_figures(sim, tmp_path):
    out = tmp_path / "ev"
    assert run("evaluate", "--data", sim / "sim.jsonl", "--model", sim / "m.bin", "--samples", 3, "--out", out) == 0
    for name in ("physics_future_step.csv", "physics_given.csv", "tvae_future_step.csv", "tvae_given.csv",
                 "future_step.png", "given.png", "summary.txt"):
        assert (out / name).stat().st_size > 0
    assert (out / "physics_given.csv").read_text().startswith("abscissa,mean,std,n\n")


def test_evaluate_deterministic(sim, tmp_path):
    for name in ("a", "b"):
        assert run("evaluate", "--data", sim / "sim.jsonl", "--model", sim / "m.bin", "--samples", 3,
                   "--out", tmp_path / name) == 0
    for f in ("tvae_given.csv", "future_step.png", "summary.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_ablate_and_search(sim, tmp_path):
    assert run("ablate", "--data", sim / "sim.jsonl", "--samples", 3, "--out", tmp_path / "ab", *TINY) == 0
    assert (tmp_path / "ab" / "ci_future_step.csv").exists() and (tmp_path / "ab" / "ablation.png").exists()
    table = tmp_path / "search.csv"
    assert run("search", "--data", sim / "sim.jsonl", "--ks", "2,4", "--hiddens", "8", "--epochs", 1,
               "--out", table) == 0
    assert len(table.read_text().splitlines()) == 3
    assert run("search", "--data", sim / "sim.jsonl", "--ks", "a", "--out", table) == 1


def test_bench(tmp_path, capsys):
    assert run("bench", "--k", 8, "--hidden", 32, "--reps", 30, "--out", tmp_path / "b.txt") == 0
    assert "median" in (tmp_path / "b.txt").read_text()
