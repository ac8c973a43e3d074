import json
import os

import numpy as np
import pytest
from click.testing import CliRunner

from flowdas.cli import main
from flowdas.core import load_config
from flowdas.dynamics import read_observations_csv, read_trajectories_csv
from flowdas.presets import preset_names


TINY_LINGAUSS = """
seed = 5
[system]
name = "lingauss"
observation = "identity"
gamma = 0.2
n_traj = 40
traj_len = 24
[train]
epochs = 120
batch_pairs = 64
noise_draws = 2
hidden_layers = 1
hidden_width = 12
checkpoint_every = 60
[infer]
K = 4
L = 1
n_cases = 3
J = 3
zeta = 0.05
N = 16
"""

TINY_DOUBLEWELL = """
seed = 9
[system]
name = "doublewell"
observation = "cube"
gamma = 0.2
n_traj = 30
traj_len = 12
test_beta_d = 1.2
[train]
epochs = 60
batch_pairs = 32
noise_draws = 2
hidden_layers = 1
hidden_width = 10
checkpoint_every = 30
[infer]
K = 6
L = 1
n_cases = 4
J = 3
zeta = 0.2
N = 16
"""


def _invoke(*args):
    return CliRunner().invoke(main, list(args), catch_exceptions=False)


@pytest.fixture(scope="module")
def lingauss_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli_lingauss")
    cfg_path = base / "cfg.toml"
    cfg_path.write_text(TINY_LINGAUSS)
    data, model, runs = base / "data", base / "model", base / "run"
    r = _invoke("simulate", "--config", str(cfg_path), "--out", str(data))
    assert r.exit_code == 0, r.output
    r = _invoke("train", "--config", str(cfg_path), "--data", str(data),
                "--out", str(model))
    assert r.exit_code == 0, r.output
    r = _invoke("assimilate", "--config", str(cfg_path),
                "--checkpoint", str(model / "model_final.ckpt"),
                "--data", str(data), "--out", str(runs))
    assert r.exit_code == 0, r.output
    return base, cfg_path


def test_simulate_outputs_and_split(lingauss_run):
    base, _ = lingauss_run
    data = base / "data"
    train = read_trajectories_csv(data / "train.csv")
    val = read_trajectories_csv(data / "val.csv")
    evl = read_trajectories_csv(data / "eval.csv")
    assert train.shape[0] == 32 and val.shape[0] == 4 and evl.shape[0] == 4
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["command"] == "simulate" and manifest["seed"] == 5
    assert manifest["split_counts"] == {"train": 32, "val": 4, "eval": 4}
    obs, first = read_observations_csv(data / "observations_eval.csv")
    assert obs.shape == (4, 23, 1) and first == 1


def test_simulate_same_seed_identical_files(lingauss_run, tmp_path):
    base, cfg_path = lingauss_run
    again = tmp_path / "data2"
    r = _invoke("simulate", "--config", str(cfg_path), "--out", str(again))
    assert r.exit_code == 0
    for name in ("train.csv", "val.csv", "eval.csv", "observations_eval.csv",
                 "manifest.json"):
        assert (again / name).read_bytes() == (base / "data" / name).read_bytes()


def test_refuses_nonempty_out_without_force(lingauss_run):
    base, cfg_path = lingauss_run
    r = CliRunner().invoke(main, ["simulate", "--config", str(cfg_path),
                                  "--out", str(base / "data")])
    assert r.exit_code == 2
    assert "force" in r.output


def test_assimilate_outputs(lingauss_run):
    base, _ = lingauss_run
    run_dir = base / "run"
    est = read_trajectories_csv(run_dir / "estimates.csv")
    assert est.shape == (3, 5, 1)  # window + K steps
    metrics = (run_dir / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "metric,value,per_step_json"
    assert {line.split(",")[0] for line in metrics[1:]} == {
        "rmse", "w1", "log_prior", "log_obs_lik"}
    for line in metrics[1:]:
        assert np.isfinite(float(line.split(",")[1]))
    diag = (run_dir / "diagnostics.csv").read_text().splitlines()
    assert diag[0] == "member,k,n,guidance_loss,weight_entropy,drift_norm"
    assert len(diag) == 1 + 3 * 4 * 16


def test_zeta_zero_equals_forecast(lingauss_run, tmp_path):
    base, cfg_path = lingauss_run
    ckpt = base / "model" / "model_final.ckpt"
    a = tmp_path / "zeta0"
    b = tmp_path / "fc"
    r1 = _invoke("assimilate", "--config", str(cfg_path), "--checkpoint", str(ckpt),
                 "--data", str(base / "data"), "--out", str(a), "--zeta", "0")
    r2 = _invoke("forecast", "--config", str(cfg_path), "--checkpoint", str(ckpt),
                 "--data", str(base / "data"), "--out", str(b))
    assert r1.exit_code == 0 and r2.exit_code == 0
    assert (a / "estimates.csv").read_bytes() == (b / "estimates.csv").read_bytes()
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_missing_checkpoint_clean_error(lingauss_run, tmp_path):
    base, cfg_path = lingauss_run
    r = CliRunner().invoke(main, [
        "assimilate", "--config", str(cfg_path), "--checkpoint",
        str(base / "nope.ckpt"), "--data", str(base / "data"),
        "--out", str(tmp_path / "x")])
    assert r.exit_code == 2
    assert "checkpoint" in r.output


def test_checkpoint_system_mismatch_is_data_error(lingauss_run, tmp_path):
    base, cfg_path = lingauss_run
    lorenz_cfg = tmp_path / "lorenz.toml"
    lorenz_cfg.write_text('[system]\nname = "lorenz63"\n[infer]\nK = 4\n')
    r = CliRunner().invoke(main, [
        "assimilate", "--config", str(lorenz_cfg),
        "--checkpoint", str(base / "model" / "model_final.ckpt"),
        "--data", str(base / "data"), "--out", str(tmp_path / "x")])
    assert r.exit_code == 3


def test_unknown_config_key_exit_code(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[system]\nnam = 3\n")
    r = CliRunner().invoke(main, ["simulate", "--config", str(bad),
                                  "--out", str(tmp_path / "o")])
    assert r.exit_code == 2


def test_evaluate_recomputes_metrics(lingauss_run, tmp_path):
    base, cfg_path = lingauss_run
    out = tmp_path / "eval_out"
    r = _invoke("evaluate", "--config", str(cfg_path), "--run", str(base / "run"),
                "--data", str(base / "data"), "--out", str(out))
    assert r.exit_code == 0
    assert (out / "metrics.csv").read_bytes() == \
        (base / "run" / "metrics.csv").read_bytes()


def test_bpf_command(lingauss_run, tmp_path):
    base, cfg_path = lingauss_run
    out = tmp_path / "bpf"
    cfg2 = tmp_path / "cfg2.toml"
    cfg2.write_text(TINY_LINGAUSS + "bpf_particles = 256\n")
    r = _invoke("bpf", "--config", str(cfg2), "--data", str(base / "data"),
                "--out", str(out))
    assert r.exit_code == 0, r.output
    est = read_trajectories_csv(out / "estimates.csv")
    assert est.shape == (3, 5, 1)


def test_plot_command_deterministic(lingauss_run, tmp_path):
    base, _ = lingauss_run
    p1, p2 = tmp_path / "p1", tmp_path / "p2"
    r = _invoke("plot", "--run", str(base / "run"), "--out", str(p1))
    assert r.exit_code == 0, r.output
    svg = p1 / "state_x0.svg"
    assert svg.exists()
    text = svg.read_text()
    assert text.startswith("<?xml") and "</svg>" in text
    r = _invoke("plot", "--run", str(base / "run"), "--out", str(p2))
    assert r.exit_code == 0
    assert svg.read_bytes() == (p2 / "state_x0.svg").read_bytes()


def test_plot_case_out_of_range(lingauss_run, tmp_path):
    base, _ = lingauss_run
    r = CliRunner().invoke(main, ["plot", "--run", str(base / "run"),
                                  "--out", str(tmp_path / "p"), "--case", "99"])
    assert r.exit_code == 2


def test_ablate_paired_seeds(lingauss_run, tmp_path):
    base, cfg_path = lingauss_run
    cfg2 = tmp_path / "cfg_ab.toml"
    cfg2.write_text(TINY_LINGAUSS + '\nablate_J = [2, 3]\nablate_seeds = 2\nablate_cases = 2\n')
    out = tmp_path / "ab"
    r = _invoke("ablate", "--config", str(cfg2),
                "--checkpoint", str(base / "model" / "model_final.ckpt"),
                "--data", str(base / "data"), "--out", str(out), "--threads", "2")
    assert r.exit_code == 0, r.output
    lines = (out / "ablation.csv").read_text().splitlines()
    assert lines[0] == "param,value,rmse_mean,rmse_std,seeds"
    assert len(lines) == 1 + 2 + 2  # J cells + estimator cells
    seeds_cols = {line.split(",")[4] for line in lines[1:]}
    assert seeds_cols == {"0;1"}  # shared seeds across cells
    by_cell = {tuple(l.split(",")[:2]): l.split(",")[2] for l in lines[1:]}
    # unbiased estimator cell replays the J-sweep cell at the preset J
    assert by_cell[("estimator", "unbiased")] == by_cell[("J", "3")]


def test_doublewell_simulate_writes_switch_set(tmp_path):
    cfg_path = tmp_path / "dw.toml"
    cfg_path.write_text(TINY_DOUBLEWELL)
    data = tmp_path / "data"
    r = _invoke("simulate", "--config", str(cfg_path), "--out", str(data))
    assert r.exit_code == 0, r.output
    switch = read_trajectories_csv(data / "eval_switch.csv")
    assert switch.shape == (4, 7, 1)  # n_cases x (L + K)
    for t in range(4):
        x = switch[t, :, 0]
        assert x.max() > 0.5 and x.min() < -0.5  # visits both wells
    train = read_trajectories_csv(data / "train.csv")
    assert np.all(np.abs(train[:, 0, 0]) <= 2.0)  # inits within [-2, 2]


def test_preset_listing_and_dump(tmp_path):
    r = _invoke("presets")
    for name in preset_names():
        assert name in r.output
    r = _invoke("presets", "--write", str(tmp_path / "cfgs"))
    assert r.exit_code == 0
    cfg = load_config(tmp_path / "cfgs" / "lorenz-desk.toml")
    assert cfg.system == "lorenz63" and cfg.J == 21


def test_preset_name_as_config(tmp_path):
    r = _invoke("simulate", "--config", "doublewell-desk", "--seed", "3",
                "--out", str(tmp_path / "d"))
    assert r.exit_code == 0, r.output
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["seed"] == 3
