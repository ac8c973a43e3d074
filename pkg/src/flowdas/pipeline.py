"""Batch pipeline stages behind the CLI commands.

Every stage is a pure function of (config, input files, seed): output
directories contain only deterministic bytes (no timestamps, no absolute
paths inside CSVs), so a repeated run with the same seed is bit-identical.

Stream layout: the root stream is (seed, 0); each stage owns a fixed child
index so stages never share draws:

    0 simulate   1 observations   2 split   3 model init
    4 training   5 validation     6 assimilate/forecast
    7 bpf        8 ablate         9 switch eval set
"""

from __future__ import annotations

import dataclasses
import json
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import assimilate, baseline_bpf, dynamics, metrics, net, train
from .core import (
    ConfigError,
    ExperimentConfig,
    FormatError,
    RngStream,
    ShapeMismatchError,
    child_rng,
    config_to_toml,
    split_rng,
)
from .interpolant import InterpolantSchedule

S_SIM, S_OBS, S_SPLIT, S_INIT, S_TRAIN, S_VAL, S_ASSIM, S_BPF, S_ABLATE, S_SWITCH = range(10)


def root_rng(cfg: ExperimentConfig) -> RngStream:
    return RngStream(cfg.seed, 0)


def schedule_of(cfg: ExperimentConfig) -> InterpolantSchedule:
    return InterpolantSchedule(kind=cfg.schedule_kind, eta=cfg.eta)


def prepare_out_dir(path, force: bool) -> str:
    path = os.fspath(path)
    if os.path.exists(path):
        if os.listdir(path) and not force:
            raise ConfigError(
                f"output directory {path} is not empty; pass --force to overwrite"
            )
    else:
        os.makedirs(path)
    return path


def write_manifest(out_dir, command: str, cfg: ExperimentConfig, extra: dict) -> None:
    payload = {
        "command": command,
        "seed": cfg.seed,
        "config": config_to_toml(cfg),
        **extra,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", newline="\n") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def read_manifest(run_dir) -> dict:
    path = os.path.join(run_dir, "manifest.json")
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        raise FormatError(f"missing manifest in {run_dir}: {e}") from e


def config_from_manifest(manifest: dict) -> ExperimentConfig:
    from .core import load_config_text

    if "config" not in manifest:
        raise FormatError("manifest has no embedded config")
    return load_config_text(manifest["config"])


# ---------------------------------------------------------------- simulate

def run_simulate(cfg: ExperimentConfig, out_dir, log=print) -> dict:
    """Simulate the dataset, split 80/10/10 by whole trajectories, and for
    the double well also generate the strong-turbulence switch eval set."""
    system = dynamics.make_system(cfg)
    root = root_rng(cfg)
    log(f"simulating {cfg.n_traj} x {cfg.traj_len} {system.name} trajectories "
        f"(burn-in {system.burn_in}, dt {system.dt})")
    states = dynamics.simulate_dataset(system, cfg.n_traj, cfg.traj_len,
                                       child_rng(root, S_SIM))
    perm = child_rng(root, S_SPLIT).gen.permutation(cfg.n_traj)
    n_train = int(0.8 * cfg.n_traj)
    n_val = int(0.1 * cfg.n_traj)
    splits = {
        "train": states[perm[:n_train]],
        "val": states[perm[n_train:n_train + n_val]],
        "eval": states[perm[n_train + n_val:]],
    }
    obs_model = dynamics.observation_model(cfg)
    files = {}
    for name, data in splits.items():
        if data.shape[0] == 0:
            raise ConfigError(f"{name} split is empty; increase n_traj")
        fname = f"{name}.csv"
        dynamics.write_trajectories_csv(os.path.join(out_dir, fname), data)
        files[name] = fname
    obs_eval = dynamics.make_observations(splits["eval"], obs_model,
                                          child_rng(root, S_OBS))
    dynamics.write_observations_csv(os.path.join(out_dir, "observations_eval.csv"),
                                    obs_eval, first_index=1)
    files["observations_eval"] = "observations_eval.csv"

    if cfg.system == "doublewell":
        switch, obs_switch = _simulate_switch_set(cfg, child_rng(root, S_SWITCH))
        dynamics.write_trajectories_csv(os.path.join(out_dir, "eval_switch.csv"), switch)
        dynamics.write_observations_csv(
            os.path.join(out_dir, "observations_eval_switch.csv"), obs_switch,
            first_index=1)
        files["eval_switch"] = "eval_switch.csv"
        files["observations_eval_switch"] = "observations_eval_switch.csv"
        log(f"switch eval set: {switch.shape[0]} trajectories with a well switch")

    extra = {
        "files": files,
        "split_counts": {k: int(v.shape[0]) for k, v in splits.items()},
        "split_permutation_head": [int(i) for i in perm[:16]],
    }
    write_manifest(out_dir, "simulate", cfg, extra)
    log(f"wrote dataset to {out_dir}")
    return extra


def _has_well_switch(traj: np.ndarray) -> bool:
    """A trajectory visits both wells (beyond +-0.5 on each side)."""
    x = traj[:, 0]
    return bool(np.any(x > 0.5) and np.any(x < -0.5))


def _simulate_switch_set(cfg: ExperimentConfig, rng: RngStream):
    """Strong-turbulence double-well trajectories containing a well switch.

    Rejection-samples batches until n_cases trajectories of length L + K
    show a switch; each batch uses fresh child streams so the result is a
    deterministic function of the seed.
    """
    system = dynamics.make_system(cfg, test_regime=True)
    obs_model = dynamics.observation_model(cfg)
    length = cfg.L + cfg.K
    kept = []
    batch_streams = split_rng(rng, 2048)
    next_stream = 0
    while len(kept) < cfg.n_cases:
        if next_stream + 64 > len(batch_streams):
            raise ConfigError("could not find enough well-switch trajectories; "
                              "raise test_beta_d or K")
        batch = dynamics.simulate_dataset(system, 64, length,
                                          batch_streams[next_stream])
        next_stream += 1
        for t in range(batch.shape[0]):
            if _has_well_switch(batch[t]) and len(kept) < cfg.n_cases:
                kept.append(batch[t])
    switch = np.stack(kept)
    obs = dynamics.make_observations(switch, obs_model,
                                     batch_streams[-1])
    return switch, obs


# ------------------------------------------------------------------- train

def run_train(cfg: ExperimentConfig, data_dir, out_dir, log=print) -> dict:
    trajs = dynamics.read_trajectories_csv(os.path.join(data_dir, "train.csv"))
    val_trajs = dynamics.read_trajectories_csv(os.path.join(data_dir, "val.csv"))
    if trajs.shape[2] != cfg.state_dim:
        raise ShapeMismatchError(
            f"training data has D={trajs.shape[2]}, config system expects {cfg.state_dim}"
        )
    root = root_rng(cfg)
    schedule = schedule_of(cfg)
    pairs = train.build_pairs(list(trajs), cfg.L)
    val_pairs = train.build_pairs(list(val_trajs), cfg.L)
    model = net.init_model(cfg.state_dim, cfg.L, cfg.hidden_layers,
                           cfg.hidden_width, cfg.embed_dim, child_rng(root, S_INIT))
    val_batch = train.make_val_batch(val_pairs, cfg, child_rng(root, S_VAL))
    log(f"training {cfg.hidden_layers}x{cfg.hidden_width} drift net on "
        f"{pairs.count} pairs for {cfg.epochs} steps")
    model, history = train.train_loop(
        pairs, model, cfg, schedule, child_rng(root, S_TRAIN),
        val_batch=val_batch, checkpoint_dir=out_dir, log=log)
    with open(os.path.join(out_dir, "loss_history.csv"), "w", newline="\n") as f:
        f.write("epoch,mean_loss,lr\n")
        for epoch, loss, lr in history:
            f.write(f"{epoch},{loss:.17g},{lr:.17g}\n")
    files = {"final": "model_final.ckpt", "history": "loss_history.csv"}
    if os.path.exists(os.path.join(out_dir, "model_best.ckpt")):
        files["best"] = "model_best.ckpt"
    extra = {"files": files, "pairs": pairs.count,
             "final_loss": history[-1][1] if history else None}
    write_manifest(out_dir, "train", cfg, extra)
    log(f"wrote checkpoints to {out_dir}")
    return extra


# ----------------------------------------------------------- assimilation

def load_eval_cases(cfg: ExperimentConfig, data_dir, eval_set: str = "default"):
    """Windows, truth slices, and observations for the first n_cases eval
    trajectories: window = states[0:L], truth = states[L:L+K], observations
    cover steps L .. L+K-1."""
    if eval_set == "default":
        truth_file, obs_file = "eval.csv", "observations_eval.csv"
    elif eval_set == "switch":
        truth_file, obs_file = "eval_switch.csv", "observations_eval_switch.csv"
    else:
        raise ConfigError(f"unknown eval set {eval_set!r}")
    path = os.path.join(data_dir, truth_file)
    if not os.path.exists(path):
        raise ConfigError(f"{truth_file} not found in {data_dir} (run simulate first)")
    states = dynamics.read_trajectories_csv(path)
    obs, first = dynamics.read_observations_csv(os.path.join(data_dir, obs_file))
    n_cases = min(cfg.n_cases, states.shape[0])
    ell, k = cfg.L, cfg.K
    if states.shape[1] < ell + k:
        raise ShapeMismatchError(
            f"eval trajectories have {states.shape[1]} states; need L+K={ell + k}"
        )
    if states.shape[2] != cfg.state_dim:
        raise ShapeMismatchError(
            f"eval data has D={states.shape[2]}, config expects {cfg.state_dim}"
        )
    windows = states[:n_cases, :ell]
    truth = states[:n_cases, ell:ell + k]
    ys = obs[:n_cases, ell - first:ell - first + k]
    if ys.shape[1] != k:
        raise ShapeMismatchError("observation file does not cover the horizon")
    return windows, truth, ys


def _flat_traj_ids(n_cases: int, ensemble: int) -> np.ndarray:
    return np.arange(n_cases * ensemble)


def run_assimilate(cfg: ExperimentConfig, checkpoint, data_dir, out_dir,
                   forecast: bool = False, eval_set: str = "default",
                   log=print) -> metrics.MetricReport:
    """Assimilate (or forecast, zeta = 0) the eval cases and write estimates,
    diagnostics, and metrics."""
    if not os.path.exists(checkpoint):
        raise ConfigError(f"checkpoint {checkpoint} does not exist")
    model = net.require_compatible(net.load_checkpoint(checkpoint),
                                   cfg.state_dim, cfg.L)
    windows, truth, ys = load_eval_cases(cfg, data_dir, eval_set)
    n_cases, ensemble = windows.shape[0], cfg.ensemble_size
    schedule = schedule_of(cfg)
    obs_model = dynamics.observation_model(cfg)
    gcfg = assimilate.GuidanceConfig.from_experiment(
        dataclasses.replace(cfg, zeta=0.0) if forecast else cfg)
    mode = "forecast" if gcfg.zeta == 0 else "assimilate"
    log(f"{mode}: {n_cases} cases x {ensemble} members, K={cfg.K}, "
        f"J={gcfg.J}, zeta={gcfg.zeta}, N={gcfg.N}, {gcfg.posterior_order}-order")

    case_streams = split_rng(child_rng(root_rng(cfg), S_ASSIM), n_cases)
    streams = []
    for cs in case_streams:
        streams.extend(split_rng(cs, ensemble))
    flat_windows = np.repeat(windows, ensemble, axis=0)
    flat_ys = np.repeat(ys, ensemble, axis=0)
    est, diag = assimilate.run_batch(
        model, flat_windows, None if gcfg.zeta == 0 else flat_ys,
        schedule, obs_model, gcfg, streams, horizon=cfg.K)

    full = np.concatenate([flat_windows, est], axis=1)
    dynamics.write_trajectories_csv(os.path.join(out_dir, "estimates.csv"), full)
    _write_diagnostics(os.path.join(out_dir, "diagnostics.csv"), diag, cfg.L)

    flat_truth = np.repeat(truth, ensemble, axis=0)
    system = dynamics.make_system(cfg, test_regime=(eval_set == "switch"))
    report = metrics.evaluate_ensemble(flat_truth, est, flat_ys, system, obs_model)
    metrics.write_metrics_csv(os.path.join(out_dir, "metrics.csv"), report)
    extra = {
        "mode": mode, "eval_set": eval_set, "n_cases": n_cases,
        "ensemble_size": ensemble, "checkpoint": os.path.basename(str(checkpoint)),
        "data_dir": os.fspath(data_dir),
        "metrics": {"rmse": report.rmse, "w1": report.w1,
                    "log_prior": report.log_prior, "log_obs_lik": report.log_obs_lik},
        "files": {"estimates": "estimates.csv", "diagnostics": "diagnostics.csv",
                  "metrics": "metrics.csv"},
    }
    write_manifest(out_dir, mode, cfg, extra)
    log(f"rmse {report.rmse:.4f}  w1 {report.w1:.4f}  "
        f"log_prior {report.log_prior:.2f}  log_obs_lik {report.log_obs_lik:.3f}")
    return report


def _write_diagnostics(path, diag, first_step: int) -> None:
    """CSV member,k,n,guidance_loss,weight_entropy,drift_norm; guidance
    columns are empty on unguided nodes."""
    loss = diag["guidance_loss"]
    entropy = diag["weight_entropy"]
    drift = diag["drift_norm"]
    b_sz, horizon, n_grid = drift.shape
    with open(path, "w", newline="\n") as f:
        f.write("member,k,n,guidance_loss,weight_entropy,drift_norm\n")
        for m in range(b_sz):
            for k in range(horizon):
                for n in range(n_grid):
                    gl = loss[m, k, n]
                    ge = entropy[m, k, n]
                    gl_s = "" if np.isnan(gl) else f"{gl:.17g}"
                    ge_s = "" if np.isnan(ge) else f"{ge:.17g}"
                    f.write(f"{m},{k + first_step},{n},{gl_s},{ge_s},"
                            f"{drift[m, k, n]:.17g}\n")


# --------------------------------------------------------------------- bpf

def run_bpf(cfg: ExperimentConfig, data_dir, out_dir, eval_set: str = "default",
            log=print) -> metrics.MetricReport:
    """Bootstrap-particle-filter baseline over the same eval cases."""
    windows, truth, ys = load_eval_cases(cfg, data_dir, eval_set)
    system = dynamics.make_system(cfg, test_regime=(eval_set == "switch"))
    obs_model = dynamics.observation_model(cfg)
    n_cases = windows.shape[0]
    log(f"bpf: {n_cases} cases, {cfg.bpf_particles} particles, K={cfg.K}")
    streams = split_rng(child_rng(root_rng(cfg), S_BPF), n_cases)
    paths = np.empty_like(truth)
    underflows = 0
    for c in range(n_cases):
        paths[c], infos = baseline_bpf.bpf_run(
            windows[c, -1], ys[c], system, obs_model, cfg.bpf_particles, streams[c])
        underflows += sum(i["underflow"] for i in infos)
    dynamics.write_trajectories_csv(
        os.path.join(out_dir, "estimates.csv"),
        np.concatenate([windows, paths], axis=1))
    report = metrics.evaluate_ensemble(truth, paths, ys, system, obs_model)
    metrics.write_metrics_csv(os.path.join(out_dir, "metrics.csv"), report)
    extra = {
        "eval_set": eval_set, "n_cases": n_cases, "underflow_steps": underflows,
        "data_dir": os.fspath(data_dir),
        "metrics": {"rmse": report.rmse, "w1": report.w1,
                    "log_prior": report.log_prior, "log_obs_lik": report.log_obs_lik},
        "files": {"estimates": "estimates.csv", "metrics": "metrics.csv"},
    }
    write_manifest(out_dir, "bpf", cfg, extra)
    log(f"bpf rmse {report.rmse:.4f}  w1 {report.w1:.4f}")
    return report


# ---------------------------------------------------------------- evaluate

def run_evaluate(cfg: ExperimentConfig, run_dir, data_dir, out_dir,
                 eval_set: str = "default", log=print) -> metrics.MetricReport:
    """Recompute metrics for a stored run directory against the eval truth."""
    est_path = os.path.join(run_dir, "estimates.csv")
    if not os.path.exists(est_path):
        raise ConfigError(f"no estimates.csv in {run_dir}")
    full = dynamics.read_trajectories_csv(est_path)
    windows, truth, ys = load_eval_cases(cfg, data_dir, eval_set)
    est = full[:, cfg.L:cfg.L + cfg.K]
    n_cases = truth.shape[0]
    if full.shape[0] % n_cases != 0:
        raise ShapeMismatchError(
            f"{full.shape[0]} estimate members do not align with {n_cases} cases")
    ensemble = full.shape[0] // n_cases
    flat_truth = np.repeat(truth, ensemble, axis=0)
    flat_ys = np.repeat(ys, ensemble, axis=0)
    system = dynamics.make_system(cfg, test_regime=(eval_set == "switch"))
    obs_model = dynamics.observation_model(cfg)
    report = metrics.evaluate_ensemble(flat_truth, est, flat_ys, system, obs_model)
    metrics.write_metrics_csv(os.path.join(out_dir, "metrics.csv"), report)
    write_manifest(out_dir, "evaluate", cfg, {
        "run_dir": os.fspath(run_dir), "eval_set": eval_set,
        "metrics": {"rmse": report.rmse, "w1": report.w1,
                    "log_prior": report.log_prior, "log_obs_lik": report.log_obs_lik},
        "files": {"metrics": "metrics.csv"},
    })
    log(f"rmse {report.rmse:.4f}  w1 {report.w1:.4f}")
    return report


# ------------------------------------------------------------------ ablate

def _ablate_cell(model, cfg, schedule, obs_model, windows, ys, truth, seed_rng,
                 gcfg: assimilate.GuidanceConfig) -> float:
    streams = split_rng(seed_rng, windows.shape[0])
    est, _ = assimilate.run_batch(model, windows, ys, schedule, obs_model,
                                  gcfg, streams)
    value, _ = metrics.rmse(truth, est)
    return value


def run_ablate(cfg: ExperimentConfig, checkpoint, data_dir, out_dir,
               threads: int = 1, j_values=None, estimators=None,
               log=print) -> list:
    """Sweep J and the estimator with shared (paired) seeds.

    Every cell replays the same per-seed streams, so cells are paired
    comparisons. Cells x seeds run on a thread pool (each job is an
    independent vectorized run); results are reduced in index order.
    """
    model = net.require_compatible(net.load_checkpoint(checkpoint),
                                   cfg.state_dim, cfg.L)
    windows, truth, ys = load_eval_cases(cfg, data_dir)
    n = min(cfg.ablate_cases, windows.shape[0])
    windows, truth, ys = windows[:n], truth[:n], ys[:n]
    schedule = schedule_of(cfg)
    obs_model = dynamics.observation_model(cfg)
    base = assimilate.GuidanceConfig.from_experiment(cfg)
    j_values = list(cfg.ablate_J) if j_values is None else list(j_values)
    estimators = ["unbiased", "biased_jensen"] if estimators is None else list(estimators)
    cells = [("J", j, dataclasses.replace(base, J=j)) for j in j_values]
    cells += [("estimator", e, dataclasses.replace(base, estimator=e))
              for e in estimators]
    seeds = list(range(cfg.ablate_seeds))
    seed_rngs = split_rng(child_rng(root_rng(cfg), S_ABLATE), len(seeds))
    log(f"ablate: {len(cells)} cells x {len(seeds)} paired seeds on {n} cases "
        f"({threads} worker{'s' if threads != 1 else ''})")

    jobs = [(ci, si) for ci in range(len(cells)) for si in range(len(seeds))]

    def work(job):
        ci, si = job
        return _ablate_cell(model, cfg, schedule, obs_model, windows, ys, truth,
                            split_rng(seed_rngs[si], 1)[0], cells[ci][2])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    table = np.array(results).reshape(len(cells), len(seeds))

    rows = []
    seeds_text = ";".join(str(s) for s in seeds)
    for (param, value, _), vals in zip(cells, table):
        rows.append((param, value, float(vals.mean()), float(vals.std(ddof=0)),
                     seeds_text))
    with open(os.path.join(out_dir, "ablation.csv"), "w", newline="\n") as f:
        f.write("param,value,rmse_mean,rmse_std,seeds\n")
        for param, value, mean, std, stext in rows:
            f.write(f"{param},{value},{mean:.17g},{std:.17g},{stext}\n")
    write_manifest(out_dir, "ablate", cfg, {
        "cells": [[p, str(v)] for p, v, *_ in rows],
        "seeds": seeds, "cases": n,
        "files": {"ablation": "ablation.csv"},
    })
    for param, value, mean, std, _ in rows:
        log(f"  {param}={value}: rmse {mean:.4f} +- {std:.4f}")
    return rows
