"""Command-line driver for the batch pipeline.

    flowdas simulate   --config CFG --out DIR [--seed N] [--force]
    flowdas train      --config CFG --data DIR --out DIR [--seed N] [--force]
    flowdas assimilate --config CFG --checkpoint CKPT --data DIR --out DIR
                       [--zeta X] [--J N] [--eval-set default|switch] ...
    flowdas forecast   (assimilate with guidance disabled)
    flowdas bpf        --config CFG --data DIR --out DIR
    flowdas evaluate   --config CFG --run DIR --data DIR --out DIR
    flowdas plot       --run DIR --out DIR [--case N] [--data DIR]
    flowdas ablate     --config CFG --checkpoint CKPT --data DIR --out DIR
                       [--threads N]
    flowdas presets    [--write DIR]

--config accepts a file path or a preset name (lorenz-paper, lorenz-desk,
doublewell-paper, doublewell-desk, lingauss-test). Exit codes: 0 success,
2 configuration error, 3 data/shape/format error, 4 numerical failure.
"""

from __future__ import annotations

import dataclasses
import os
import sys

import click
import numpy as np

from . import dynamics, pipeline, plotting, presets
from .core import (
    ConfigError,
    ExperimentConfig,
    FlowDasError,
    FormatError,
    NumericalError,
    ShapeMismatchError,
    config_to_toml,
    load_config,
)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _exit_code(err: FlowDasError) -> int:
    if isinstance(err, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(err, (ShapeMismatchError, FormatError)):
        return EXIT_DATA
    return EXIT_CONFIG


def _fail(err: FlowDasError):
    click.echo(f"error: {err}", err=True)
    sys.exit(_exit_code(err))


def resolve_config(value: str, seed, zeta=None, j=None) -> ExperimentConfig:
    if presets.is_preset(value):
        cfg = presets.preset(value)
    elif os.path.exists(value):
        cfg = load_config(value)
    else:
        raise ConfigError(
            f"--config {value!r} is neither a file nor a preset "
            f"({', '.join(presets.preset_names())})"
        )
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if zeta is not None:
        overrides["zeta"] = zeta
    if j is not None:
        overrides["J"] = j
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _threads_option(threads) -> int:
    if threads is not None:
        return max(1, threads)
    env = os.environ.get("FLOWDAS_THREADS", "")
    return max(1, int(env)) if env.isdigit() else 1


config_opt = click.option("--config", "config_value", required=True,
                          help="Config file path or preset name.")
out_opt = click.option("--out", "out_dir", required=True,
                       help="Output directory (refuses non-empty without --force).")
seed_opt = click.option("--seed", type=int, default=None,
                        help="Override the config seed.")
force_opt = click.option("--force", is_flag=True, help="Allow writing into a non-empty directory.")
data_opt = click.option("--data", "data_dir", required=True,
                        help="Dataset directory produced by `flowdas simulate`.")
threads_opt = click.option("--threads", type=int, default=None,
                           help="Worker cap (FLOWDAS_THREADS env as fallback); never changes results.")
eval_set_opt = click.option("--eval-set", type=click.Choice(["default", "switch"]),
                            default="default",
                            help="Eval trajectories: the held-out split, or the double-well well-switch set.")


@click.group()
def main():
    """Stochastic-interpolant data assimilation pipeline."""


@main.command()
@config_opt
@out_opt
@seed_opt
@force_opt
def simulate(config_value, out_dir, seed, force):
    """Simulate trajectories, split them, and write observations."""
    try:
        cfg = resolve_config(config_value, seed)
        out = pipeline.prepare_out_dir(out_dir, force)
        pipeline.run_simulate(cfg, out, log=click.echo)
    except FlowDasError as e:
        _fail(e)


@main.command()
@config_opt
@data_opt
@out_opt
@seed_opt
@force_opt
def train(config_value, data_dir, out_dir, seed, force):
    """Train the drift network on the simulated training split."""
    try:
        cfg = resolve_config(config_value, seed)
        out = pipeline.prepare_out_dir(out_dir, force)
        pipeline.run_train(cfg, data_dir, out, log=click.echo)
    except FlowDasError as e:
        _fail(e)


def _run_assimilate(config_value, checkpoint, data_dir, out_dir, seed, force,
                    zeta, j, threads, eval_set, forecast):
    try:
        cfg = resolve_config(config_value, seed, zeta=zeta, j=j)
        _threads_option(threads)  # accepted for interface parity; runs are vectorized
        out = pipeline.prepare_out_dir(out_dir, force)
        pipeline.run_assimilate(cfg, checkpoint, data_dir, out,
                                forecast=forecast, eval_set=eval_set,
                                log=click.echo)
    except FlowDasError as e:
        _fail(e)


@main.command()
@config_opt
@click.option("--checkpoint", required=True, help="Trained drift checkpoint (.ckpt).")
@data_opt
@out_opt
@seed_opt
@force_opt
@click.option("--zeta", type=float, default=None, help="Override the guidance step size.")
@click.option("--J", "j", type=int, default=None, help="Override the Monte-Carlo sample count.")
@threads_opt
@eval_set_opt
def assimilate(config_value, checkpoint, data_dir, out_dir, seed, force, zeta,
               j, threads, eval_set):
    """Observation-guided assimilation over the eval cases."""
    _run_assimilate(config_value, checkpoint, data_dir, out_dir, seed, force,
                    zeta, j, threads, eval_set, forecast=False)


@main.command()
@config_opt
@click.option("--checkpoint", required=True, help="Trained drift checkpoint (.ckpt).")
@data_opt
@out_opt
@seed_opt
@force_opt
@threads_opt
@eval_set_opt
def forecast(config_value, checkpoint, data_dir, out_dir, seed, force, threads,
             eval_set):
    """Unguided forecasting (assimilate with zeta = 0)."""
    _run_assimilate(config_value, checkpoint, data_dir, out_dir, seed, force,
                    None, None, threads, eval_set, forecast=True)


@main.command()
@config_opt
@data_opt
@out_opt
@seed_opt
@force_opt
@eval_set_opt
def bpf(config_value, data_dir, out_dir, seed, force, eval_set):
    """Bootstrap-particle-filter baseline with the true simulator."""
    try:
        cfg = resolve_config(config_value, seed)
        out = pipeline.prepare_out_dir(out_dir, force)
        pipeline.run_bpf(cfg, data_dir, out, eval_set=eval_set, log=click.echo)
    except FlowDasError as e:
        _fail(e)


@main.command()
@config_opt
@click.option("--run", "run_dir", required=True, help="Run directory with estimates.csv.")
@data_opt
@out_opt
@force_opt
@eval_set_opt
def evaluate(config_value, run_dir, data_dir, out_dir, force, eval_set):
    """Recompute metrics for a stored run."""
    try:
        cfg = resolve_config(config_value, None)
        out = pipeline.prepare_out_dir(out_dir, force)
        pipeline.run_evaluate(cfg, run_dir, data_dir, out, eval_set=eval_set,
                              log=click.echo)
    except FlowDasError as e:
        _fail(e)


@main.command()
@click.option("--run", "run_dir", required=True, help="Assimilation/forecast run directory.")
@out_opt
@force_opt
@click.option("--case", type=int, default=0, help="Which eval case to render.")
@click.option("--data", "data_dir", default=None,
              help="Dataset directory (defaults to the one in the run manifest).")
def plot(run_dir, out_dir, force, case, data_dir):
    """Render per-coordinate SVG panels for one case."""
    try:
        out = pipeline.prepare_out_dir(out_dir, force)
        _plot(run_dir, out, case, data_dir)
    except FlowDasError as e:
        _fail(e)


def _plot(run_dir, out_dir, case, data_dir):
    manifest = pipeline.read_manifest(run_dir)
    cfg = pipeline.config_from_manifest(manifest)
    data_dir = data_dir or manifest.get("data_dir")
    eval_set = manifest.get("eval_set", "default")
    truth = observations = None
    if data_dir and os.path.exists(os.fspath(data_dir)):
        windows, truth_states, ys = pipeline.load_eval_cases(cfg, data_dir, eval_set)
        if case >= truth_states.shape[0]:
            raise ConfigError(f"case {case} out of range ({truth_states.shape[0]} cases)")
        truth = np.concatenate([windows[case], truth_states[case]], axis=0)
        observations = ys[case]
    est_path = os.path.join(run_dir, "estimates.csv")
    estimates = None
    if os.path.exists(est_path):
        full = dynamics.read_trajectories_csv(est_path)
        ensemble = manifest.get("ensemble_size", 1)
        members = full[case * ensemble:(case + 1) * ensemble]
        if members.shape[0] == 0:
            raise ShapeMismatchError("empty ensemble for requested case")
        estimates = members[:, cfg.L:]
    files = plotting.render_case_svgs(
        out_dir, truth, estimates, observations, cfg.observation,
        first_estimated_step=cfg.L, mask=cfg.mask)
    for f in files:
        click.echo(f"wrote {f}")


@main.command()
@config_opt
@click.option("--checkpoint", required=True, help="Trained drift checkpoint (.ckpt).")
@data_opt
@out_opt
@seed_opt
@force_opt
@threads_opt
def ablate(config_value, checkpoint, data_dir, out_dir, seed, force, threads):
    """Sweep J and the estimator with paired seeds; write the ablation table."""
    try:
        cfg = resolve_config(config_value, seed)
        out = pipeline.prepare_out_dir(out_dir, force)
        pipeline.run_ablate(cfg, checkpoint, data_dir, out,
                            threads=_threads_option(threads), log=click.echo)
    except FlowDasError as e:
        _fail(e)


@main.command("presets")
@click.option("--write", "write_dir", default=None,
              help="Write each preset as a TOML file into this directory.")
def presets_cmd(write_dir):
    """List shipped presets (optionally dump them as config files)."""
    for name in presets.preset_names():
        click.echo(name)
        if write_dir:
            os.makedirs(write_dir, exist_ok=True)
            path = os.path.join(write_dir, f"{name}.toml")
            with open(path, "w", newline="\n") as f:
                f.write(config_to_toml(presets.preset(name)))
            click.echo(f"  wrote {path}")


if __name__ == "__main__":
    main()
