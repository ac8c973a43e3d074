"""Named configuration presets.

``*-paper`` presets mirror the published experiment scales; ``*-desk``
presets are reduced-cost profiles that the acceptance suite pins to;
``lingauss-test`` drives the closed-form linear-Gaussian oracles.
"""

from __future__ import annotations

import dataclasses

from .core import ConfigError, ExperimentConfig

PRESETS: dict = {
    "lorenz-paper": dict(
        system="lorenz63", sigma=0.25, gamma=0.25, h=0.05, burn_in=1000,
        n_traj=1024, traj_len=1024, observation="arctan_first",
        epochs=23000, batch_pairs=256, noise_draws=4, lr=0.005,
        hidden_layers=5, hidden_width=256, embed_dim=4, checkpoint_every=1000,
        K=15, L=1, n_cases=64, J=21, zeta=2e-4, N=128,
        posterior_order="second", estimator="unbiased",
    ),
    "lorenz-desk": dict(
        system="lorenz63", sigma=0.25, gamma=0.25, h=0.05, burn_in=1000,
        n_traj=640, traj_len=256, observation="arctan_first", eta=0.1,
        epochs=4000, batch_pairs=256, noise_draws=4, lr=0.005,
        hidden_layers=5, hidden_width=256, embed_dim=4, checkpoint_every=500,
        K=15, L=1, n_cases=64, J=21, zeta=2e-4, N=128,
        posterior_order="second", estimator="unbiased",
        ablate_J=(3, 6, 12, 21, 30, 50), ablate_seeds=20, ablate_cases=8,
    ),
    "doublewell-paper": dict(
        system="doublewell", beta_d=0.2, test_beta_d=0.9, dt=0.1, gamma=0.2,
        burn_in=0, n_traj=500, traj_len=100, observation="cube",
        epochs=5000, batch_pairs=256, noise_draws=4, lr=0.005,
        hidden_layers=3, hidden_width=50, embed_dim=4, checkpoint_every=500,
        K=40, L=1, n_cases=50, J=17, zeta=1.0, N=128,
        posterior_order="second", estimator="unbiased", guidance_clip=0.25,
    ),
    "doublewell-desk": dict(
        system="doublewell", beta_d=0.2, test_beta_d=0.9, dt=0.1, gamma=0.2,
        burn_in=0, n_traj=500, traj_len=100, observation="cube",
        epochs=3000, batch_pairs=256, noise_draws=4, lr=0.005,
        hidden_layers=3, hidden_width=50, embed_dim=4, checkpoint_every=500,
        K=40, L=1, n_cases=50, J=17, zeta=1.0, N=128,
        posterior_order="second", estimator="unbiased", guidance_clip=0.25,
    ),
    "lingauss-test": dict(
        system="lingauss", lin_coeff=0.9, lin_noise=0.1, gamma=0.2,
        burn_in=0, n_traj=256, traj_len=64, observation="identity",
        epochs=2000, batch_pairs=256, noise_draws=4, lr=0.005,
        hidden_layers=3, hidden_width=64, embed_dim=4, checkpoint_every=500,
        K=15, L=1, n_cases=32, J=8, zeta=0.05, N=128,
        posterior_order="second", estimator="unbiased",
    ),
}


def preset_names() -> list:
    return sorted(PRESETS)


def preset(name: str, **overrides) -> ExperimentConfig:
    """Resolve a preset name to a configuration, optionally overriding fields."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    values = dict(PRESETS[name])
    values.update(overrides)
    return ExperimentConfig(**values)


def is_preset(name: str) -> bool:
    return name in PRESETS


def preset_fields(name: str) -> dict:
    """The non-default fields a preset sets (for manifests and docs)."""
    cfg = preset(name)
    default = ExperimentConfig()
    return {
        f.name: getattr(cfg, f.name)
        for f in dataclasses.fields(cfg)
        if getattr(cfg, f.name) != getattr(default, f.name)
    }
