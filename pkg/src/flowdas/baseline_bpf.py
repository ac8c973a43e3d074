"""Bootstrap particle filter baseline with access to the true simulator.

Particles are advanced by the stochastic transition, reweighted by the
Gaussian observation likelihood, and systematically resampled whenever the
effective sample size drops below N_p / 2. The point estimate is the
weighted particle mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import NumericalError, RngStream, ShapeMismatchError, check_finite
from .dynamics import ObservationModel, System


@dataclass
class ParticleEnsemble:
    particles: np.ndarray      # (N_p, D)
    log_weights: np.ndarray    # (N_p,), normalized so exp sums to 1

    def __post_init__(self):
        if self.particles.ndim != 2 or self.log_weights.shape != (self.particles.shape[0],):
            raise ShapeMismatchError(
                f"bad ensemble shapes {self.particles.shape}, {self.log_weights.shape}"
            )

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def ess(self) -> float:
        w = self.weights
        return 1.0 / float(np.sum(w * w))

    def mean(self) -> np.ndarray:
        return self.weights @ self.particles


def init_ensemble(x0, n_particles: int) -> ParticleEnsemble:
    """All particles at the known initial state with uniform weights."""
    x0 = check_finite("initial state", x0)
    particles = np.repeat(x0[None, :], n_particles, axis=0)
    return ParticleEnsemble(particles, np.full(n_particles, -np.log(n_particles)))


def _normalize_log_weights(logw: np.ndarray):
    m = logw.max()
    if not np.isfinite(m):
        return None  # all likelihoods underflowed
    shifted = logw - m
    total = np.log(np.sum(np.exp(shifted)))
    return shifted - total


def systematic_resample(weights: np.ndarray, rng: RngStream) -> np.ndarray:
    """Systematic resampling: one uniform draw, N_p evenly spaced positions."""
    n = weights.shape[0]
    positions = (rng.uniform() + np.arange(n)) / n
    return np.searchsorted(np.cumsum(weights), positions).clip(max=n - 1)


def bpf_step(ens: ParticleEnsemble, system: System, y, obs_model: ObservationModel,
             rng: RngStream) -> tuple[ParticleEnsemble, dict]:
    """Propagate, reweight, and (when degenerate) resample.

    Returns the new ensemble plus an info dict with 'ess', 'resampled', and
    'underflow' (likelihoods all vanished; weights reset to uniform).
    """
    y = check_finite("observation", y)
    if y.shape != (obs_model.obs_dim,):
        raise ShapeMismatchError(f"observation shape {y.shape} != ({obs_model.obs_dim},)")
    particles = system.transition(ens.particles, rng)
    if not np.all(np.isfinite(particles)):
        raise NumericalError("non-finite particles after propagation")
    r2 = np.sum((obs_model.apply(particles) - y) ** 2, axis=-1)
    logw = ens.log_weights - r2 / (2.0 * obs_model.gamma**2)
    normalized = _normalize_log_weights(logw)
    underflow = normalized is None
    if underflow:
        n = particles.shape[0]
        normalized = np.full(n, -np.log(n))
    new = ParticleEnsemble(particles, normalized)
    resample = new.ess < particles.shape[0] / 2.0
    if resample:
        idx = systematic_resample(new.weights, rng)
        n = particles.shape[0]
        new = ParticleEnsemble(particles[idx], np.full(n, -np.log(n)))
    return new, {"ess": new.ess, "resampled": resample, "underflow": underflow}


def bpf_run(x0, observations, system: System, obs_model: ObservationModel,
            n_particles: int, rng: RngStream):
    """Filter the observation sequence; returns (mean path (K, D), infos).

    observations has shape (K, M); the estimate at step k is the weighted
    particle mean after assimilating y_k.
    """
    ys = check_finite("observations", observations)
    if ys.ndim != 2:
        raise ShapeMismatchError(f"observations must be (K, M), got {ys.shape}")
    ens = init_ensemble(np.asarray(x0, dtype=np.float64), n_particles)
    path = np.empty((ys.shape[0], ens.particles.shape[1]))
    infos = []
    for k in range(ys.shape[0]):
        ens, info = bpf_step(ens, system, ys[k], obs_model, rng)
        path[k] = ens.mean()
        infos.append(info)
    return path, infos
