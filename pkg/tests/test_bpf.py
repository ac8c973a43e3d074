import numpy as np
import pytest

from flowdas.baseline_bpf import (
    ParticleEnsemble,
    bpf_run,
    bpf_step,
    init_ensemble,
    systematic_resample,
)
from flowdas.core import RngStream
from flowdas.dynamics import ObservationModel, make_system
from flowdas.presets import preset


def _lingauss():
    cfg = preset("lingauss-test")
    return make_system(cfg), ObservationModel("identity", 0.2, 1)


def test_flat_likelihood_keeps_uniform_weights(rng):
    system, _ = _lingauss()
    obs = ObservationModel("identity", 1e9, 1)
    ens = init_ensemble(np.array([0.3]), 64)
    new, info = bpf_step(ens, system, np.array([0.0]), obs, rng)
    assert new.weights == pytest.approx(np.full(64, 1 / 64), abs=1e-12)
    assert not info["resampled"]
    assert info["ess"] == pytest.approx(64.0)


def test_identical_particles_estimate_is_propagated_mean():
    cfg = preset("lingauss-test", lin_noise=1e-12)
    system = make_system(cfg)
    obs = ObservationModel("identity", 0.5, 1)
    ens = init_ensemble(np.array([1.0]), 32)
    new, _ = bpf_step(ens, system, np.array([0.9]), obs, RngStream(0, 3))
    assert new.mean() == pytest.approx([0.9], abs=1e-9)  # 0.9 * 1.0 + tiny noise


def test_ess_range_and_normalization(rng):
    system, obs = _lingauss()
    ens = init_ensemble(np.array([0.0]), 128)
    for k in range(5):
        ens, info = bpf_step(ens, system, np.array([0.1 * k]), obs, rng)
        assert 1.0 <= info["ess"] <= 128.0
        assert np.exp(ens.log_weights).sum() == pytest.approx(1.0, abs=1e-12)


def test_systematic_resample_preserves_mean_in_expectation():
    w = np.array([0.5, 0.25, 0.125, 0.125])
    values = np.array([1.0, 2.0, 3.0, 4.0])
    target = w @ values
    means = []
    for i in range(1000):
        idx = systematic_resample(w, RngStream(99, i))
        means.append(values[idx].mean())
    assert np.mean(means) == pytest.approx(target, rel=0.01)


def test_underflow_resets_to_uniform():
    system, _ = _lingauss()
    obs = ObservationModel("identity", 1e-300, 1)
    ens = init_ensemble(np.array([0.0]), 16)
    new, info = bpf_step(ens, system, np.array([100.0]), obs, RngStream(1, 1))
    assert info["underflow"]
    assert np.all(np.isfinite(new.log_weights))


def test_bpf_run_reproducible():
    system, obs = _lingauss()
    ys = RngStream(5, 0).normal((10, 1))
    a, _ = bpf_run(np.zeros(1), ys, system, obs, 256, RngStream(5, 1))
    b, _ = bpf_run(np.zeros(1), ys, system, obs, 256, RngStream(5, 1))
    assert np.array_equal(a, b)


def test_bpf_tracks_near_noiseless_observations():
    cfg = preset("lingauss-test")
    system = make_system(cfg)
    obs_model = ObservationModel("identity", 1e-3, 1)
    rng = RngStream(21, 0)
    truth = [np.array([0.5])]
    ys = []
    sim = RngStream(21, 1)
    for _ in range(30):
        truth.append(system.transition(truth[-1], sim))
        ys.append(truth[-1] + 1e-3 * sim.normal(1))
    path, _ = bpf_run(truth[0], np.array(ys), system, obs_model, 4096, rng)
    err = np.abs(path[:, 0] - np.array(ys)[:, 0])
    assert np.all(err <= 3 * system.noise_std)


def test_bpf_matches_kalman_on_linear_gaussian():
    """Short Kalman cross-check (the full N_p=16384, 100-step version runs in
    the acceptance suite)."""
    cfg = preset("lingauss-test")
    system = make_system(cfg)
    gamma = 0.2
    obs_model = ObservationModel("identity", gamma, 1)
    sim = RngStream(31, 7)
    x = np.array([0.0])
    ys = []
    for _ in range(40):
        x = system.transition(x, sim)
        ys.append(x + gamma * sim.normal(1))
    ys = np.array(ys)

    path, _ = bpf_run(np.zeros(1), ys, system, obs_model, 8192, RngStream(31, 8))

    # exact scalar Kalman filter
    a, q = cfg.lin_coeff, cfg.lin_noise**2
    mean, var = 0.0, 0.0
    kf = []
    for y in ys[:, 0]:
        pm, pv = a * mean, a * a * var + q
        gain = pv / (pv + gamma**2)
        mean = pm + gain * (y - pm)
        var = (1 - gain) * pv
        kf.append(mean)
    state_std = cfg.lin_noise / np.sqrt(1 - a * a)
    rms = np.sqrt(np.mean((path[:, 0] - np.array(kf)) ** 2))
    assert rms <= 0.05 * state_std


def test_particle_ensemble_validation():
    with pytest.raises(Exception):
        ParticleEnsemble(np.zeros((4, 1)), np.zeros(3))
