import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowdas.core import RngStream, ShapeMismatchError
from flowdas.dynamics import ObservationModel, make_system
from flowdas.metrics import (
    evaluate_ensemble,
    log_obs_lik,
    log_prior,
    read_metrics_csv,
    rmse,
    w1,
    w1_1d,
    write_metrics_csv,
)
from flowdas.presets import preset


def test_rmse_zero_on_equal(rng):
    a = rng.normal((4, 6, 3))
    value, per_step = rmse(a, a)
    assert value == 0.0 and np.all(per_step == 0)


def test_rmse_constant_offset(rng):
    a = rng.normal((4, 6, 3))
    value, _ = rmse(a, a + 0.37)
    assert value == pytest.approx(0.37, rel=1e-12)


def test_rmse_matches_brute_force(rng):
    t = rng.normal((3, 5, 2))
    e = rng.normal((3, 5, 2))
    value, _ = rmse(t, e)
    brute = 0.0
    for m in range(3):
        for k in range(5):
            for d in range(2):
                brute += (e[m, k, d] - t[m, k, d]) ** 2
    assert value == pytest.approx(np.sqrt(brute / 30), abs=1e-12)


def test_rmse_shape_mismatch(rng):
    with pytest.raises(ShapeMismatchError):
        rmse(rng.normal((2, 5, 1)), rng.normal((2, 4, 1)))


def test_w1_identical_zero(rng):
    a = rng.normal((6, 4, 2))
    value, _ = w1(a, a)
    assert value == 0.0


def test_w1_point_masses():
    a = np.zeros((1, 1, 1))
    b = np.full((1, 1, 1), 0.73)
    value, _ = w1(a, b)
    assert value == pytest.approx(0.73)


def test_w1_1d_matches_lp_oracle(rng):
    from scipy.optimize import linprog

    for _ in range(5):
        a = rng.normal(4)
        b = rng.normal(4)
        cost = np.abs(a[:, None] - b[None, :]).ravel()
        # transport polytope marginals
        a_eq = np.zeros((8, 16))
        for i in range(4):
            a_eq[i, i * 4:(i + 1) * 4] = 1
        for j in range(4):
            a_eq[4 + j, j::4] = 1
        res = linprog(cost, A_eq=a_eq, b_eq=np.full(8, 0.25), method="highs")
        assert res.status == 0
        assert w1_1d(a, b) == pytest.approx(res.fun, abs=1e-9)


def test_w1_1d_unequal_sizes_matches_subsampled_lp(rng):
    from scipy.optimize import linprog

    a = rng.normal(3)
    b = rng.normal(6)
    cost = np.abs(a[:, None] - b[None, :]).ravel()
    a_eq = np.zeros((9, 18))
    for i in range(3):
        a_eq[i, i * 6:(i + 1) * 6] = 1
    for j in range(6):
        a_eq[3 + j, j::6] = 1
    marg = np.concatenate([np.full(3, 1 / 3), np.full(6, 1 / 6)])
    res = linprog(cost, A_eq=a_eq, b_eq=marg, method="highs")
    assert w1_1d(a, b) == pytest.approx(res.fun, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-5, 5))
def test_w1_shift_invariance(seed, shift):
    r = RngStream(seed, 50)
    a = r.normal((5, 3, 2))
    b = r.normal((5, 3, 2))
    base, _ = w1(a, b)
    shifted, _ = w1(a + shift, b + shift)
    assert shifted == pytest.approx(base, rel=1e-9, abs=1e-12)


def test_gaussian_normalization_value():
    # D = 3, std 0.25: per-transition zero-residual log density, and its sum
    # over a 14-transition horizon
    from flowdas.metrics import _gauss_logpdf_sum

    per = float(_gauss_logpdf_sum(np.zeros((1, 3)), 0.25)[0])
    assert per == pytest.approx(-1.5 * np.log(2 * np.pi) - 3 * np.log(0.25))
    assert per == pytest.approx(1.4021, abs=1e-4)
    assert 14 * per == pytest.approx(19.63, abs=0.01)


def test_log_prior_noise_free_lorenz_path():
    cfg = preset("lorenz-desk")
    system = make_system(cfg)
    x = np.array([2.0, 3.0, 22.0])
    states = [x]
    for _ in range(14):
        states.append(system.det_step(states[-1]))
    traj = np.stack(states)  # 15 states, 14 exact transitions
    total, per_step = log_prior(traj, system)
    per_exact = -1.5 * np.log(2 * np.pi) - 3 * np.log(system.noise_std)
    assert per_step == pytest.approx(np.full(14, per_exact), abs=1e-12)
    assert total == pytest.approx(14 * per_exact, rel=1e-12)


def test_log_prior_one_sigma_displacement():
    cfg = preset("lorenz-desk")
    system = make_system(cfg)
    x = np.array([2.0, 3.0, 22.0])
    nxt = system.det_step(x)
    clean = np.stack([x, nxt])
    bumped = clean.copy()
    bumped[1, 0] += system.noise_std  # one transition-noise sigma
    t_clean, _ = log_prior(clean, system)
    t_bumped, _ = log_prior(bumped, system)
    assert t_clean - t_bumped == pytest.approx(0.5, abs=1e-12)


def test_log_prior_matches_density_oracle(rng):
    cfg = preset("lingauss-test")
    system = make_system(cfg)
    traj = rng.normal((3, 6, 1))
    total, _ = log_prior(traj, system)
    brute = 0.0
    s = cfg.lin_noise
    for m in range(3):
        for k in range(5):
            r = traj[m, k + 1, 0] - cfg.lin_coeff * traj[m, k, 0]
            brute += (-0.5 * np.log(2 * np.pi) - np.log(s) - r * r / (2 * s * s))
    assert total == pytest.approx(brute / 3, abs=1e-9)


def test_log_obs_lik_zero_residual():
    model = ObservationModel("arctan_first", 0.25, 3)
    traj = RngStream(3, 3).normal((2, 15, 3))
    ys = model.apply(traj)
    total, per_step = log_obs_lik(traj, ys, model)
    per_exact = -0.5 * np.log(2 * np.pi) - np.log(0.25)
    assert per_exact == pytest.approx(0.4674, abs=1e-4)
    assert per_step == pytest.approx(np.full(15, per_exact), abs=1e-12)


def test_log_obs_lik_one_gamma_residual():
    model = ObservationModel("identity", 0.5, 1)
    traj = np.zeros((1, 1, 1))
    exact, _ = log_obs_lik(traj, np.zeros((1, 1)), model)
    off, _ = log_obs_lik(traj, np.full((1, 1), 0.5), model)
    assert exact - off == pytest.approx(0.5, abs=1e-12)


def test_log_obs_lik_matches_density_oracle(rng):
    model = ObservationModel("cube", 0.2, 1)
    traj = rng.normal((2, 4, 1))
    ys = rng.normal((4, 1))
    total, _ = log_obs_lik(traj, ys, model)
    brute = 0.0
    for m in range(2):
        for k in range(4):
            r = ys[k, 0] - traj[m, k, 0] ** 3
            brute += (-0.5 * np.log(2 * np.pi) - np.log(0.2)
                      - r * r / (2 * 0.04))
    assert total == pytest.approx(brute / 2, abs=1e-9)


def test_log_prior_decreases_as_residuals_grow():
    cfg = preset("lingauss-test")
    system = make_system(cfg)
    x = np.array([1.0])
    states = [x]
    for _ in range(3):
        states.append(system.det_step(states[-1]))
    exact = np.stack(states)[None]  # zero residuals everywhere
    prev, _ = log_prior(exact, system)
    for bump in (0.05, 0.1, 0.2):
        worse = exact.copy()
        worse[0, 2, 0] += bump  # grows the residuals around step 2
        t, _ = log_prior(worse, system)
        assert t < prev
        prev = t


def test_metrics_csv_roundtrip(tmp_path, rng):
    cfg = preset("lingauss-test")
    system = make_system(cfg)
    obs_model = ObservationModel("identity", 0.2, 1)
    truth = rng.normal((4, 6, 1))
    est = truth + 0.1 * rng.normal((4, 6, 1))
    ys = obs_model.apply(truth) + 0.2 * rng.normal((4, 6, 1))
    report = evaluate_ensemble(truth, est, ys, system, obs_model)
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, report)
    loaded = read_metrics_csv(path)
    assert set(loaded) == {"rmse", "w1", "log_prior", "log_obs_lik"}
    assert loaded["rmse"][0] == pytest.approx(report.rmse, rel=1e-15)
    assert len(loaded["log_prior"][1]) == 5
