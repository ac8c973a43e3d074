import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowdas.core import RngStream, SingularCoefficientError
from flowdas.interpolant import (
    InterpolantSchedule,
    coeffs,
    endpoint_noise_std,
    interpolate,
    interpolate_at_noise,
    score_coefficient,
    score_from_drift,
)

SCH = InterpolantSchedule()


@pytest.mark.parametrize(
    "s,expected",
    [
        (0.0, (1.0, 0.0, 1.0, -1.0, 0.0, -1.0)),
        (1.0, (0.0, 1.0, 0.0, -1.0, 2.0, -1.0)),
        (0.5, (0.5, 0.25, 0.5, -1.0, 1.0, -1.0)),
    ],
)
def test_default_coeff_values(s, expected):
    assert coeffs(SCH, s) == pytest.approx(expected, abs=0.0)


def test_coeffs_rejects_out_of_range():
    with pytest.raises(ValueError):
        coeffs(SCH, -0.01)
    with pytest.raises(ValueError):
        coeffs(SCH, 1.01)


def test_boundary_conditions_any_eta():
    for eta in (0.5, 1.0, 2.0):
        sch = InterpolantSchedule(eta=eta)
        a0, b0, s0, *_ = coeffs(sch, 0.0)
        a1, b1, s1, *_ = coeffs(sch, 1.0)
        assert (a0, b0) == (1.0, 0.0)
        assert (a1, b1, s1) == (0.0, 1.0, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_interpolate_boundaries_exact(seed):
    rng = RngStream(seed, 17)
    x0, x1, z = rng.normal(3), rng.normal(3), rng.normal(3)
    v0, _ = interpolate(SCH, 0.0, x0, x1, z)
    v1, _ = interpolate(SCH, 1.0, x0, x1, z)
    assert np.array_equal(v0, x0)
    assert np.array_equal(v1, x1)


def test_interpolate_midpoint_example():
    value, velocity = interpolate(SCH, 0.5, np.array([0.0]), np.array([4.0]),
                                  np.array([0.0]))
    assert value == pytest.approx([1.0])
    assert velocity == pytest.approx([4.0])


def test_velocity_matches_dds_at_frozen_noise(rng):
    # central difference of I(s; w) with the Wiener value w frozen
    x0, x1, z = rng.normal(3), rng.normal(3), rng.normal(3)
    h = 1e-5
    for s in np.linspace(0.01, 0.99, 25):
        w = np.sqrt(s) * z
        _, velocity = interpolate(SCH, s, x0, x1, z)
        plus = interpolate_at_noise(SCH, s + h, x0, x1, w)
        minus = interpolate_at_noise(SCH, s - h, x0, x1, w)
        fd = (plus - minus) / (2 * h)
        assert np.max(np.abs(fd - velocity)) <= 1e-6 * max(1.0, np.max(np.abs(velocity)))


def test_score_coefficient_example():
    # sqrt(.5) * (-1 * .25 - .5 * 1) = -0.75 / sqrt(2); A = -sqrt(2)/0.75
    assert score_coefficient(SCH, 0.5) == pytest.approx(-np.sqrt(2) / 0.75)
    assert score_coefficient(SCH, 0.5) == pytest.approx(-1.8856, abs=1e-4)


def test_score_singular_at_zero():
    with pytest.raises(SingularCoefficientError):
        score_coefficient(SCH, 0.0)
    with pytest.raises(SingularCoefficientError):
        score_from_drift(SCH, 0.0, np.zeros(2), np.zeros(2), np.zeros(2))


def test_score_zero_when_drift_cancels(rng):
    s = 0.6
    x_s, x0 = rng.normal(3), rng.normal(3)
    alpha, beta, _, dalpha, dbeta, _ = coeffs(SCH, s)
    c = dbeta * x_s + (beta * dalpha - dbeta * alpha) * x0
    b = c / beta
    assert score_from_drift(SCH, s, x_s, x0, b) == pytest.approx(np.zeros(3), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 0.95))
def test_score_linear_in_drift(seed, s):
    rng = RngStream(seed, 23)
    x_s, x0 = rng.normal(2), rng.normal(2)
    b1, b2 = rng.normal(2), rng.normal(2)
    lhs = score_from_drift(SCH, s, x_s, x0, b1 + b2)
    rhs = (score_from_drift(SCH, s, x_s, x0, b1)
           + score_from_drift(SCH, s, x_s, x0, b2)
           - score_from_drift(SCH, s, x_s, x0, np.zeros(2)))
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9)


def test_endpoint_noise_closed_form():
    for s in (0.0, 0.3, 0.9):
        # integral_s^1 eta^2 (1-u)^2 du = eta^2 (1-s)^3 / 3
        grid = np.linspace(s, 1.0, 20001)
        quad = np.trapezoid(SCH.eta**2 * (1 - grid) ** 2, grid)
        assert endpoint_noise_std(SCH, s) == pytest.approx(np.sqrt(quad), rel=1e-6)


def test_score_from_drift_exact_for_optimal_gaussian_drift():
    """For pairs x1 = x0 + eps the optimal drift E[R | I_s, x0] is available
    in closed form, and score_from_drift applied to it must reproduce the
    exact conditional score at every s."""
    rng = RngStream(9, 31)
    for s in (0.2, 0.5, 0.9):
        alpha, beta, sigma, dalpha, dbeta, dsigma = coeffs(SCH, s)
        var = beta**2 + s * sigma**2
        x0 = rng.normal(400)
        eps = rng.normal(400)
        z = rng.normal(400)
        x_s, _ = interpolate(SCH, s, x0, x0 + eps, z)
        xi = x_s - (alpha + beta) * x0
        optimal = (dalpha + dbeta) * x0 + (dbeta * beta + s * dsigma * sigma) * xi / var
        est = score_from_drift(SCH, s, x_s, x0, optimal)
        assert est == pytest.approx(-xi / var, rel=1e-10, abs=1e-12)


def test_trained_gaussian_pair_score_matches_analytic():
    """1-D pairs x1 = x0 + eps: near s = 1 the transition kernel is close to
    N(x_s; x0, beta_s^2 + s sigma_s^2), whose score is available in closed
    form. Train a small drift by regression and compare score_from_drift."""
    from flowdas import net
    from flowdas.train import build_pairs, loss_and_grads, adam_step, AdamState
    from flowdas.core import ExperimentConfig

    rng = RngStream(2024, 3)
    x0 = rng.normal((8192, 1))
    x1 = x0 + rng.normal((8192, 1))
    trajs = np.stack([x0, x1], axis=1)  # (n, 2, 1)
    pairs = build_pairs(list(trajs), 1)
    cfg = ExperimentConfig(system="lingauss", lr=0.01, epochs=2500,
                           batch_pairs=512, noise_draws=2, hidden_layers=2,
                           hidden_width=64)
    model = net.init_model(1, 1, 2, 64, 4, RngStream(2024, 4))
    state = AdamState.for_model(model)
    train_rng = RngStream(2024, 5)
    for step in range(cfg.epochs):
        w, succ = pairs.sample(train_rng, cfg.batch_pairs)
        _, grads = loss_and_grads(model, w, succ, SCH, train_rng, cfg.noise_draws)
        adam_step(model, grads, state, step, cfg.epochs, cfg)

    s = 0.9
    alpha, beta, sigma, *_ = coeffs(SCH, s)
    var = beta**2 + s * sigma**2
    test_rng = RngStream(77, 8)
    x0_t = test_rng.normal((512, 1))
    x1_t = x0_t + test_rng.normal((512, 1))
    z_t = test_rng.normal((512, 1))
    x_s, _ = interpolate(SCH, s, x0_t, x1_t, z_t)
    drift = net.forward_batch(model, np.full(512, s), x_s, x0_t[:, None, :])
    est = score_from_drift(SCH, s, x_s[:, 0], x0_t[:, 0], drift[:, 0])
    analytic = -(x_s[:, 0] - x0_t[:, 0]) / var
    mse = np.mean((est - analytic) ** 2)
    assert mse <= 0.10 * np.mean(analytic**2)
