"""Interpolant coefficient schedules and their closed-form quantities.

The default schedule is

    alpha_s = 1 - s,   beta_s = s^2,   sigma_s = eta * (1 - s),

which satisfies the boundary conditions alpha_0 = 1, alpha_1 = 0, beta_0 = 0,
beta_1 = 1, sigma_1 = 0 and keeps the drift-score coefficients finite at
s = 0 (beta'_0 = 0). The interpolant value and velocity for a pair (x0, x1)
and a standard-normal draw z are

    I_s = alpha_s x0 + beta_s x1 + sqrt(s) sigma_s z,
    R_s = alpha'_s x0 + beta'_s x1 + sqrt(s) sigma'_s z,

where sqrt(s) z plays the role of the Wiener value W_s.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ShapeMismatchError, SingularCoefficientError, check_finite

SINGULAR_TOL = 1e-12


@dataclass(frozen=True)
class InterpolantSchedule:
    kind: str = "default"
    eta: float = 1.0

    def __post_init__(self):
        if self.kind != "default":
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not self.eta > 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")


def _check_s(s):
    s = np.asarray(s, dtype=np.float64)
    if np.any(s < 0.0) or np.any(s > 1.0):
        raise ValueError(f"interpolation time s must lie in [0, 1], got {s}")
    return s


def coeffs(schedule: InterpolantSchedule, s):
    """Return (alpha, beta, sigma, dalpha, dbeta, dsigma) at ``s``.

    ``s`` may be a scalar or an array; outputs broadcast accordingly.
    """
    s = _check_s(s)
    eta = schedule.eta
    one = np.ones_like(s)
    alpha = 1.0 - s
    beta = s * s
    sigma = eta * (1.0 - s)
    dalpha = -one
    dbeta = 2.0 * s
    dsigma = -eta * one
    return alpha, beta, sigma, dalpha, dbeta, dsigma


def sigma_at(schedule: InterpolantSchedule, s):
    """Noise amplitude sigma_s of the SDE at ``s``."""
    s = _check_s(s)
    return schedule.eta * (1.0 - s)


def endpoint_noise_std(schedule: InterpolantSchedule, s):
    """sqrt of the remaining noise variance integral_s^1 sigma_u^2 du.

    Closed form for the default schedule: eta^2 (1 - s)^3 / 3.
    """
    s = _check_s(s)
    return schedule.eta * np.sqrt((1.0 - s) ** 3 / 3.0)


def interpolate(schedule: InterpolantSchedule, s, x0, x1, z):
    """Interpolant value I_s and velocity R_s for endpoints (x0, x1), draw z.

    Batched: with ``s`` of shape (...,) and states of shape (..., D), the
    leading axes broadcast.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    try:
        np.broadcast_shapes(x0.shape, x1.shape, z.shape)
    except ValueError as e:
        raise ShapeMismatchError(
            f"x0, x1, z must broadcast, got {x0.shape}, {x1.shape}, {z.shape}"
        ) from e
    s = _check_s(s)
    alpha, beta, sigma, dalpha, dbeta, dsigma = coeffs(schedule, s)
    root = np.sqrt(s)
    a = np.expand_dims(alpha, -1) if np.ndim(alpha) else alpha
    b = np.expand_dims(beta, -1) if np.ndim(beta) else beta
    sig = np.expand_dims(root * sigma, -1) if np.ndim(sigma) else root * sigma
    da = np.expand_dims(dalpha, -1) if np.ndim(dalpha) else dalpha
    db = np.expand_dims(dbeta, -1) if np.ndim(dbeta) else dbeta
    dsig = np.expand_dims(root * dsigma, -1) if np.ndim(dsigma) else root * dsigma
    value = a * x0 + b * x1 + sig * z
    velocity = da * x0 + db * x1 + dsig * z
    return value, velocity


def interpolate_at_noise(schedule: InterpolantSchedule, s, x0, x1, w):
    """Interpolant value with the Wiener value ``w`` held fixed.

    I(s; w) = alpha_s x0 + beta_s x1 + sigma_s w. Differentiating in s with
    ``w`` frozen gives exactly R_s, which is what finite-difference checks
    of the velocity must use (the sqrt(s) factor lives inside ``w``).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    alpha, beta, sigma, _, _, _ = coeffs(schedule, s)
    a = np.expand_dims(alpha, -1) if np.ndim(alpha) else alpha
    b = np.expand_dims(beta, -1) if np.ndim(beta) else beta
    sig = np.expand_dims(sigma, -1) if np.ndim(sigma) else sigma
    return a * x0 + b * x1 + sig * w


def score_coefficient(schedule: InterpolantSchedule, s):
    """A_s = 1 / (sqrt(s) (sigma'_s beta_s - sigma_s beta'_s)).

    Diverges as s -> 0; raises SingularCoefficientError within SINGULAR_TOL
    of the singular set.
    """
    s = _check_s(s)
    _, beta, sigma, _, dbeta, dsigma = coeffs(schedule, s)
    denom = np.sqrt(s) * (dsigma * beta - sigma * dbeta)
    if np.any(np.abs(denom) < SINGULAR_TOL):
        raise SingularCoefficientError(
            f"score coefficient singular at s={s} (denominator {denom})"
        )
    return 1.0 / denom


def score_from_drift(schedule: InterpolantSchedule, s, x_s, x0, b):
    """Score of the transition kernel from the drift.

    The Stein identity gives grad log p(X_s | X_0) as
    -E[z | X_s] / (sqrt(s) sigma_s) with E[z | X_s] = A_s [beta_s b - c_s],
    c_s = beta'_s X_s + (beta_s alpha'_s - beta'_s alpha_s) X_0, so

        score = -A_s [beta_s b - c_s] / (sqrt(s) sigma_s).

    Validated against the closed-form Gaussian-pair conditional, where this
    form reproduces the analytic score exactly for the optimal drift.
    """
    x_s = check_finite("x_s", x_s)
    x0 = check_finite("x0", x0)
    b = check_finite("drift", b)
    if x_s.shape != x0.shape or x_s.shape != b.shape:
        raise ShapeMismatchError(
            f"x_s, x0, b must share a shape, got {x_s.shape}, {x0.shape}, {b.shape}"
        )
    alpha, beta, sigma, dalpha, dbeta, _ = coeffs(schedule, s)
    a_s = score_coefficient(schedule, s)
    root_sig = np.sqrt(s) * sigma
    if np.any(np.abs(root_sig) < SINGULAR_TOL):
        raise SingularCoefficientError(f"sqrt(s) sigma_s vanishes at s={s}")
    c = dbeta * x_s + (beta * dalpha - dbeta * alpha) * x0
    return -a_s * (beta * b - c) / root_sig
