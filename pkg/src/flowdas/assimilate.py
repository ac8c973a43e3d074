"""Observation-guided autoregressive sampling with the learned drift.

One transition x_k -> x_{k+1} integrates the interpolant SDE over a uniform
grid s_n = n/N. Each grid step is an Euler-Maruyama move

    X'_{n+1} = X_n + b(X_n | window) ds + sigma_{s_n} sqrt(ds) z_n,

followed (from node ``guidance_start`` on, when zeta > 0) by a guidance
correction: J cheap posterior-endpoint samples Xhat_1^(j) are drawn from
X_n, likelihood weights w_j are computed from the observation, and

    X_{n+1} = X'_{n+1} - zeta * grad_{X_n} sum_j w_j || y - A(Xhat_1^(j)) ||^2

with the weights treated as constants in the backward pass. The state at
s = 1 becomes x_{k+1} and the conditioning window slides forward.

With zeta = 0 the loop degenerates to a pure forecast sample of the learned
transition (no endpoint noise is drawn at all, so forecast mode and zeta = 0
are bit-identical under one seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import net
from .core import (
    ExperimentConfig,
    NumericalError,
    RngStream,
    ShapeMismatchError,
    check_finite,
    split_rng,
)
from .dynamics import ObservationModel
from .interpolant import InterpolantSchedule, endpoint_noise_std, sigma_at


@dataclass(frozen=True)
class GuidanceConfig:
    """Inference hyperparameters of the guided sampler.

    ``clip`` caps the norm of each per-node guidance displacement
    zeta * grad (0 disables). High-order observation operators (the cube)
    otherwise admit a runaway feedback -- the gradient grows like Xhat^5
    once a state overshoots -- so the cap acts as a trust region; for small
    gradients the update is exactly zeta * grad.
    """

    J: int = 21
    zeta: float = 2e-4
    N: int = 128
    posterior_order: str = "second"   # first | second
    estimator: str = "unbiased"       # unbiased | biased_jensen
    guidance_start: int = 1           # n0: first guided grid node
    clip: float = 0.0                 # max per-node displacement norm; 0 = off

    def __post_init__(self):
        if not (1 <= self.guidance_start < self.N):
            raise ValueError("guidance_start must satisfy 1 <= n0 < N")
        if self.J < 1:
            raise ValueError("J must be >= 1")
        if self.zeta < 0:
            raise ValueError("zeta must be >= 0")
        if self.clip < 0:
            raise ValueError("clip must be >= 0")

    @classmethod
    def from_experiment(cls, cfg: ExperimentConfig) -> "GuidanceConfig":
        return cls(J=cfg.J, zeta=cfg.zeta, N=cfg.N,
                   posterior_order=cfg.posterior_order, estimator=cfg.estimator,
                   guidance_start=cfg.guidance_start, clip=cfg.guidance_clip)


def em_step(model, schedule: InterpolantSchedule, s_n: float, ds: float,
            x, cond, rng: RngStream) -> np.ndarray:
    """One Euler-Maruyama move of the interpolant SDE."""
    if not (0.0 <= s_n and s_n + ds <= 1.0 + 1e-12 and ds > 0):
        raise ValueError(f"invalid grid step s={s_n}, ds={ds}")
    x = np.asarray(x, dtype=np.float64)
    return _em_step(model, schedule, s_n, ds, x, np.asarray(cond, dtype=np.float64),
                    rng.normal(x.shape))


def _em_step(model, schedule, s_n, ds, x, cond, z):
    drift = net.forward_batch(model, s_n, x, cond)
    out = x + drift * ds + sigma_at(schedule, s_n) * np.sqrt(ds) * z
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite state after EM step at s={s_n}")
    return out


def posterior_endpoint(model, schedule: InterpolantSchedule, s: float,
                       x, cond, order: str, rng: RngStream) -> np.ndarray:
    """A cheap sample of the SDE endpoint X_1 given X_s.

    First order:  Xhat_1 = X_s + b_s(X_s)(1-s) + nu_s z,
    Second order: Xhat'_1 = X_s + (b_s(X_s) + b_1(Xhat_1)) (1-s) / 2 + nu_s z,
    reusing the first-order endpoint and the same noise draw; nu_s^2 is the
    remaining noise variance integral_s^1 sigma_u^2 du.
    """
    if not 0.0 <= s < 1.0:
        raise ValueError(f"posterior endpoint needs s in [0, 1), got {s}")
    x = np.asarray(x, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    z = rng.normal((1, 1, x.shape[-1]))
    single = x.ndim == 1
    xb = x[None, :] if single else x
    cb = cond[None, ...] if single else cond
    ends, _, _ = _endpoints(model, schedule, s, xb, cb, order, z)
    out = ends[:, 0]
    return out[0] if single else out


def _endpoints(model, schedule, s, x, cond, order, z):
    """Batched endpoint estimates.

    x (B, D), cond (B, L, D), z (B, J, D) -> endpoints (B, J, D) plus the
    shared drift b_s (B, D) and (for order "second") the first-order
    endpoints needed by the guidance pullback.
    """
    remain = 1.0 - s
    b_s = net.forward_batch(model, s, x, cond)
    nu = endpoint_noise_std(schedule, s)
    first = x[:, None, :] + b_s[:, None, :] * remain + nu * z
    if order == "first":
        return first, b_s, None
    if order != "second":
        raise ValueError(f"unknown posterior order {order!r}")
    b_sz, j, d = first.shape
    cond_rep = np.repeat(cond, j, axis=0)
    b_one = net.forward_batch(model, 1.0, first.reshape(b_sz * j, d), cond_rep)
    b_one = b_one.reshape(b_sz, j, d)
    second = x[:, None, :] + 0.5 * (b_s[:, None, :] + b_one) * remain + nu * z
    return second, b_s, first


def mc_weights(y, endpoints, obs_model: ObservationModel) -> np.ndarray:
    """Self-normalized likelihood weights over the J endpoint samples.

    w_j = softmax_j(-||y - A(Xhat_1^(j))||^2 / (2 gamma^2)), stabilized by
    max subtraction; nonnegative and summing to 1.
    """
    y = check_finite("observation", y)
    ends = np.asarray(endpoints, dtype=np.float64)
    r2 = np.sum((obs_model.apply(ends) - y) ** 2, axis=-1)
    return _softmax_weights(r2, obs_model.gamma)


def _softmax_weights(r2: np.ndarray, gamma: float) -> np.ndarray:
    logw = -r2 / (2.0 * gamma * gamma)
    logw = logw - logw.max(axis=-1, keepdims=True)
    w = np.exp(logw)
    return w / w.sum(axis=-1, keepdims=True)


def guidance_grad(model, schedule: InterpolantSchedule, s: float, x, cond,
                  y, obs_model: ObservationModel, gcfg: GuidanceConfig,
                  rng: RngStream) -> np.ndarray:
    """Gradient of the weighted observation discrepancy w.r.t. X_s.

    Draws J endpoint estimates with independent noise and differentiates
    sum_j w_j ||y - A(Xhat_1^(j))||^2 through A, the endpoint formula, and
    the drift network; the weights are constants in the backward pass
    (uniform 1/J for the biased-Jensen estimator).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    cb = np.asarray(cond, dtype=np.float64)
    cb = cb[None, ...] if single else cb
    yb = np.asarray(y, dtype=np.float64)
    yb = yb[None, :] if single else yb
    z = rng.normal((xb.shape[0], gcfg.J, xb.shape[1]))
    grad, _, _ = _guidance_grad(model, schedule, s, xb, cb, yb, obs_model, gcfg, z)
    return grad[0] if single else grad


def _guidance_grad(model, schedule, s, x, cond, y, obs_model, gcfg, z):
    """Batched guidance gradient; returns (grad (B,D), loss (B,), entropy (B,))."""
    remain = 1.0 - s
    ends, _, first = _endpoints(model, schedule, s, x, cond, gcfg.posterior_order, z)
    b_sz, j, d = ends.shape
    resid = obs_model.apply(ends) - y[:, None, :]
    r2 = np.sum(resid * resid, axis=-1)
    if gcfg.estimator == "unbiased":
        w = _softmax_weights(r2, obs_model.gamma)
    else:
        w = np.full_like(r2, 1.0 / j)
    loss = np.sum(w * r2, axis=-1)
    entropy = -np.sum(w * np.log(np.maximum(w, 1e-300)), axis=-1)

    # dL/d(endpoint_j) with the weights held constant
    u = 2.0 * w[:, :, None] * obs_model.vjp(ends, resid)
    u_sum = u.sum(axis=1)
    if gcfg.posterior_order == "first":
        # endpoint = x + b_s(x) (1-s) + const
        grad = u_sum + remain * net.vjp_input(model, s, x, cond, u_sum)
    else:
        # endpoint = x + (b_s(x) + b_1(first(x))) (1-s) / 2 + const,
        # first = x + b_s(x)(1-s) + const
        cond_rep = np.repeat(cond, j, axis=0)
        v = net.vjp_input(model, 1.0, first.reshape(b_sz * j, d), cond_rep,
                          u.reshape(b_sz * j, d))
        v_sum = v.reshape(b_sz, j, d).sum(axis=1)
        shared = net.vjp_input(model, s, x, cond, u_sum + remain * v_sum)
        grad = u_sum + 0.5 * remain * (v_sum + shared)
    if not np.all(np.isfinite(grad)):
        raise NumericalError(f"non-finite guidance gradient at s={s}")
    return grad, loss, entropy


def assimilate_step(model, window, y, schedule: InterpolantSchedule,
                    obs_model: ObservationModel, gcfg: GuidanceConfig,
                    rng: RngStream):
    """One guided transition from the last window state; returns (x_next, diag).

    ``diag`` maps 'guidance_loss', 'weight_entropy' (guided nodes) and
    'drift_norm' (all nodes) to per-node arrays.
    """
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2:
        raise ShapeMismatchError(f"window must be (L, D), got {window.shape}")
    d = window.shape[1]
    em_noise = rng.normal((1, gcfg.N, d))
    end_noise = None
    if gcfg.zeta > 0:
        end_noise = rng.normal((1, gcfg.N, gcfg.J, d))
    yb = None if y is None else np.asarray(y, dtype=np.float64)[None, :]
    x, diag = _advance_transition(model, schedule, obs_model, gcfg,
                                  window[None, ...], yb, em_noise, end_noise)
    return x[0], {k: v[0] for k, v in diag.items()}


def _advance_transition(model, schedule, obs_model, gcfg, windows, ys,
                        em_noise, end_noise):
    """Integrate one transition for a batch of members.

    windows (B, L, D), ys (B, M) or None, em_noise (B, N, D),
    end_noise (B, N, J, D) or None. Returns (states at s=1 (B, D), diag).
    """
    n_grid = gcfg.N
    ds = 1.0 / n_grid
    b_sz, _, d = windows.shape
    x = windows[:, -1].copy()
    guided = gcfg.zeta > 0 and ys is not None
    diag = {
        "guidance_loss": np.full((b_sz, n_grid), np.nan),
        "weight_entropy": np.full((b_sz, n_grid), np.nan),
        "drift_norm": np.full((b_sz, n_grid), np.nan),
    }
    for n in range(n_grid):
        s_n = n / n_grid
        drift = net.forward_batch(model, s_n, x, windows)
        diag["drift_norm"][:, n] = np.sqrt(np.sum(drift * drift, axis=1))
        proposal = x + drift * ds + sigma_at(schedule, s_n) * np.sqrt(ds) * em_noise[:, n]
        if guided and n >= gcfg.guidance_start:
            grad, loss, entropy = _guidance_grad(
                model, schedule, s_n, x, windows, ys, obs_model, gcfg,
                end_noise[:, n],
            )
            diag["guidance_loss"][:, n] = loss
            diag["weight_entropy"][:, n] = entropy
            step = gcfg.zeta * grad
            if gcfg.clip > 0:
                norms = np.sqrt(np.sum(step * step, axis=1, keepdims=True))
                step = step * np.minimum(1.0, gcfg.clip / np.maximum(norms, 1e-300))
            x = proposal - step
        else:
            x = proposal
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite state during transition at node {n}")
    return x, diag


def run_batch(model, windows, ys, schedule: InterpolantSchedule,
              obs_model: ObservationModel, gcfg: GuidanceConfig,
              streams: list[RngStream], horizon: int | None = None):
    """Autoregressive assimilation for B independent members.

    windows (B, L, D) initial conditioning windows; ys (B, K, M) per-member
    observation sequences, or None for pure forecasting over ``horizon``
    steps. Member b draws all its noise from streams[b]: per transition,
    first the (N, D) EM block, then -- only when guidance is active -- the
    (N, J, D) endpoint block.

    Returns (estimates (B, K, D), diag arrays (B, K, N)).
    """
    windows = np.asarray(windows, dtype=np.float64).copy()
    b_sz, cond_len, d = windows.shape
    if len(streams) != b_sz:
        raise ShapeMismatchError(f"{len(streams)} streams for {b_sz} members")
    if ys is not None:
        ys = np.asarray(ys, dtype=np.float64)
        if ys.ndim != 3 or ys.shape[0] != b_sz:
            raise ShapeMismatchError(f"observations must be (B, K, M), got {np.shape(ys)}")
        horizon = ys.shape[1]
    elif horizon is None:
        raise ValueError("horizon required when ys is None")
    guided = gcfg.zeta > 0 and ys is not None
    estimates = np.empty((b_sz, horizon, d))
    diag = {
        "guidance_loss": np.empty((b_sz, horizon, gcfg.N)),
        "weight_entropy": np.empty((b_sz, horizon, gcfg.N)),
        "drift_norm": np.empty((b_sz, horizon, gcfg.N)),
    }
    for k in range(horizon):
        em_noise = np.stack([st.normal((gcfg.N, d)) for st in streams])
        end_noise = None
        if guided:
            end_noise = np.stack([st.normal((gcfg.N, gcfg.J, d)) for st in streams])
        y_k = None if ys is None else ys[:, k]
        x, step_diag = _advance_transition(
            model, schedule, obs_model, gcfg, windows, y_k, em_noise, end_noise
        )
        estimates[:, k] = x
        for key in diag:
            diag[key][:, k] = step_diag[key]
        windows = np.concatenate([windows[:, 1:], x[:, None, :]], axis=1)
    return estimates, diag


def run(model, window, observations, schedule: InterpolantSchedule,
        obs_model: ObservationModel, gcfg: GuidanceConfig,
        ensemble_size: int, rng: RngStream, horizon: int | None = None):
    """Ensemble of independent guided runs for one case.

    ``window`` (L, D) known initial states; ``observations`` (K, M) or None
    (forecast; ``horizon`` then sets K). Members use split streams, so any
    execution order yields identical results.

    Returns (estimates (ensemble, K, D), diag arrays (ensemble, K, N)).
    """
    window = np.asarray(window, dtype=np.float64)
    ys = None
    if observations is not None:
        obs = np.asarray(observations, dtype=np.float64)
        if obs.ndim != 2:
            raise ShapeMismatchError(f"observations must be (K, M), got {obs.shape}")
        ys = np.repeat(obs[None, ...], ensemble_size, axis=0)
    elif horizon is None:
        raise ValueError("horizon required when observations is None")
    windows = np.repeat(window[None, ...], ensemble_size, axis=0)
    streams = split_rng(rng, ensemble_size)
    return run_batch(model, windows, ys, schedule, obs_model, gcfg, streams,
                     horizon=horizon)
