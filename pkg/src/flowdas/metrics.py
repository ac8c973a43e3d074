"""Evaluation metrics: RMSE, Wasserstein-1, expected log-prior under the
true transition, and expected observation log-likelihood.

Trajectory ensembles are arrays of shape (n_members, K, D); a truth
"ensemble" may also have a single member, which broadcasts. W1 compares the
per-(step, coordinate) marginal samples of the two ensembles (in 1-D the
mean absolute difference of sorted samples for equal sizes, the CDF-distance
integral otherwise) and averages over steps and coordinates. The log-prior
of an estimated path scores each transition against a Gaussian centered at
the true deterministic stepper, which is the exact transition density for
additive-noise dynamics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import ShapeMismatchError, check_finite
from .dynamics import ObservationModel, System


def _as_ensemble(x) -> np.ndarray:
    a = check_finite("trajectory ensemble", x)
    if a.ndim == 2:
        a = a[None, ...]
    if a.ndim != 3:
        raise ShapeMismatchError(f"ensemble must be (n, K, D), got {a.shape}")
    return a


def rmse(truth, est) -> tuple[float, np.ndarray]:
    """Root mean squared error over (member, step, coordinate).

    Returns (value, per-step rmse). A single-member truth broadcasts
    against the estimate ensemble.
    """
    t, e = _as_ensemble(truth), _as_ensemble(est)
    if t.shape[1:] != e.shape[1:] or (t.shape[0] not in (1, e.shape[0])):
        raise ShapeMismatchError(f"shape mismatch: truth {t.shape}, est {e.shape}")
    sq = (e - t) ** 2
    per_step = np.sqrt(sq.mean(axis=(0, 2)))
    return float(np.sqrt(sq.mean())), per_step


def w1_1d(a, b) -> float:
    """Empirical 1-D Wasserstein-1 distance between sample sets a and b."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ShapeMismatchError("empty sample set")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    # integral of |F_a - F_b| over the merged support
    points = np.concatenate([a, b])
    points.sort(kind="mergesort")
    deltas = np.diff(points)
    cdf_a = np.searchsorted(a, points[:-1], side="right") / a.size
    cdf_b = np.searchsorted(b, points[:-1], side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * deltas))


def w1(truth, est) -> tuple[float, np.ndarray]:
    """Mean over (step, coordinate) of the 1-D marginal W1 distances."""
    t, e = _as_ensemble(truth), _as_ensemble(est)
    if t.shape[1:] != e.shape[1:]:
        raise ShapeMismatchError(f"shape mismatch: truth {t.shape}, est {e.shape}")
    steps, dim = t.shape[1], t.shape[2]
    per_step = np.empty(steps)
    for k in range(steps):
        per_step[k] = np.mean([w1_1d(t[:, k, d], e[:, k, d]) for d in range(dim)])
    return float(per_step.mean()), per_step


def _gauss_logpdf_sum(resid: np.ndarray, std: float) -> np.ndarray:
    """Sum over the trailing axis of independent N(0, std^2) log-densities."""
    d = resid.shape[-1]
    return (
        -0.5 * np.sum(resid * resid, axis=-1) / std**2
        - d * (0.5 * np.log(2.0 * np.pi) + np.log(std))
    )


def log_prior(est, system: System) -> tuple[float, np.ndarray]:
    """Expected log-density of the estimated transitions under the true model.

    For a path x_1..x_K: sum_{k=1}^{K-1} log N(x_{k+1}; Psi_det(x_k),
    sigma^2 I), averaged over ensemble members; reported as the sum over the
    horizon with the per-transition means alongside.
    """
    e = _as_ensemble(est)
    if e.shape[1] < 2:
        raise ShapeMismatchError("log_prior needs at least two steps")
    pred = system.det_step(e[:, :-1].reshape(-1, e.shape[2]))
    pred = pred.reshape(e.shape[0], e.shape[1] - 1, e.shape[2])
    terms = _gauss_logpdf_sum(e[:, 1:] - pred, system.noise_std)
    per_transition = terms.mean(axis=0)
    return float(per_transition.sum()), per_transition


def log_obs_lik(est, observations, obs_model: ObservationModel) -> tuple[float, np.ndarray]:
    """Expected log-likelihood of the observations given the estimated path.

    sum_k log N(y_k; A(x_k), gamma^2 I), averaged over ensemble members;
    ``observations`` is (K, M) shared or (n, K, M) per member.
    """
    e = _as_ensemble(est)
    ys = check_finite("observations", observations)
    if ys.ndim == 2:
        ys = ys[None, ...]
    if ys.shape[1] != e.shape[1] or ys.shape[0] not in (1, e.shape[0]):
        raise ShapeMismatchError(f"observation shape {ys.shape} vs ensemble {e.shape}")
    resid = obs_model.apply(e) - ys
    terms = _gauss_logpdf_sum(resid, obs_model.gamma)
    per_step = terms.mean(axis=0)
    return float(per_step.sum()), per_step


@dataclass(frozen=True)
class MetricReport:
    rmse: float
    w1: float
    log_prior: float
    log_obs_lik: float
    per_step: dict

    def rows(self):
        return [
            ("rmse", self.rmse, self.per_step["rmse"]),
            ("w1", self.w1, self.per_step["w1"]),
            ("log_prior", self.log_prior, self.per_step["log_prior"]),
            ("log_obs_lik", self.log_obs_lik, self.per_step["log_obs_lik"]),
        ]


def evaluate_ensemble(truth, est, observations, system: System,
                      obs_model: ObservationModel) -> MetricReport:
    """All four table metrics for matched (truth, estimate) ensembles."""
    rmse_v, rmse_steps = rmse(truth, est)
    w1_v, w1_steps = w1(truth, est)
    lp_v, lp_steps = log_prior(est, system)
    lo_v, lo_steps = log_obs_lik(est, observations, obs_model)
    return MetricReport(
        rmse=rmse_v, w1=w1_v, log_prior=lp_v, log_obs_lik=lo_v,
        per_step={
            "rmse": rmse_steps, "w1": w1_steps,
            "log_prior": lp_steps, "log_obs_lik": lo_steps,
        },
    )


def write_metrics_csv(path, report: MetricReport) -> None:
    """CSV rows ``metric,value,per_step_json``."""
    with open(path, "w", newline="\n") as f:
        f.write("metric,value,per_step_json\n")
        for name, value, steps in report.rows():
            blob = json.dumps([float(v) for v in steps])
            f.write(f'{name},{value:.17g},"{blob}"\n')


def read_metrics_csv(path) -> dict:
    out = {}
    with open(path) as f:
        header = f.readline().strip()
        if header != "metric,value,per_step_json":
            raise ShapeMismatchError(f"unexpected metrics header: {header}")
        for line in f:
            name, rest = line.rstrip("\n").split(",", 1)
            value, blob = rest.split(",", 1)
            out[name] = (float(value), json.loads(blob.strip('"')))
    return out
