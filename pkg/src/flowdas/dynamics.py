"""Ground-truth simulators, observation operators, and dataset generation.

Three systems are available:

* ``lorenz63`` -- the chaotic convection model with parameters mu = 10,
  rho = 28, tau = 8/3, integrated by classical RK4 with step ``h`` per
  recorded transition; additive N(0, sigma^2 I_3) noise on each transition.
* ``doublewell`` -- dx = -4 x (x^2 - 1) dt + beta_d dxi, Euler-Maruyama with
  step ``dt``; wells at +-1.
* ``lingauss`` -- x' = a x + b eps, the linear-Gaussian system used by the
  closed-form test oracles.

All steppers are vectorized over a leading batch axis and pure given an
RngStream. Trajectory files are CSV with header ``traj_id,step,x0,...`` and
floats printed with 17 significant digits (lossless f64 round-trip).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    ExperimentConfig,
    FormatError,
    NumericalError,
    RngStream,
    ShapeMismatchError,
    check_finite,
    split_rng,
)

LORENZ_MU = 10.0
LORENZ_RHO = 28.0
LORENZ_TAU = 8.0 / 3.0


@dataclass(frozen=True)
class LorenzParams:
    mu: float = LORENZ_MU
    rho: float = LORENZ_RHO
    tau: float = LORENZ_TAU
    sigma: float = 0.25
    h: float = 0.05


@dataclass(frozen=True)
class DoubleWellParams:
    beta_d: float = 0.2
    dt: float = 0.1


@dataclass(frozen=True)
class LinGaussParams:
    coeff: float = 0.9
    noise: float = 0.1


def lorenz_deriv(x: np.ndarray, p: LorenzParams = LorenzParams()) -> np.ndarray:
    a, b, c = x[..., 0], x[..., 1], x[..., 2]
    return np.stack(
        [p.mu * (b - a), a * (p.rho - c) - b, a * b - p.tau * c], axis=-1
    )


def lorenz_rk4_step(x, p: LorenzParams = LorenzParams()) -> np.ndarray:
    """One deterministic RK4 update of the Lorenz vector field."""
    x = check_finite("lorenz state", x)
    if x.shape[-1] != 3:
        raise ShapeMismatchError(f"lorenz state needs trailing dim 3, got {x.shape}")
    h = p.h
    k1 = h * lorenz_deriv(x, p)
    k2 = h * lorenz_deriv(x + 0.5 * k1, p)
    k3 = h * lorenz_deriv(x + 0.5 * k2, p)
    k4 = h * lorenz_deriv(x + k3, p)
    return x + (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0


def lorenz_transition(x, p: LorenzParams, rng: RngStream) -> np.ndarray:
    """Stochastic transition: RK4 step plus N(0, sigma^2 h I_3) noise.

    sigma is the continuous-time diffusion magnitude of the forcing, so the
    per-transition increment scales with sqrt(h). (The literal "add noise of
    std sigma per step" reading floors every estimator's RMSE at sigma and
    is incompatible with the reported tracking errors; see README.)
    """
    out = lorenz_rk4_step(x, p)
    return out + p.sigma * np.sqrt(p.h) * rng.normal(out.shape)


def doublewell_drift(x: np.ndarray) -> np.ndarray:
    return -4.0 * x * (x * x - 1.0)


def doublewell_det_step(x, p: DoubleWellParams = DoubleWellParams()) -> np.ndarray:
    x = check_finite("doublewell state", x)
    return x + doublewell_drift(x) * p.dt


def doublewell_step(x, p: DoubleWellParams, rng: RngStream) -> np.ndarray:
    """Euler-Maruyama: x + drift * dt + beta_d * sqrt(dt) * z."""
    out = doublewell_det_step(x, p)
    return out + p.beta_d * np.sqrt(p.dt) * rng.normal(out.shape)


def lingauss_det_step(x, p: LinGaussParams = LinGaussParams()) -> np.ndarray:
    x = check_finite("lingauss state", x)
    return p.coeff * x


def lingauss_step(x, p: LinGaussParams, rng: RngStream) -> np.ndarray:
    out = lingauss_det_step(x, p)
    return out + p.noise * rng.normal(out.shape)


@dataclass(frozen=True)
class System:
    """A simulatable system: deterministic step, additive noise std, inits."""

    name: str
    dim: int
    noise_std: float          # per-coordinate std of the transition noise
    burn_in: int
    dt: float                 # model time per recorded transition
    _det_step: object = field(repr=False)
    _sample_init: object = field(repr=False)

    def det_step(self, x) -> np.ndarray:
        return self._det_step(x)

    def transition(self, x, rng: RngStream) -> np.ndarray:
        out = self.det_step(x)
        return out + self.noise_std * rng.normal(np.shape(out))

    def sample_init(self, rng: RngStream) -> np.ndarray:
        return self._sample_init(rng)


def make_system(cfg: ExperimentConfig, test_regime: bool = False) -> System:
    """Instantiate the configured ground-truth system.

    ``test_regime`` switches the double well to its stronger test-time
    diffusion (``test_beta_d``), the regime where well switches occur.
    """
    if cfg.system == "lorenz63":
        p = LorenzParams(sigma=cfg.sigma, h=cfg.h)
        return System(
            name="lorenz63", dim=3, noise_std=p.sigma * np.sqrt(p.h),
            burn_in=cfg.burn_in, dt=cfg.h,
            _det_step=lambda x: lorenz_rk4_step(x, p),
            _sample_init=lambda rng: rng.normal(3) * 5.0 + np.array([0.0, 0.0, 25.0]),
        )
    if cfg.system == "doublewell":
        beta = cfg.test_beta_d if test_regime else cfg.beta_d
        p = DoubleWellParams(beta_d=beta, dt=cfg.dt)
        return System(
            name="doublewell", dim=1, noise_std=beta * np.sqrt(cfg.dt),
            burn_in=0, dt=cfg.dt,
            _det_step=lambda x: doublewell_det_step(x, p),
            _sample_init=lambda rng: rng.uniform(1) * 4.0 - 2.0,
        )
    if cfg.system == "lingauss":
        p = LinGaussParams(coeff=cfg.lin_coeff, noise=cfg.lin_noise)
        stat_std = p.noise / np.sqrt(1.0 - p.coeff**2)
        return System(
            name="lingauss", dim=1, noise_std=p.noise, burn_in=0, dt=1.0,
            _det_step=lambda x: lingauss_det_step(x, p),
            _sample_init=lambda rng: rng.normal(1) * stat_std,
        )
    raise ValueError(f"unknown system {cfg.system!r}")


@dataclass(frozen=True)
class ObservationModel:
    """Measurement map A(.) plus observation noise level gamma."""

    operator_id: str
    gamma: float
    state_dim: int
    mask: tuple = (0,)

    def __post_init__(self):
        if self.operator_id not in ("arctan_first", "cube", "identity", "mask"):
            raise ValueError(f"unknown operator {self.operator_id!r}")
        if self.operator_id == "mask":
            if len(self.mask) == 0 or any(
                i < 0 or i >= self.state_dim for i in self.mask
            ):
                raise ShapeMismatchError(
                    f"mask indices {self.mask} out of range for D={self.state_dim}"
                )

    @property
    def obs_dim(self) -> int:
        if self.operator_id in ("arctan_first", "cube"):
            return 1
        if self.operator_id == "identity":
            return self.state_dim
        return len(self.mask)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """A(x); batched over leading axes of x (..., D) -> (..., M)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.state_dim:
            raise ShapeMismatchError(
                f"state has trailing dim {x.shape[-1]}, operator expects {self.state_dim}"
            )
        if self.operator_id == "arctan_first":
            return np.arctan(x[..., 0:1])
        if self.operator_id == "cube":
            return x[..., 0:1] ** 3
        if self.operator_id == "identity":
            return x.copy()
        return x[..., list(self.mask)]

    def vjp(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """J_A(x)^T u: pull an observation-space cotangent back to state space."""
        x = np.asarray(x, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        if u.shape[-1] != self.obs_dim:
            raise ShapeMismatchError(
                f"cotangent trailing dim {u.shape[-1]} != obs dim {self.obs_dim}"
            )
        out = np.zeros_like(x)
        if self.operator_id == "arctan_first":
            out[..., 0] = u[..., 0] / (1.0 + x[..., 0] ** 2)
        elif self.operator_id == "cube":
            out[..., 0] = u[..., 0] * 3.0 * x[..., 0] ** 2
        elif self.operator_id == "identity":
            out[...] = u
        else:
            out[..., list(self.mask)] = u
        return out


def observation_model(cfg: ExperimentConfig) -> ObservationModel:
    return ObservationModel(cfg.observation, cfg.gamma, cfg.state_dim, cfg.mask)


def observe(x, model: ObservationModel, rng: RngStream) -> np.ndarray:
    """y = A(x) + gamma * z with z standard normal."""
    y = model.apply(check_finite("observed state", x))
    return y + model.gamma * rng.normal(y.shape)


def simulate_dataset(system: System, n_traj: int, length: int, rng: RngStream) -> np.ndarray:
    """Simulate ``n_traj`` independent trajectories of ``length`` states.

    Each trajectory owns one child stream: its init is drawn first, then a
    single block of (burn_in + length - 1, D) standard normals, making the
    result independent of batching and execution order. Burn-in steps run
    the same stochastic transition and are discarded.
    """
    if n_traj < 1 or length < 1:
        raise ValueError("n_traj and length must be >= 1")
    streams = split_rng(rng, n_traj)
    inits = np.stack([system.sample_init(s) for s in streams])
    n_steps = system.burn_in + length - 1
    if n_steps > 0:
        noise = np.stack([s.normal((n_steps, system.dim)) for s in streams])
    x = inits
    recorded = np.empty((n_traj, length, system.dim))
    rec = 0
    if system.burn_in == 0:
        recorded[:, 0] = x
        rec = 1
    for t in range(n_steps):
        x = system.det_step(x) + system.noise_std * noise[:, t]
        if t + 1 >= system.burn_in:
            recorded[:, rec] = x
            rec += 1
    if rec != length:
        raise AssertionError("recording bookkeeping is wrong")
    return check_finite("simulated dataset", recorded)


def make_observations(truth: np.ndarray, model: ObservationModel, rng: RngStream) -> np.ndarray:
    """Observations y_k = A(x_k) + gamma z for steps 1 .. len-1 of each trajectory.

    ``truth`` has shape (n_traj, length, D); the result (n_traj, length - 1, M)
    with one child stream per trajectory.
    """
    n_traj = truth.shape[0]
    streams = split_rng(rng, n_traj)
    clean = model.apply(truth[:, 1:, :])
    noise = np.stack([s.normal(clean.shape[1:]) for s in streams])
    return clean + model.gamma * noise


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def write_trajectories_csv(path, states: np.ndarray) -> None:
    """states: (n_traj, length, D) -> CSV ``traj_id,step,x0,...,x{D-1}``."""
    states = np.asarray(states, dtype=np.float64)
    n, length, d = states.shape
    header = "traj_id,step," + ",".join(f"x{i}" for i in range(d))
    with open(path, "w", newline="\n") as f:
        f.write(header + "\n")
        for t in range(n):
            for k in range(length):
                row = ",".join(_fmt(v) for v in states[t, k])
                f.write(f"{t},{k},{row}\n")


def read_trajectories_csv(path) -> np.ndarray:
    return _read_indexed_csv(path, "x")


def write_observations_csv(path, obs: np.ndarray, first_index: int = 1) -> None:
    """obs: (n_traj, n_obs, M) -> CSV ``traj_id,step,y0,...``; step starts at first_index."""
    obs = np.asarray(obs, dtype=np.float64)
    n, n_obs, m = obs.shape
    header = "traj_id,step," + ",".join(f"y{i}" for i in range(m))
    with open(path, "w", newline="\n") as f:
        f.write(header + "\n")
        for t in range(n):
            for k in range(n_obs):
                row = ",".join(_fmt(v) for v in obs[t, k])
                f.write(f"{t},{k + first_index},{row}\n")


def read_observations_csv(path) -> tuple[np.ndarray, int]:
    data, first = _read_indexed_csv(path, "y", return_first_step=True)
    return data, first


def _read_indexed_csv(path, prefix: str, return_first_step: bool = False):
    with open(path) as f:
        header = f.readline().strip().split(",")
        if header[:2] != ["traj_id", "step"] or not all(
            c.startswith(prefix) for c in header[2:]
        ):
            raise FormatError(f"unexpected CSV header in {path}: {header}")
        raw = np.loadtxt(f, delimiter=",", ndmin=2)
    if raw.size == 0:
        raise FormatError(f"empty CSV {path}")
    ids = raw[:, 0].astype(int)
    steps = raw[:, 1].astype(int)
    n_traj = ids.max() + 1
    per = raw.shape[0] // n_traj
    if per * n_traj != raw.shape[0]:
        raise FormatError(f"ragged trajectory CSV {path}")
    order = np.lexsort((steps, ids))
    values = raw[order, 2:].reshape(n_traj, per, raw.shape[1] - 2)
    if return_first_step:
        return values, int(steps.min())
    return values
