"""Shared value types, the RNG contract, and the configuration surface.

Everything downstream (interpolant, net, dynamics, train, assimilate, bpf,
metrics, cli) builds on the primitives here:

* a splittable counter-based RNG (`RngStream`, `split_rng`) so that
  per-trajectory / per-member / per-sample streams are independent and
  order-insensitive,
* immutable value types (`Trajectory`, `ObservationSeries`) with validated
  invariants,
* `ExperimentConfig` loaded from a flat TOML-subset file with documented
  defaults for every key.

All floating-point math is 64-bit. Any operation that would propagate a
non-finite value raises `NumericalError` instead.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

try:
    import tomllib as _toml
except ModuleNotFoundError:  # Python < 3.11
    import tomli as _toml


class FlowDasError(Exception):
    """Base class for all package errors."""


class ConfigError(FlowDasError):
    """Invalid configuration file or option (CLI exit code 2)."""


class ShapeMismatchError(FlowDasError):
    """Incompatible dimensions between data, model, or operators (exit 3)."""


class FormatError(FlowDasError):
    """Malformed file: bad magic, version, or truncation (exit 3)."""


class NumericalError(FlowDasError):
    """A non-finite value reached a public boundary (exit 4)."""


class SingularCoefficientError(NumericalError):
    """Schedule coefficient combination too close to its singular set."""


_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(x: int) -> int:
    # splitmix64 output function: bijective on u64 with good avalanche.
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


class RngStream:
    """A named, replayable random stream.

    The stream is identified by ``(seed, stream_id)``: constructing two
    streams with the same pair yields byte-identical draw sequences, and
    distinct ``stream_id`` values are statistically independent (Philox is
    counter-based and keyed on the pair). The object itself is stateful --
    draws advance an internal generator -- and is owned by exactly one
    worker at a time.
    """

    __slots__ = ("seed", "stream_id", "_gen")

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._gen: np.random.Generator | None = None

    @property
    def gen(self) -> np.random.Generator:
        if self._gen is None:
            key = (self.stream_id << 64) | self.seed
            self._gen = np.random.Generator(np.random.Philox(key=key))
        return self._gen

    def normal(self, size=None) -> np.ndarray:
        return self.gen.standard_normal(size)

    def uniform(self, size=None) -> np.ndarray:
        return self.gen.random(size)

    def integers(self, high: int, size=None) -> np.ndarray:
        return self.gen.integers(0, high, size=size)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def split_rng(parent: RngStream, count: int) -> list[RngStream]:
    """Derive ``count`` independent child streams from ``parent``.

    Pure function of ``(parent.seed, parent.stream_id)``; the parent's draw
    position is irrelevant, so splitting is order-insensitive and safe to
    repeat. Child ``i`` is the same for every ``count >= i + 1``.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    return [
        RngStream(parent.seed, _mix64(parent.stream_id + (i + 1) * _GOLDEN))
        for i in range(count)
    ]


def child_rng(parent: RngStream, index: int) -> RngStream:
    """Child ``index`` of ``parent`` (equals ``split_rng(parent, n)[index]``)."""
    return RngStream(parent.seed, _mix64(parent.stream_id + (index + 1) * _GOLDEN))


def check_finite(name: str, arr) -> np.ndarray:
    """Return ``arr`` as float64, raising NumericalError on NaN/Inf."""
    out = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite values in {name}")
    return out


def as_state(x, dim: int | None = None) -> np.ndarray:
    """Validate a state vector: 1-D, float64, finite, optionally of length ``dim``."""
    v = check_finite("state", x)
    if v.ndim != 1:
        raise ShapeMismatchError(f"state must be 1-D, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ShapeMismatchError(f"state has length {v.shape[0]}, expected {dim}")
    return v


@dataclass(frozen=True)
class Trajectory:
    """A time-indexed state sequence: ``states[k]`` is the state at step k.

    ``states`` has shape (K+1, D) with K >= 1 transitions; ``dt`` is the
    model time between consecutive indices.
    """

    states: np.ndarray
    dt: float

    def __post_init__(self):
        s = check_finite("trajectory states", self.states)
        if s.ndim != 2 or s.shape[0] < 2:
            raise ShapeMismatchError(
                f"trajectory needs shape (K+1, D) with K >= 1, got {s.shape}"
            )
        if not self.dt > 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        object.__setattr__(self, "states", s)

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def num_steps(self) -> int:
        return self.states.shape[0] - 1


@dataclass(frozen=True)
class ObservationSeries:
    """Observations y_k for steps ``first_index .. first_index + len - 1``.

    ``values`` has shape (n_obs, M); ``operator_id`` names the measurement
    map (see dynamics.observation_model); ``gamma`` is the observation noise
    standard deviation.
    """

    values: np.ndarray
    operator_id: str
    gamma: float
    first_index: int = 1

    def __post_init__(self):
        v = check_finite("observations", self.values)
        if v.ndim != 2:
            raise ShapeMismatchError(f"observations need shape (n, M), got {v.shape}")
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if self.first_index < 1:
            raise ConfigError(f"first_index must be >= 1, got {self.first_index}")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]


_SYSTEMS = ("lorenz63", "doublewell", "lingauss")
_OPERATORS = ("arctan_first", "cube", "identity", "mask")
_SCHEDULES = ("default",)
_ORDERS = ("first", "second")
_ESTIMATORS = ("unbiased", "biased_jensen")
_LR_SCHEDULES = ("linear", "constant")


@dataclass(frozen=True)
class ExperimentConfig:
    """Full pipeline configuration. Every field is a documented default.

    Loaded from a flat ``key = value`` TOML-subset file with sections
    ``[system]``, ``[train]``, ``[infer]`` plus a top-level ``seed``; see
    KEYMAP for the file-key <-> field correspondence.
    """

    seed: int = 0

    # [system] -- ground-truth dynamics, observation model, interpolant schedule
    system: str = "lorenz63"        # lorenz63 | doublewell | lingauss
    sigma: float = 0.25             # lorenz per-coordinate transition noise std
    beta_d: float = 0.2             # doublewell diffusion coefficient (training regime)
    test_beta_d: float = 0.9        # doublewell diffusion at test time (induces well switches)
    h: float = 0.05                 # lorenz RK4 step per recorded transition
    dt: float = 0.1                 # doublewell Euler-Maruyama step
    lin_coeff: float = 0.9          # lingauss transition coefficient
    lin_noise: float = 0.1          # lingauss transition noise std
    burn_in: int = 1000             # lorenz steps discarded before recording
    n_traj: int = 1024              # trajectories simulated
    traj_len: int = 1024            # states per trajectory
    observation: str = "arctan_first"  # arctan_first | cube | identity | mask
    gamma: float = 0.25             # observation noise std
    mask: tuple = (0,)              # observed coordinates for the mask operator
    schedule_kind: str = "default"  # interpolant schedule family
    eta: float = 1.0                # interpolant noise scale multiplying sigma_s

    # [train]
    epochs: int = 2000              # optimizer steps (one freshly sampled batch each)
    batch_pairs: int = 256          # K': pairs per batch
    noise_draws: int = 4            # S: (s, z) draws per pair
    lr: float = 0.005               # Adam base learning rate
    lr_schedule: str = "linear"     # linear | constant
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 0.0          # global gradient-norm clip; 0 disables
    hidden_layers: int = 5
    hidden_width: int = 256
    embed_dim: int = 4              # sinusoidal features per embedded quantity (even)
    checkpoint_every: int = 500     # epochs between checkpoints / val evaluations
    val_pairs: int = 2048           # pairs in the fixed validation batch

    # [infer]
    K: int = 15                     # horizon: number of estimated steps
    L: int = 1                      # conditioning length (window of previous states)
    ensemble_size: int = 1          # independent repetitions per assimilation case
    n_cases: int = 64               # eval trajectories assimilated for the metrics table
    J: int = 21                     # Monte-Carlo posterior samples per grid node
    zeta: float = 2e-4              # guidance step size
    N: int = 128                    # interpolation grid steps per transition
    posterior_order: str = "second"     # first | second
    estimator: str = "unbiased"         # unbiased | biased_jensen
    guidance_start: int = 1         # first grid node with guidance (n0)
    guidance_clip: float = 0.0      # max per-node guidance displacement; 0 disables
    bpf_particles: int = 16384      # N_p for the bootstrap particle filter
    ablate_J: tuple = (3, 6, 12, 21, 30, 50)
    ablate_seeds: int = 20          # paired seeds per ablation cell
    ablate_cases: int = 8           # eval cases per ablation run

    def __post_init__(self):
        checks = [
            (self.system in _SYSTEMS, f"system must be one of {_SYSTEMS}"),
            (self.observation in _OPERATORS, f"observation must be one of {_OPERATORS}"),
            (self.schedule_kind in _SCHEDULES, f"schedule_kind must be one of {_SCHEDULES}"),
            (self.posterior_order in _ORDERS, f"posterior_order must be one of {_ORDERS}"),
            (self.estimator in _ESTIMATORS, f"estimator must be one of {_ESTIMATORS}"),
            (self.lr_schedule in _LR_SCHEDULES, f"lr_schedule must be one of {_LR_SCHEDULES}"),
            (self.J >= 1, "J must be >= 1"),
            (self.N >= 2, "N must be >= 2"),
            (self.zeta >= 0, "zeta must be >= 0"),
            (self.ensemble_size >= 1, "ensemble_size must be >= 1"),
            (self.L >= 1, "L must be >= 1"),
            (self.K >= 1, "K must be >= 1"),
            (self.gamma > 0, "gamma must be > 0"),
            (self.eta > 0, "eta must be > 0"),
            (self.lr > 0, "lr must be > 0"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.batch_pairs >= 1, "batch_pairs must be >= 1"),
            (self.noise_draws >= 1, "noise_draws must be >= 1"),
            (self.embed_dim >= 2 and self.embed_dim % 2 == 0, "embed_dim must be even and >= 2"),
            (1 <= self.guidance_start < self.N, "guidance_start must satisfy 1 <= n0 < N"),
            (self.guidance_clip >= 0, "guidance_clip must be >= 0"),
            (self.n_traj >= 1, "n_traj must be >= 1"),
            (self.traj_len >= 2, "traj_len must be >= 2"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        object.__setattr__(self, "mask", tuple(int(i) for i in self.mask))
        object.__setattr__(self, "ablate_J", tuple(int(j) for j in self.ablate_J))

    @property
    def state_dim(self) -> int:
        return {"lorenz63": 3, "doublewell": 1, "lingauss": 1}[self.system]

    @property
    def step_dt(self) -> float:
        """Model time per recorded transition."""
        return {"lorenz63": self.h, "doublewell": self.dt, "lingauss": 1.0}[self.system]


# file key -> (section, field name); sections: "" (top level), system, train, infer
KEYMAP = {
    ("", "seed"): "seed",
    ("system", "name"): "system",
    ("system", "sigma"): "sigma",
    ("system", "beta_d"): "beta_d",
    ("system", "test_beta_d"): "test_beta_d",
    ("system", "h"): "h",
    ("system", "dt"): "dt",
    ("system", "lin_coeff"): "lin_coeff",
    ("system", "lin_noise"): "lin_noise",
    ("system", "burn_in"): "burn_in",
    ("system", "n_traj"): "n_traj",
    ("system", "traj_len"): "traj_len",
    ("system", "observation"): "observation",
    ("system", "gamma"): "gamma",
    ("system", "mask"): "mask",
    ("system", "schedule"): "schedule_kind",
    ("system", "eta"): "eta",
    ("train", "epochs"): "epochs",
    ("train", "batch_pairs"): "batch_pairs",
    ("train", "noise_draws"): "noise_draws",
    ("train", "lr"): "lr",
    ("train", "lr_schedule"): "lr_schedule",
    ("train", "adam_beta1"): "adam_beta1",
    ("train", "adam_beta2"): "adam_beta2",
    ("train", "adam_eps"): "adam_eps",
    ("train", "clip_norm"): "clip_norm",
    ("train", "hidden_layers"): "hidden_layers",
    ("train", "hidden_width"): "hidden_width",
    ("train", "embed_dim"): "embed_dim",
    ("train", "checkpoint_every"): "checkpoint_every",
    ("train", "val_pairs"): "val_pairs",
    ("infer", "K"): "K",
    ("infer", "L"): "L",
    ("infer", "ensemble_size"): "ensemble_size",
    ("infer", "n_cases"): "n_cases",
    ("infer", "J"): "J",
    ("infer", "zeta"): "zeta",
    ("infer", "N"): "N",
    ("infer", "posterior_order"): "posterior_order",
    ("infer", "estimator"): "estimator",
    ("infer", "guidance_start"): "guidance_start",
    ("infer", "guidance_clip"): "guidance_clip",
    ("infer", "bpf_particles"): "bpf_particles",
    ("infer", "ablate_J"): "ablate_J",
    ("infer", "ablate_seeds"): "ablate_seeds",
    ("infer", "ablate_cases"): "ablate_cases",
}

_INT_FIELDS = {
    "seed", "burn_in", "n_traj", "traj_len", "epochs", "batch_pairs",
    "noise_draws", "hidden_layers", "hidden_width", "embed_dim",
    "checkpoint_every", "val_pairs", "K", "L", "ensemble_size", "n_cases",
    "J", "N", "guidance_start", "bpf_particles", "ablate_seeds", "ablate_cases",
}


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from parsed TOML data; unknown keys error."""
    values = {}
    for section, content in raw.items():
        if isinstance(content, dict):
            items = [((section, k), v) for k, v in content.items()]
        else:
            items = [(("", section), content)]
        for key, v in items:
            if key not in KEYMAP:
                sec, name = key
                where = f"[{sec}] {name}" if sec else name
                raise ConfigError(f"unknown configuration key: {where}")
            fname = KEYMAP[key]
            if fname in _INT_FIELDS:
                if isinstance(v, bool) or not isinstance(v, int):
                    raise ConfigError(f"{fname} must be an integer, got {v!r}")
                values[fname] = v
            elif fname in ("mask", "ablate_J"):
                values[fname] = tuple(v)
            elif fname in ("system", "observation", "schedule_kind", "lr_schedule",
                           "posterior_order", "estimator"):
                values[fname] = str(v)
            else:
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ConfigError(f"{fname} must be a number, got {v!r}")
                values[fname] = float(v)
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    """Load a configuration file (TOML-compatible key = value subset)."""
    try:
        with open(path, "rb") as f:
            raw = _toml.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except _toml.TOMLDecodeError as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    return config_from_dict(raw)


def load_config_text(text: str) -> ExperimentConfig:
    """Parse configuration from TOML text (used for manifest round-trips)."""
    try:
        raw = _toml.loads(text)
    except _toml.TOMLDecodeError as e:
        raise ConfigError(f"cannot parse config text: {e}") from e
    return config_from_dict(raw)


def config_to_toml(cfg: ExperimentConfig) -> str:
    """Serialize a config in the same TOML subset (used for run manifests)."""
    by_section: dict[str, list[str]] = {"": [], "system": [], "train": [], "infer": []}
    field_to_key = {v: k for k, v in KEYMAP.items()}
    for f in dataclasses.fields(cfg):
        section, key = field_to_key[f.name]
        v = getattr(cfg, f.name)
        if isinstance(v, str):
            text = f'"{v}"'
        elif isinstance(v, tuple):
            text = "[" + ", ".join(str(x) for x in v) + "]"
        elif isinstance(v, float):
            text = repr(v)
        else:
            text = str(v)
        by_section[section].append(f"{key} = {text}")
    lines = list(by_section[""])
    for section in ("system", "train", "infer"):
        lines.append("")
        lines.append(f"[{section}]")
        lines.extend(by_section[section])
    return "\n".join(lines) + "\n"
