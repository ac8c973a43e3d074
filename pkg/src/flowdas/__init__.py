"""flowdas: stochastic-interpolant data assimilation.

Learns one-step transition dynamics of a stochastic dynamical system with a
stochastic-interpolant generative model and, at inference time,
autoregressively samples future states guided by noisy nonlinear
observations. Ships a bootstrap-particle-filter baseline and the usual
trajectory metrics (RMSE, W1, expected log-prior, observation
log-likelihood).
"""

import os as _os

# Single-threaded BLAS: the gemms here are small (threads only add sync
# overhead) and per-machine thread pools would perturb bit reproducibility.
# Takes effect when flowdas is imported before numpy; override explicitly
# in the environment if you want BLAS threading.
_os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

from .core import (
    ConfigError,
    ExperimentConfig,
    FlowDasError,
    FormatError,
    NumericalError,
    ObservationSeries,
    RngStream,
    ShapeMismatchError,
    SingularCoefficientError,
    Trajectory,
    load_config,
    split_rng,
)
from .interpolant import InterpolantSchedule

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "FlowDasError",
    "FormatError",
    "InterpolantSchedule",
    "NumericalError",
    "ObservationSeries",
    "RngStream",
    "ShapeMismatchError",
    "SingularCoefficientError",
    "Trajectory",
    "load_config",
    "split_rng",
    "__version__",
]
