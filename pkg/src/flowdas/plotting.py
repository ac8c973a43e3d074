"""SVG rendering of assimilation runs.

One self-contained SVG per state coordinate: truth, ensemble mean, the
10-90% ensemble band, and observations where the operator admits a
coordinate pullback (identity/mask directly; arctan and cube through their
inverses). Output bytes are deterministic for fixed inputs: fixed hash salt,
no date metadata, fonts rendered as paths.
"""

from __future__ import annotations

import io
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .core import ConfigError, ShapeMismatchError

_RC = {
    "svg.hashsalt": "flowdas",
    "svg.fonttype": "path",
    "figure.figsize": (7.0, 3.0),
    "figure.dpi": 100,
}


def observation_pullback(operator_id: str, ys: np.ndarray, dim: int):
    """Map observations back to state coordinates where that is defined.

    Returns {coordinate: values}; arctan_first uses tan(y) (|y| < pi/2 by
    construction), cube uses cbrt(y), identity/mask map straight through.
    """
    out = {}
    if operator_id == "arctan_first":
        out[0] = np.tan(ys[:, 0])
    elif operator_id == "cube":
        out[0] = np.cbrt(ys[:, 0])
    elif operator_id == "identity":
        for d in range(dim):
            out[d] = ys[:, d]
    elif operator_id == "mask":
        raise ValueError("mask pullback needs explicit indices; use pullback_mask")
    return out


def render_case_svgs(out_dir, truth, estimates, observations, operator_id: str,
                     first_estimated_step: int, mask=()):
    """Write state_x{d}.svg files for one case.

    truth (T, D) or None; estimates (E, K, D) or None (truth-only mode);
    observations (K, M) or None. ``first_estimated_step`` is the absolute
    step index of estimates[:, 0].
    """
    if truth is None and estimates is None:
        raise ConfigError("nothing to plot: neither truth nor estimates given")
    if estimates is not None and estimates.shape[0] == 0:
        raise ShapeMismatchError("empty ensemble")
    dim = truth.shape[1] if truth is not None else estimates.shape[2]
    obs_points = {}
    if observations is not None:
        if operator_id == "mask":
            obs_points = {d: observations[:, i] for i, d in enumerate(mask)}
        else:
            obs_points = observation_pullback(operator_id, observations, dim)
    written = []
    with plt.rc_context(_RC):
        for d in range(dim):
            fig, ax = plt.subplots()
            if truth is not None:
                ax.plot(np.arange(truth.shape[0]), truth[:, d],
                        color="black", lw=1.5, label="truth")
            if estimates is not None:
                steps = first_estimated_step + np.arange(estimates.shape[1])
                mean = estimates[:, :, d].mean(axis=0)
                lo = np.percentile(estimates[:, :, d], 10, axis=0)
                hi = np.percentile(estimates[:, :, d], 90, axis=0)
                ax.fill_between(steps, lo, hi, color="tab:blue", alpha=0.25,
                                lw=0, label="10-90%")
                ax.plot(steps, mean, color="tab:blue", lw=1.5, label="estimate mean")
            if d in obs_points:
                steps = first_estimated_step + np.arange(len(obs_points[d]))
                ax.plot(steps, obs_points[d], "x", color="tab:red", ms=5,
                        label="observation")
            ax.set_xlabel("step")
            ax.set_ylabel(f"x{d}")
            ax.legend(loc="best", fontsize=8)
            fig.tight_layout()
            buf = io.BytesIO()
            fig.savefig(buf, format="svg", metadata={"Date": None})
            plt.close(fig)
            path = os.path.join(out_dir, f"state_x{d}.svg")
            with open(path, "wb") as f:
                f.write(buf.getvalue())
            written.append(path)
    return written
