"""Pair construction, the empirical interpolant loss, Adam, and the training loop.

Training regresses the drift network onto the interpolant velocity: for a
batch of K' (window, successor) pairs and S fresh (s, z) draws per pair,

    loss = (1 / (K' S)) sum_{pairs, draws} || b(I_s, window) - R_s ||^2,

with s ~ U(0, 1) i.i.d. per (pair, draw) and z ~ N(0, I_D). One "epoch" is
one optimizer step on a freshly sampled batch. Gradients are exact reverse
mode; the optimizer is Adam with bias correction and an optional linear
learning-rate decay.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import net
from .core import ExperimentConfig, NumericalError, RngStream, ShapeMismatchError
from .interpolant import InterpolantSchedule, interpolate


class PairIndex:
    """Uniform sampling over all valid (window, successor) pairs.

    A pair is a window of L consecutive states and its immediate successor
    within one trajectory; pairs never cross trajectory seams. The total
    count is sum_t (len_t - L).
    """

    def __init__(self, trajectories, cond_len: int):
        self.cond_len = int(cond_len)
        if self.cond_len < 1:
            raise ValueError("cond_len must be >= 1")
        trajs = [np.asarray(t, dtype=np.float64) for t in trajectories]
        if not trajs:
            raise ShapeMismatchError("no trajectories given")
        dim = trajs[0].shape[-1]
        starts = []
        offset = 0
        for t in trajs:
            if t.ndim != 2 or t.shape[1] != dim:
                raise ShapeMismatchError("trajectories must share one state dimension")
            if t.shape[0] < self.cond_len + 1:
                raise ShapeMismatchError(
                    f"trajectory of {t.shape[0]} states too short for L={self.cond_len}"
                )
            # window start offsets: windows [f, f+L) with successor f+L
            starts.append(offset + np.arange(t.shape[0] - self.cond_len))
            offset += t.shape[0]
        self.flat = np.concatenate(trajs, axis=0)
        self.starts = np.concatenate(starts)
        self.dim = dim

    @property
    def count(self) -> int:
        return self.starts.shape[0]

    def gather(self, idx) -> tuple[np.ndarray, np.ndarray]:
        """Pairs for index array ``idx``: (windows (n, L, D), successors (n, D))."""
        f = self.starts[np.asarray(idx, dtype=np.int64)]
        span = self.flat[f[:, None] + np.arange(self.cond_len + 1)]
        return span[:, : self.cond_len], span[:, self.cond_len]

    def sample(self, rng: RngStream, n: int) -> tuple[np.ndarray, np.ndarray]:
        return self.gather(rng.integers(self.count, n))


def build_pairs(trajectories, cond_len: int) -> PairIndex:
    return PairIndex(trajectories, cond_len)


def interpolant_loss(model, schedule: InterpolantSchedule,
                     windows: np.ndarray, successors: np.ndarray,
                     s: np.ndarray, z: np.ndarray,
                     want_grads: bool = True):
    """Loss and exact parameter gradients for explicit draws.

    ``windows`` (B, L, D), ``successors`` (B, D), ``s`` (B, S), ``z`` (B, S, D).
    Pure in its inputs; `loss_and_grads` is the sampling wrapper.
    """
    b_sz, n_draws = s.shape
    x0 = windows[:, -1]
    value, velocity = interpolate(
        schedule, s, x0[:, None, :], successors[:, None, :], z
    )
    flat_n = b_sz * n_draws
    s_flat = s.reshape(flat_n)
    value = value.reshape(flat_n, -1)
    velocity = velocity.reshape(flat_n, -1)
    cond = np.repeat(windows, n_draws, axis=0)
    out = net.forward_batch(model, s_flat, value, cond)
    resid = out - velocity
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    if not np.isfinite(loss):
        raise NumericalError(
            f"non-finite training loss (|resid| max {np.abs(resid).max()})"
        )
    if not want_grads:
        return loss, None
    cot = (2.0 / flat_n) * resid
    grads, _ = net.vjp_batch(model, s_flat, value, cond, cot,
                             want_params=True, want_input=False)
    return loss, grads


def loss_and_grads(model, pairs_windows, pairs_successors,
                   schedule: InterpolantSchedule, rng: RngStream,
                   noise_draws: int = 1):
    """Sample s ~ U(0,1) and z ~ N(0,I) per (pair, draw), then evaluate.

    Draw order (fixed for reproducibility): all s first, then all z.
    """
    windows = np.asarray(pairs_windows, dtype=np.float64)
    succ = np.asarray(pairs_successors, dtype=np.float64)
    if windows.ndim != 3 or succ.ndim != 2 or windows.shape[0] != succ.shape[0]:
        raise ShapeMismatchError("batch must be windows (B, L, D) and successors (B, D)")
    if windows.shape[0] == 0:
        raise ShapeMismatchError("empty batch")
    b_sz = windows.shape[0]
    s = rng.uniform((b_sz, noise_draws))
    z = rng.normal((b_sz, noise_draws, succ.shape[1]))
    return interpolant_loss(model, schedule, windows, succ, s, z)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def for_model(cls, model) -> "AdamState":
        return cls(m=net.zero_grads(model), v=net.zero_grads(model))


def _clip_grads(grads, clip_norm: float):
    if clip_norm <= 0:
        return grads
    total = 0.0
    for gw, gb in grads:
        total += float(np.sum(gw * gw)) + float(np.sum(gb * gb))
    norm = np.sqrt(total)
    if norm <= clip_norm:
        return grads
    scale = clip_norm / norm
    return [(gw * scale, gb * scale) for gw, gb in grads]


def adam_step(model, grads, state: AdamState, step_index: int,
              total_steps: int, cfg: ExperimentConfig):
    """One Adam update in place; lr decays linearly to lr/total_steps.

    ``step_index`` is 0-based; the decay factor is (1 - step/total_steps),
    so the first step uses the base rate and every step's rate stays in
    (0, lr].
    """
    grads = _clip_grads(grads, cfg.clip_norm)
    factor = 1.0 if cfg.lr_schedule == "constant" else 1.0 - step_index / total_steps
    lr = cfg.lr * factor
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    state.t += 1
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for (w, b), (gw, gb), (mw, mb), (vw, vb) in zip(
        model.weights, grads, state.m, state.v
    ):
        mw *= b1
        mw += (1 - b1) * gw
        mb *= b1
        mb += (1 - b1) * gb
        vw *= b2
        vw += (1 - b2) * gw * gw
        vb *= b2
        vb += (1 - b2) * gb * gb
        w -= lr * (mw / corr1) / (np.sqrt(vw / corr2) + eps)
        b -= lr * (mb / corr1) / (np.sqrt(vb / corr2) + eps)
    return model, lr


def train_loop(pairs: PairIndex, model, cfg: ExperimentConfig,
               schedule: InterpolantSchedule, rng: RngStream,
               val_batch=None, checkpoint_dir=None, log=None):
    """Run cfg.epochs optimizer steps; returns (model, history).

    history rows are (epoch, batch loss, lr). If ``val_batch`` is given as
    (windows, successors, s, z), a fixed validation loss is evaluated at
    every checkpoint interval and the best checkpoint is kept alongside the
    final one (checkpoint selection only; no early stopping).
    """
    history = []
    state = AdamState.for_model(model)
    best_val = np.inf
    total = max(cfg.epochs, 1)
    for epoch in range(cfg.epochs):
        windows, succ = pairs.sample(rng, cfg.batch_pairs)
        loss, grads = loss_and_grads(model, windows, succ, schedule, rng,
                                     cfg.noise_draws)
        _, lr = adam_step(model, grads, state, epoch, total, cfg)
        history.append((epoch + 1, loss, lr))
        at_checkpoint = (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs
        if at_checkpoint:
            if log is not None:
                log(f"epoch {epoch + 1}/{cfg.epochs}  loss {loss:.6g}  lr {lr:.3g}")
            if checkpoint_dir is not None:
                net.save_checkpoint(model, f"{checkpoint_dir}/model_final.ckpt")
            if val_batch is not None:
                vw, vs, vss, vz = val_batch
                val_loss, _ = interpolant_loss(model, schedule, vw, vs, vss, vz,
                                               want_grads=False)
                if val_loss < best_val:
                    best_val = val_loss
                    if checkpoint_dir is not None:
                        net.save_checkpoint(model, f"{checkpoint_dir}/model_best.ckpt")
    return model, history


def make_val_batch(pairs: PairIndex, cfg: ExperimentConfig, rng: RngStream):
    """A fixed validation batch (windows, successors, s, z) drawn once."""
    n = min(cfg.val_pairs, pairs.count)
    windows, succ = pairs.sample(rng, n)
    s = rng.uniform((n, 1))
    z = rng.normal((n, 1, pairs.dim))
    return windows, succ, s, z
