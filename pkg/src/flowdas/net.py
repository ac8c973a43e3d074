"""The drift model: an MLP over (X_s, embed(s), embed(conditioning window)).

A fully connected SiLU network maps the current interpolant state X_s,
a sinusoidal embedding of the interpolation time s, and sinusoidal
embeddings of the L conditioning states to a velocity of dimension D.
Reverse-mode derivatives with respect to the parameters (training) and the
X_s input (guidance) are written out explicitly so both are exact and
bit-deterministic.

Embeddings: a scalar v maps to pairs (sin(2^i pi v / scale), cos(...)) for
i = 0 .. embed_dim/2 - 1. The time s uses scale 1; conditioning-state
coordinates use scale COND_EMBED_SCALE so that states across the full
attractor range stay distinguishable (see README). Features of the L
conditioning states are concatenated per coordinate, so the network input
width is D + embed_dim * (1 + L * D).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import (
    FormatError,
    NumericalError,
    RngStream,
    ShapeMismatchError,
    check_finite,
)

COND_EMBED_SCALE = 64.0

# the u8 checkpoint id encodes (activation, output baseline)
_VARIANT_IDS = {("silu", "none"): 0, ("silu", "identity"): 1}
_VARIANT_NAMES = {v: k for k, v in _VARIANT_IDS.items()}

# ParamGrads: list of (dW, db) arrays, shape-congruent with MlpDrift.weights.
ParamGrads = list


@dataclass
class MlpDrift:
    """Drift network weights plus the structural metadata that fixes shapes.

    ``baseline`` selects a fixed skip connection added to the network
    output: "identity" adds (alpha'_s + beta'_s) x0 = (2s - 1) x0 (the last
    conditioning state), i.e. the exact drift of an identity transition
    x1 = x0 under the default schedule. The network then regresses only the
    deviation, whose scale is the one-step state change rather than the
    state itself. The baseline depends on the conditioning window only, so
    input gradients are untouched; it has no parameters, so parameter
    gradients are untouched.
    """

    state_dim: int
    cond_len: int
    embed_dim: int
    weights: list  # [(W, b)] with W of shape (fan_in, fan_out)
    activation: str = "silu"
    baseline: str = "identity"

    @property
    def input_dim(self) -> int:
        return self.state_dim + self.embed_dim * (1 + self.cond_len * self.state_dim)

    @property
    def layer_widths(self) -> list:
        return [self.weights[0][0].shape[0]] + [w.shape[1] for w, _ in self.weights]

    def validate(self):
        if (self.activation, self.baseline) not in _VARIANT_IDS:
            raise FormatError(
                f"unknown model variant ({self.activation!r}, {self.baseline!r})")
        widths = self.layer_widths
        if widths[0] != self.input_dim:
            raise ShapeMismatchError(
                f"first layer expects width {widths[0]}, structure implies {self.input_dim}"
            )
        if widths[-1] != self.state_dim:
            raise ShapeMismatchError(
                f"output width {widths[-1]} != state dim {self.state_dim}"
            )
        for i, (w, b) in enumerate(self.weights):
            if w.shape != (widths[i], widths[i + 1]) or b.shape != (widths[i + 1],):
                raise ShapeMismatchError(f"layer {i} shapes do not chain: {w.shape}, {b.shape}")
            check_finite(f"layer {i} weights", w)
            check_finite(f"layer {i} bias", b)
        return self


def init_model(
    state_dim: int,
    cond_len: int,
    hidden_layers: int,
    hidden_width: int,
    embed_dim: int,
    rng: RngStream,
    baseline: str = "identity",
) -> MlpDrift:
    """Uniform fan-in init for hidden layers; zero-initialized output layer.

    With a zero final layer the initial drift equals the output baseline
    (zero for baseline "none"), so the first training loss measures the
    velocity residual against that baseline.
    """
    model = MlpDrift(state_dim, cond_len, embed_dim, weights=[], baseline=baseline)
    widths = [model.input_dim] + [hidden_width] * hidden_layers + [state_dim]
    weights = []
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        if i == len(widths) - 2:
            w = np.zeros((fan_in, fan_out))
            b = np.zeros(fan_out)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform((fan_in, fan_out)) * 2 * bound - bound
            b = rng.uniform((fan_out,)) * 2 * bound - bound
        weights.append((w, b))
    model.weights = weights
    return model.validate()


def _sigmoid(z):
    # stable for any z: exp(-|z|) cannot overflow
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _sin_cos_features(values: np.ndarray, n_pairs: int, scale: float) -> np.ndarray:
    """(..., V) scalar values -> (..., V * 2 * n_pairs) interleaved sin/cos."""
    freqs = np.pi * (2.0 ** np.arange(n_pairs)) / scale
    angles = values[..., None] * freqs  # (..., V, n_pairs)
    feats = np.empty(angles.shape[:-1] + (2 * n_pairs,))
    feats[..., 0::2] = np.sin(angles)
    feats[..., 1::2] = np.cos(angles)
    return feats.reshape(values.shape[:-1] + (values.shape[-1] * 2 * n_pairs,))


def _as_batch(model: MlpDrift, s, x_s, cond):
    """Normalize (s, x_s, cond) to batched arrays (B,), (B, D), (B, L, D)."""
    d, ell = model.state_dim, model.cond_len
    x = np.asarray(x_s, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != d:
        raise ShapeMismatchError(f"x_s must have trailing dim {d}, got {x.shape}")
    c = np.asarray(cond, dtype=np.float64)
    if single and c.ndim == 2:
        c = c[None, :, :]
    if c.shape != (x.shape[0], ell, d):
        raise ShapeMismatchError(
            f"cond must have shape (B, {ell}, {d}), got {c.shape}"
        )
    sv = np.asarray(s, dtype=np.float64)
    if sv.ndim == 0:
        sv = np.full(x.shape[0], float(sv))
    if sv.shape != (x.shape[0],):
        raise ShapeMismatchError(f"s must be scalar or shape ({x.shape[0]},), got {sv.shape}")
    return sv, x, c, single


def _features(model: MlpDrift, s: np.ndarray, x_s: np.ndarray, cond: np.ndarray) -> np.ndarray:
    n_pairs = model.embed_dim // 2
    s_feats = _sin_cos_features(s[:, None], n_pairs, 1.0)
    cond_flat = cond.reshape(cond.shape[0], -1)
    cond_feats = _sin_cos_features(cond_flat, n_pairs, COND_EMBED_SCALE)
    return np.concatenate([x_s, s_feats, cond_feats], axis=1)


def _forward_cached(model: MlpDrift, feats: np.ndarray):
    """Returns (output, caches); caches[i] = (layer input, pre-activation)."""
    h = feats
    caches = []
    for w, b in model.weights[:-1]:
        z = h @ w + b
        caches.append((h, z))
        h = z * _sigmoid(z)
    w, b = model.weights[-1]
    caches.append((h, None))
    return h @ w + b, caches


def _baseline_term(model: MlpDrift, s: np.ndarray, cond: np.ndarray) -> float:
    if model.baseline == "identity":
        return (2.0 * s - 1.0)[:, None] * cond[:, -1, :]
    return 0.0


def forward_batch(model: MlpDrift, s, x_s, cond) -> np.ndarray:
    sv, x, c, single = _as_batch(model, s, x_s, cond)
    out, _ = _forward_cached(model, _features(model, sv, x, c))
    out = out + _baseline_term(model, sv, c)
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite drift network output")
    return out[0] if single else out


def forward(model: MlpDrift, s: float, x_s, cond) -> np.ndarray:
    """Drift b_s(x_s | conditioning window); returns a vector of length D."""
    return forward_batch(model, s, x_s, cond)


def vjp_batch(model: MlpDrift, s, x_s, cond, cotangent,
              want_params: bool = True, want_input: bool = True):
    """Reverse-mode pullback of <cotangent, forward>.

    With a batched cotangent (B, D), parameter gradients are summed over the
    batch and the input gradient is returned per row. Either output can be
    switched off to skip work.
    """
    sv, x, c, single = _as_batch(model, s, x_s, cond)
    cot = np.asarray(cotangent, dtype=np.float64)
    if single and cot.ndim == 1:
        cot = cot[None, :]
    if cot.shape != (x.shape[0], model.state_dim):
        raise ShapeMismatchError(
            f"cotangent must have shape ({x.shape[0]}, {model.state_dim}), got {cot.shape}"
        )
    feats = _features(model, sv, x, c)
    _, caches = _forward_cached(model, feats)

    grads = [None] * len(model.weights) if want_params else None
    delta = cot
    for i in range(len(model.weights) - 1, -1, -1):
        w, _ = model.weights[i]
        h_in, z = caches[i]
        if want_params:
            grads[i] = (h_in.T @ delta, delta.sum(axis=0))
        if i == 0 and not want_input:
            break
        delta = delta @ w.T
        if i > 0:
            sig = _sigmoid(caches[i - 1][1])
            delta = delta * (sig * (1.0 + caches[i - 1][1] * (1.0 - sig)))
    input_grad = None
    if want_input:
        input_grad = delta[:, : model.state_dim]
        if single:
            input_grad = input_grad[0]
    return grads, input_grad


def vjp_params(model: MlpDrift, s, x_s, cond, cotangent) -> ParamGrads:
    """d<cotangent, forward>/d(theta), exact reverse mode."""
    grads, _ = vjp_batch(model, s, x_s, cond, cotangent, want_params=True, want_input=False)
    return grads


def vjp_input(model: MlpDrift, s, x_s, cond, cotangent) -> np.ndarray:
    """d<cotangent, forward>/d(x_s), exact reverse mode."""
    _, g = vjp_batch(model, s, x_s, cond, cotangent, want_params=False, want_input=True)
    return g


def zero_grads(model: MlpDrift) -> ParamGrads:
    return [(np.zeros_like(w), np.zeros_like(b)) for w, b in model.weights]


MAGIC = b"FDAS"
VERSION = 1


def save_checkpoint(model: MlpDrift, path) -> None:
    """Binary checkpoint: magic 'FDAS', u32 version, u32 D, u32 L,
    u32 n_layers, u32 widths[n_layers + 1], u32 embed_dim, u8 activation id,
    then all weights (W row-major, then b) as little-endian f64 per layer.
    """
    model.validate()
    widths = model.layer_widths
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIII", VERSION, model.state_dim, model.cond_len,
                            len(model.weights)))
        f.write(struct.pack(f"<{len(widths)}I", *widths))
        f.write(struct.pack("<IB", model.embed_dim,
                            _VARIANT_IDS[(model.activation, model.baseline)]))
        for w, b in model.weights:
            f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path) -> MlpDrift:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic in {path}")
    off = 4
    try:
        version, d, ell, n_layers = struct.unpack_from("<IIII", blob, off)
        off += 16
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        widths = struct.unpack_from(f"<{n_layers + 1}I", blob, off)
        off += 4 * (n_layers + 1)
        embed_dim, act_id = struct.unpack_from("<IB", blob, off)
        off += 5
    except struct.error as e:
        raise FormatError(f"truncated checkpoint header in {path}") from e
    if act_id not in _ACTIVATION_NAMES:
        raise FormatError(f"unknown activation id {act_id}")
    weights = []
    for i in range(n_layers):
        n_w, n_b = widths[i] * widths[i + 1], widths[i + 1]
        need = 8 * (n_w + n_b)
        if off + need > len(blob):
            raise FormatError(f"truncated checkpoint payload in {path}")
        w = np.frombuffer(blob, dtype="<f8", count=n_w, offset=off).reshape(
            widths[i], widths[i + 1]).copy()
        off += 8 * n_w
        b = np.frombuffer(blob, dtype="<f8", count=n_b, offset=off).copy()
        off += 8 * n_b
        weights.append((w, b))
    if off != len(blob):
        raise FormatError(f"trailing bytes in checkpoint {path}")
    model = MlpDrift(d, ell, embed_dim, weights, _ACTIVATION_NAMES[act_id])
    return model.validate()


def require_compatible(model: MlpDrift, state_dim: int, cond_len: int) -> MlpDrift:
    """Raise ShapeMismatchError if a checkpoint does not fit the configured system."""
    if model.state_dim != state_dim or model.cond_len != cond_len:
        raise ShapeMismatchError(
            f"checkpoint built for D={model.state_dim}, L={model.cond_len}; "
            f"configuration expects D={state_dim}, L={cond_len}"
        )
    return model
