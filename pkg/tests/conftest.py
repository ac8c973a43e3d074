import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")  # before numpy loads

import numpy as np
import pytest

from flowdas import net
from flowdas.core import RngStream


def make_linear_stub(dim: int, cond_len: int = 1, matrix=None, bias=None,
                     embed_dim: int = 4) -> net.MlpDrift:
    """A drift model that computes exactly b(x_s) = matrix @ x_s + bias.

    Implemented as a zero-hidden-layer MlpDrift whose single linear layer
    reads only the raw x_s block, so s and the conditioning window are
    ignored and every derivative is exact.
    """
    model = net.init_model(dim, cond_len, hidden_layers=0, hidden_width=1,
                           embed_dim=embed_dim, rng=RngStream(0, 999))
    w, b = model.weights[0]
    w[:] = 0.0
    b[:] = 0.0
    if matrix is not None:
        w[:dim, :] = np.asarray(matrix, dtype=np.float64).T
    if bias is not None:
        b[:] = np.asarray(bias, dtype=np.float64)
    return model


def random_model(dim: int, cond_len: int, hidden_layers: int, width: int,
                 rng: RngStream, out_scale: float = 0.3) -> net.MlpDrift:
    """An initialized model with a randomized (non-zero) output layer."""
    model = net.init_model(dim, cond_len, hidden_layers, width, 4, rng)
    w, b = model.weights[-1]
    model.weights[-1] = (rng.normal(w.shape) * out_scale,
                         rng.normal(b.shape) * out_scale)
    return model


@pytest.fixture
def rng():
    return RngStream(1234, 0)
