import numpy as np
import pytest

from spefield.encoding import SplineEncoding
from spefield.network import FieldModel, init_random


def finite_difference(fn, x0, eps=1e-6):
    """Central-difference gradient of a scalar function over a flat vector."""
    x0 = np.asarray(x0, dtype=float)
    grad = np.empty_like(x0)
    for i in range(x0.size):
        hi = x0.copy()
        lo = x0.copy()
        hi[i] += eps
        lo[i] -= eps
        grad[i] = (fn(hi) - fn(lo)) / (2.0 * eps)
    return grad


def relative_error(approx, exact):
    scale = max(np.max(np.abs(exact)), 1e-8)
    return np.max(np.abs(approx - exact)) / scale


def tiny_model(encoder="spe", degree=1, input_dim=3, channels=5, segments=4,
               projections=2, hidden=7, depth=3, out_dim=1, seed=0):
    """Small FieldModel for gradient checks."""
    rng = np.random.default_rng(seed)
    if encoder == "spe":
        enc = SplineEncoding.random(
            degree=degree,
            segments=segments,
            channels=channels,
            projections=projections,
            input_dim=input_dim,
            rng=rng,
        )
    elif encoder == "fpe":
        from spefield.encoding import FourierEncoding

        enc = FourierEncoding.random(
            n_frequencies=channels, input_dim=input_dim, rng=rng
        )
    else:
        from spefield.encoding import IdentityEncoding

        enc = IdentityEncoding(input_dim=input_dim)
    dims = [enc.out_dim] + [hidden] * (depth - 1) + [out_dim]
    return FieldModel(enc, init_random(dims, seed=rng))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
