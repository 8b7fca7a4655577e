"""Per-channel standardisation of FPN features.

Each channel gets one mean/variance pair computed over every batch element and
spatial position (``m = N * H * W`` samples), so the same affine map applies at
every location of the map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateBatch, ShapeMismatch

DEFAULT_EPS = 1e-5


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    var: np.ndarray
    eps: float
    m: int


def _per_channel(v: T.Tensor, shape) -> T.Tensor:
    n, c, h, w = shape
    return T.expand(T.reshape(v, (1, c, 1, 1)), shape)


def normalize_features(x: T.Tensor, eps: float = DEFAULT_EPS, return_stats: bool = False):
    """``(x - mu_c) / sqrt(var_c + eps)`` with biased batch statistics."""
    x = T._as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"expected [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    m = n * h * w
    if m < 2:
        raise DegenerateBatch(f"need at least 2 samples per channel, got {m}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = T.mean(x, axes=(0, 2, 3))
    centred = T.sub(x, _per_channel(mu, x.shape))
    var = T.mean(T.square(centred), axes=(0, 2, 3))
    out = T.div(centred, _per_channel(T.sqrt(T.add(var, eps)), x.shape))
    if return_stats:
        return out, NormStats(mu.data.copy(), var.data.copy(), eps, m)
    return out
