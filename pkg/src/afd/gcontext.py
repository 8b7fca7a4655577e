"""Global-context relation block and the global distillation loss.

``B(F) = F + L3(LN(ReLU(L2(ctx))))`` where ``ctx = sum_j softmax_j(L1 F) F_j``
pools the map with learned per-pixel attention. ``L3`` starts at zero so the
block is the identity when training begins. One block per FPN level is shared
by teacher and student.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeMismatch
from .nn import Conv2d, Module

LN_EPS = 1e-5


class GcBlockParams(Module):
    def __init__(self, channels: int, reduction: int = 4, loss_weight: float = 5e-4,
                 rng: np.random.Generator | None = None):
        if channels % reduction:
            raise ConfigError(f"reduction {reduction} must divide channel count {channels}")
        if loss_weight < 0:
            raise ConfigError("loss weight must be non-negative")
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = channels // reduction
        self.reduction = reduction
        self.loss_weight = float(loss_weight)
        self.l1 = Conv2d(channels, 1, 1, rng=rng)
        self.l2 = Conv2d(channels, hidden, 1, rng=rng)
        self.ln_scale = T.Tensor(np.ones(hidden), requires_grad=True)
        self.ln_shift = T.Tensor(np.zeros(hidden), requires_grad=True)
        self.l3 = Conv2d(hidden, channels, 1, zero=True)

    @property
    def channels(self) -> int:
        return self.l1.in_channels


def context_vector(f: T.Tensor, params: GcBlockParams) -> T.Tensor:
    """Attention-pooled context, ``[N, C, 1, 1]``."""
    n, c, h, w = f.shape
    logits = params.l1(f)  # [N, 1, H, W]
    weights = T.softmax(logits, axes=(2, 3))
    pooled = T.sum(T.mul(f, T.expand(weights, f.shape)), axes=(2, 3))
    return T.reshape(pooled, (n, c, 1, 1))


def _layer_norm(t: T.Tensor, scale: T.Tensor, shift: T.Tensor) -> T.Tensor:
    n, k, _, _ = t.shape
    mu = T.expand(T.reshape(T.mean(t, axes=1), (n, 1, 1, 1)), t.shape)
    centred = T.sub(t, mu)
    var = T.mean(T.square(centred), axes=1)
    denom = T.expand(T.reshape(T.sqrt(T.add(var, LN_EPS)), (n, 1, 1, 1)), t.shape)
    normed = T.div(centred, denom)
    g = T.expand(T.reshape(scale, (1, k, 1, 1)), t.shape)
    b = T.expand(T.reshape(shift, (1, k, 1, 1)), t.shape)
    return T.add(T.mul(normed, g), b)


def gc_forward(f: T.Tensor, params: GcBlockParams) -> T.Tensor:
    f = T._as_tensor(f)
    if f.ndim != 4 or f.shape[1] != params.channels:
        raise ShapeMismatch(f"block expects {params.channels} channels, got {f.shape}")
    ctx = context_vector(f, params)
    hidden = T.relu(params.l2(ctx))
    hidden = _layer_norm(hidden, params.ln_scale, params.ln_shift)
    delta = params.l3(hidden)  # [N, C, 1, 1]
    return T.add(f, T.expand(delta, f.shape))


def global_loss(feats_t, feats_s, params) -> T.Tensor:
    """``Lambda * sum (B(F_T) - B(F_S))^2`` summed over levels, averaged over images.

    Accepts single tensors or per-level lists (with one block per level).
    Teacher features are detached; the block parameters receive gradient
    through both branches.
    """
    if isinstance(feats_t, T.Tensor):
        feats_t, feats_s, params = [feats_t], [feats_s], [params]
    if not (len(feats_t) == len(feats_s) == len(params)):
        raise ShapeMismatch("levels of features and blocks disagree")
    total = None
    for ft, fs, p in zip(feats_t, feats_s, params):
        if ft.shape != fs.shape:
            raise ShapeMismatch(f"teacher {ft.shape} vs student {fs.shape}")
        diff = T.sub(gc_forward(ft.detach(), p), gc_forward(fs, p))
        term = T.scale(T.sum(T.square(diff)), p.loss_weight / ft.shape[0])
        total = term if total is None else T.add(total, term)
    return total
