"""Distillation losses on features and heads, the RPN loss and their sum.

Batched conventions: features are per-level lists of ``[N, C, H, W]`` tensors,
masks come from :func:`afd.attention.compute_masks`, and every loss returns a
scalar that sums over levels and averages over images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import boxes as B
from . import tensor as T
from .attention import AttnMasks, LevelMasks, to_patches
from .errors import ConfigError, NoSampledAnchors, NonFiniteComponent, ShapeMismatch
from .featnorm import DEFAULT_EPS, normalize_features

iou = B.iou


@dataclass(frozen=True)
class LossWeights:
    """Balancing weights of the total objective.

    The global-loss weight lives in :class:`afd.gcontext.GcBlockParams` and
    the temperature in :class:`afd.attention.MaskConfig`.
    """

    nu: float = 5e-4  # feature distillation
    upsilon: float = 2e-2  # attention features
    beta: float = 1e-1  # head distillation
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self):
        for name in ("nu", "upsilon", "beta", "lambda1", "lambda2"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"{name} must be a finite non-negative number, got {v}")

    @classmethod
    def one_stage(cls):
        return cls(nu=5e-4, upsilon=2e-2, beta=1e-1)

    @classmethod
    def two_stage(cls):
        return cls(nu=6e-5, upsilon=4e-3, beta=1e-1)


def _expand_channel(v: T.Tensor, shape) -> T.Tensor:
    n, c, h, w = shape
    return T.expand(T.reshape(v, (n, c, 1, 1)), shape)


def _expand_spatial(v: T.Tensor, shape) -> T.Tensor:
    n, c, h, w = shape
    return T.expand(T.reshape(v, (n, 1, h, w)), shape)


def _batch_mean(per_image: T.Tensor) -> T.Tensor:
    return T.mean(per_image, axes=0)


def _accumulate(total, term):
    return term if total is None else T.add(total, term)


def _check_levels(*seqs):
    if len({len(s) for s in seqs}) != 1:
        raise ShapeMismatch("per-level inputs have different lengths")


def _safe_norm(x: T.Tensor, axes) -> T.Tensor:
    """Euclidean norm over ``axes``; the derivative at exactly zero is taken as 0."""
    return T.sqrt(T.clamp(T.sum(T.square(x), axes=axes), lo=0.0))


# ---------------------------------------------------------------------------
# feature distillation


def feature_distill_loss(feats_t, feats_s, adapt, masks: AttnMasks, eps: float = DEFAULT_EPS) -> T.Tensor:
    """Masked distance between normalised teacher and adapted student features.

    Per level and image: ``sqrt(sum_{c,i,j} (n(F_T) - n(adapt(F_S)))^2 * LG_sp[i,j] * LG_ch[c])``.
    ``adapt`` is a per-level list of callables (``None`` entries, or ``None``
    altogether, mean the student is already in teacher space).
    """
    _check_levels(feats_t, feats_s, masks.levels)
    total = None
    for li, (ft, fs, m) in enumerate(zip(feats_t, feats_s, masks)):
        fn = None if adapt is None else adapt[li]
        fs = fn(fs) if fn is not None else fs
        if ft.shape != fs.shape:
            raise ShapeMismatch(f"level {li}: teacher {ft.shape} vs adapted student {fs.shape}")
        diff = T.sub(normalize_features(ft.detach(), eps), normalize_features(fs, eps))
        weights = T.mul(_expand_channel(m.channel, ft.shape), _expand_spatial(m.spatial, ft.shape))
        inner = T.sum(T.mul(T.square(diff), weights), axes=(1, 2, 3))
        total = _accumulate(total, _batch_mean(T.sqrt(T.clamp(inner, lo=0.0))))
    return total


# ---------------------------------------------------------------------------
# attention features


def attn_feature_ch(x) -> T.Tensor:
    """Channel-mean map: ``[..., C, H, W] -> [..., H, W]``."""
    x = T._as_tensor(x)
    return T.mean(x, axes=x.ndim - 3)


def attn_feature_sp(x) -> T.Tensor:
    """Spatial-mean vector: ``[..., C, H, W] -> [..., C]``."""
    x = T._as_tensor(x)
    return T.mean(x, axes=(x.ndim - 2, x.ndim - 1))


def feature_attn_loss(feats_t, feats_s, instance_size: int) -> T.Tensor:
    """Channel plus spatial attention-feature loss.

    The channel part averages the global norm with the patch-mean of local
    norms; the spatial part uses the global map only. ``feats_s`` must already
    be in teacher channel space.
    """
    _check_levels(feats_t, feats_s)
    total = None
    for ft, fs in zip(feats_t, feats_s):
        if ft.shape != fs.shape:
            raise ShapeMismatch(f"teacher {ft.shape} vs student {fs.shape}")
        ft = ft.detach()
        n, c, h, w = ft.shape
        i = instance_size
        p = (h // i) * (w // i)
        glob = _safe_norm(T.sub(attn_feature_ch(fs), attn_feature_ch(ft)), axes=(1, 2))
        loc_diff = T.sub(attn_feature_ch(to_patches(fs, i)), attn_feature_ch(to_patches(ft, i)))
        loc = _safe_norm(loc_diff, axes=(1, 2))  # [N * P]
        loc = T.scale(T.sum(T.reshape(loc, (n, p)), axes=1), 1.0 / p)
        l_cha = T.scale(T.add(glob, loc), 0.5)
        l_spa = _safe_norm(T.sub(attn_feature_sp(fs), attn_feature_sp(ft)), axes=1)
        total = _accumulate(total, _batch_mean(T.add(l_cha, l_spa)))
    return total


# ---------------------------------------------------------------------------
# head distillation


def _spatial_weights(m: LevelMasks, n: int, a: int, h: int, w: int) -> T.Tensor:
    return T.expand(T.reshape(m.spatial, (n, 1, h, w)), (n, a, h, w))


def cls_head_loss(logits_s, logits_t, masks: AttnMasks, num_anchors: int) -> T.Tensor:
    """Mask-weighted cross-entropy of student class distributions against the teacher's.

    Logits are per-level ``[N, A * K, H, W]`` laid out anchor-major.
    """
    _check_levels(logits_s, logits_t, masks.levels)
    total = None
    for os_, ot, m in zip(logits_s, logits_t, masks):
        if os_.shape != ot.shape:
            raise ShapeMismatch(f"student {os_.shape} vs teacher {ot.shape}")
        n, ak, h, w = os_.shape
        a = num_anchors
        k = ak // a
        log_p_s = T.log_softmax(T.reshape(os_, (n, a, k, h, w)), axes=2)
        p_t = T.softmax(T.reshape(ot.detach(), (n, a, k, h, w)), axes=2).data
        ce = T.neg(T.sum(T.mul(log_p_s, p_t), axes=2))  # [N, A, H, W]
        weighted = T.mul(ce, _spatial_weights(m, n, a, h, w))
        total = _accumulate(total, _batch_mean(T.sum(weighted, axes=(1, 2, 3))))
    return total


def _split_offsets(k: T.Tensor, a: int):
    n, _, h, w = k.shape
    k = T.reshape(k, (n, a, 4, h, w))
    return [T.reshape(k[:, :, j], (n, a, h, w)) for j in range(4)]


def loc_head_loss(offsets_s, offsets_t, anchors, masks: AttnMasks) -> T.Tensor:
    """Mask-weighted ``1 - IoU`` between student and teacher decoded boxes.

    ``anchors[l]`` has shape ``(A, H, W, 4)``; offsets are ``[N, 4A, H, W]``.
    """
    _check_levels(offsets_s, offsets_t, anchors, masks.levels)
    total = None
    for ks, kt, anc, m in zip(offsets_s, offsets_t, anchors, masks):
        if ks.shape != kt.shape:
            raise ShapeMismatch(f"student {ks.shape} vs teacher {kt.shape}")
        n, a4, h, w = ks.shape
        a = a4 // 4
        if anc.shape != (a, h, w, 4):
            raise ShapeMismatch(f"anchors {anc.shape} vs offsets {ks.shape}")
        anc_b = np.broadcast_to(anc[None], (n, a, h, w, 4))
        box_s = B.decode_tensor(anc_b, *_split_offsets(ks, a))
        with T.no_grad():
            box_t = B.decode_tensor(anc_b, *_split_offsets(kt.detach(), a))
        overlap = B.iou_tensor(box_s, box_t)
        per_loc = T.sub(1.0, overlap)
        weighted = T.mul(per_loc, _spatial_weights(m, n, a, h, w))
        total = _accumulate(total, _batch_mean(T.sum(weighted, axes=(1, 2, 3))))
    return total


# ---------------------------------------------------------------------------
# RPN


def bce_with_logits(logits: T.Tensor, targets: np.ndarray) -> T.Tensor:
    """Elementwise binary cross-entropy, ``softplus(x) - x * y``."""
    return T.sub(T.softplus(logits), T.mul(logits, np.asarray(targets, dtype=np.float64)))


def rpn_loss(objectness, offsets, labels, target_offsets, lambda1: float = 1.0, lambda2: float = 1.0) -> T.Tensor:
    """Objectness BCE over sampled anchors plus smooth-L1 on positive offsets.

    ``objectness``: logits ``[M]``; ``offsets``: ``[M, 4]``; ``labels``: ints in
    ``{1, 0, -1}`` (positive, negative, ignore); ``target_offsets``: ``[M, 4]``.
    """
    objectness, offsets = T._as_tensor(objectness), T._as_tensor(offsets)
    labels = np.asarray(labels)
    target_offsets = np.asarray(target_offsets, dtype=np.float64)
    if objectness.shape != labels.shape or offsets.shape != target_offsets.shape:
        raise ShapeMismatch("rpn inputs disagree in shape")
    sampled = labels >= 0
    n_cls = int(sampled.sum())
    if n_cls == 0:
        raise NoSampledAnchors("no anchor is sampled")
    positive = labels == 1
    n_reg = max(1, int(positive.sum()))
    bce = bce_with_logits(objectness, positive.astype(np.float64))
    cls_term = T.scale(T.sum(T.mul(bce, sampled.astype(np.float64))), lambda1 / n_cls)
    t_star = np.where(positive[:, None], target_offsets, 0.0)
    reg = T.smooth_l1(T.sub(offsets, t_star))
    pos_w = np.repeat(positive.astype(np.float64)[:, None], offsets.shape[1], axis=1)
    reg_term = T.scale(T.sum(T.mul(reg, pos_w)), lambda2 / n_reg)
    return T.add(cls_term, reg_term)


# ---------------------------------------------------------------------------
# total

COMPONENTS = ("l_fd", "l_fa", "l_glob", "l_cls_h", "l_loc_h", "l_rpn")


def total_loss(components: dict, w: LossWeights) -> T.Tensor:
    """``nu*fd + upsilon*fa + glob + beta*(cls_h + loc_h) + rpn``.

    Missing components count as zero. Values may be tensors or floats.
    """
    unknown = set(components) - set(COMPONENTS)
    if unknown:
        raise KeyError(f"unknown loss components {sorted(unknown)}")
    for name, v in components.items():
        val = v.data if isinstance(v, T.Tensor) else np.asarray(v, dtype=np.float64)
        if not np.all(np.isfinite(val)):
            raise NonFiniteComponent(f"{name} is not finite")
    coef = {"l_fd": w.nu, "l_fa": w.upsilon, "l_glob": 1.0, "l_cls_h": w.beta, "l_loc_h": w.beta, "l_rpn": 1.0}
    total = None
    for name in COMPONENTS:
        if name not in components:
            continue
        term = T.scale(T._as_tensor(components[name]), coef[name])
        total = _accumulate(total, term)
    return total if total is not None else T.Tensor(0.0)
