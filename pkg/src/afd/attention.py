"""Local/global channel and spatial attention masks.

A single-detector channel mask turns the mean magnitude of each channel into a
temperature softmax over channels; the spatial mask does the same with the
channel-mean magnitude over positions. Teacher and student masks are added,
computed both on the whole map (global) and on ``I x I`` tiles (local), and the
two views are averaged.

All batched helpers work on ``[N, C, H, W]`` tensors and return masks with a
leading batch axis; the per-image functions wrap them with ``N = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import BoxOutOfBounds, ConfigError, EmptyRegion, IndivisibleShape, ShapeMismatch

_SCALES = ("verbatim", "dimensional")


@dataclass(frozen=True)
class MaskConfig:
    """Knobs for mask construction.

    ``channel_scale="verbatim"`` multiplies the channel softmax by ``H*W`` and
    ``spatial_scale="verbatim"`` multiplies the spatial softmax by ``C``;
    ``"dimensional"`` swaps each for the cardinality of its own softmax.
    ``detach`` computes masks off the tape so they act as constant weights.
    """

    temperature: float = 0.1
    instance_size: int = 4
    channel_scale: str = "verbatim"
    spatial_scale: str = "verbatim"
    use_proposal_mask: bool = False
    detach: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if int(self.instance_size) != self.instance_size or self.instance_size < 1:
            raise ConfigError("instance_size must be a positive integer")
        if self.channel_scale not in _SCALES or self.spatial_scale not in _SCALES:
            raise ConfigError(f"scales must be one of {_SCALES}")

    @classmethod
    def one_stage(cls, **kw):
        return cls(temperature=0.1, **kw)

    @classmethod
    def two_stage(cls, **kw):
        return cls(temperature=0.4, **kw)

    def channel_factor(self, c: int, h: int, w: int) -> float:
        return float(h * w) if self.channel_scale == "verbatim" else float(c)

    def spatial_factor(self, c: int, h: int, w: int) -> float:
        return float(c) if self.spatial_scale == "verbatim" else float(h * w)

    def check_divisible(self, h: int, w: int):
        i = self.instance_size
        if h % i or w % i:
            raise IndivisibleShape(f"feature map {h}x{w} is not divisible by instance size {i}")


@dataclass
class ProposalSet:
    """Per-image proposal boxes and objectness scores.

    ``boxes[n]`` has shape ``(k, 4)``. ``stride`` records how many image pixels
    one unit of the box coordinates spans (1 for image space, the level stride
    for feature-map space).
    """

    boxes: list
    scores: list
    stride: float = 1.0

    def __len__(self):
        return len(self.boxes)

    def at_stride(self, stride: float, height: int, width: int) -> "ProposalSet":
        """Map image-space boxes into a feature map of the given stride, clipped."""
        factor = self.stride / stride
        out = []
        for b in self.boxes:
            b = np.asarray(b, dtype=np.float64).reshape(-1, 4) * factor
            b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0, width)
            b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0, height)
            keep = (b[:, 2] > b[:, 0]) & (b[:, 3] > b[:, 1])
            out.append(b[keep])
        scores = [np.asarray(s)[: len(b)] for s, b in zip(self.scores, out)]
        return ProposalSet(out, scores, stride)


class LevelMasks(NamedTuple):
    """Masks for one FPN level, batched over images."""

    channel: T.Tensor  # LG_ch [N, C]
    spatial: T.Tensor  # LG_sp [N, H, W]
    local_channel: T.Tensor
    local_spatial: T.Tensor
    global_channel: T.Tensor
    global_spatial: T.Tensor


@dataclass
class AttnMasks:
    levels: list = field(default_factory=list)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i) -> LevelMasks:
        return self.levels[i]

    def __iter__(self):
        return iter(self.levels)


class LocalMasks(NamedTuple):
    channel: T.Tensor  # averaged over patches
    spatial: T.Tensor  # reassembled H x W grid
    channel_patches: T.Tensor  # one row per patch, row-major patch order


# ---------------------------------------------------------------------------
# proposal region


def proposal_region_mask(boxes, height: int, width: int) -> T.Tensor:
    """Binary ``[H, W]`` map of cells touched by the union of ``boxes``.

    A cell ``(i, j)`` spans ``[j, j+1) x [i, i+1)``; it is inside when it
    overlaps a box with positive area. ``None`` or an empty list yields all ones.
    """
    if isinstance(boxes, ProposalSet):
        if len(boxes) != 1:
            raise ValueError("pass the boxes of a single image")
        boxes = boxes.boxes[0]
    if boxes is None or len(boxes) == 0:
        return T.Tensor(np.ones((height, width)))
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    tol = 1e-9
    bad = (
        (boxes[:, 0] >= boxes[:, 2]) | (boxes[:, 1] >= boxes[:, 3])
        | (boxes[:, 0] < -tol) | (boxes[:, 1] < -tol)
        | (boxes[:, 2] > width + tol) | (boxes[:, 3] > height + tol)
    )
    if np.any(bad):
        raise BoxOutOfBounds(f"boxes outside a {height}x{width} grid: {boxes[bad].tolist()}")
    cols = np.arange(width)
    rows = np.arange(height)
    inx = (boxes[:, None, 0] < cols[None, :] + 1) & (boxes[:, None, 2] > cols[None, :])
    iny = (boxes[:, None, 1] < rows[None, :] + 1) & (boxes[:, None, 3] > rows[None, :])
    region = (iny[:, :, None] & inx[:, None, :]).any(axis=0)
    return T.Tensor(region.astype(np.float64))


def region_masks(proposals: ProposalSet | None, n: int, height: int, width: int, cfg: MaskConfig) -> np.ndarray:
    """Stack of per-image region masks for one level, ``bool[N, H, W]``."""
    if proposals is None or not cfg.use_proposal_mask:
        return np.ones((n, height, width), dtype=bool)
    if len(proposals) != n:
        raise ShapeMismatch(f"{len(proposals)} proposal lists for {n} images")
    return np.stack([proposal_region_mask(b, height, width).data > 0 for b in proposals.boxes])


# ---------------------------------------------------------------------------
# single-detector masks, batched


def _as_region(region, n, h, w) -> np.ndarray:
    if region is None:
        return np.ones((n, h, w), dtype=bool)
    r = region.data if isinstance(region, T.Tensor) else np.asarray(region)
    r = np.broadcast_to(r.reshape((-1, h, w)), (n, h, w))
    if not np.all((r == 0) | (r == 1)):
        raise ValueError("region mask must be binary")
    return r.astype(bool)


def _channel_mask_batch(x: T.Tensor, region: np.ndarray, factor: float, temperature: float,
                        allow_empty: bool = False):
    n, c, h, w = x.shape
    counts = region.reshape(n, -1).sum(axis=1).astype(np.float64)
    empty = counts == 0
    if np.any(empty) and not allow_empty:
        raise EmptyRegion("channel mask over an empty region")
    weights = np.broadcast_to(region[:, None, :, :], x.shape).astype(np.float64)
    pooled = T.sum(T.mul(T.abs(x), weights), axes=(2, 3))  # [N, C]
    inv = np.repeat((1.0 / np.where(empty, 1.0, counts))[:, None], c, axis=1) / temperature
    logits = T.mul(pooled, inv)
    return T.scale(T.softmax(logits, axes=1), factor), empty


def _spatial_mask_batch(x: T.Tensor, region: np.ndarray, factor: float, temperature: float,
                        allow_empty: bool = False):
    n, c, h, w = x.shape
    empty = ~region.reshape(n, -1).any(axis=1)
    if np.any(empty) and not allow_empty:
        raise EmptyRegion("spatial mask over an empty region")
    support = region | empty[:, None, None]
    pooled = T.mean(T.abs(x), axes=1)  # [N, H, W]
    logits = T.scale(pooled, 1.0 / temperature)
    return T.scale(T.softmax(logits, axes=(1, 2), mask=support), factor), empty


def channel_mask(x: T.Tensor, region=None, cfg: MaskConfig = MaskConfig()) -> T.Tensor:
    """Channel attention of one ``[C, H, W]`` feature map; returns ``[C]``."""
    x = T._as_tensor(x)
    c, h, w = x.shape
    r = _as_region(region, 1, h, w)
    out, _ = _channel_mask_batch(T.reshape(x, (1, c, h, w)), r, cfg.channel_factor(c, h, w), cfg.temperature)
    return T.reshape(out, (c,))


def spatial_mask(x: T.Tensor, region=None, cfg: MaskConfig = MaskConfig()) -> T.Tensor:
    """Spatial attention of one ``[C, H, W]`` feature map; returns ``[H, W]``."""
    x = T._as_tensor(x)
    c, h, w = x.shape
    r = _as_region(region, 1, h, w)
    out, _ = _spatial_mask_batch(T.reshape(x, (1, c, h, w)), r, cfg.spatial_factor(c, h, w), cfg.temperature)
    return T.reshape(out, (h, w))


# ---------------------------------------------------------------------------
# patches


def split_patches(x: T.Tensor, instance_size: int) -> list:
    """Row-major non-overlapping ``I x I`` tiles of a ``[C, H, W]`` map."""
    x = T._as_tensor(x)
    _, h, w = x.shape
    i = int(instance_size)
    if h % i or w % i:
        raise IndivisibleShape(f"{h}x{w} is not divisible by {i}")
    return [x[:, r : r + i, q : q + i] for r in range(0, h, i) for q in range(0, w, i)]


def merge_patches(patches: list, height: int, width: int) -> T.Tensor:
    """Inverse of :func:`split_patches`."""
    i = patches[0].shape[-1]
    per_row = width // i
    rows = [T.concat(patches[r * per_row : (r + 1) * per_row], axis=2) for r in range(height // i)]
    return T.concat(rows, axis=1)


def to_patches(x: T.Tensor, i: int) -> T.Tensor:
    """``[N, C, H, W] -> [N * P, C, I, I]`` with row-major patch order per image."""
    n, c, h, w = x.shape
    if h % i or w % i:
        raise IndivisibleShape(f"{h}x{w} is not divisible by {i}")
    ph, pw = h // i, w // i
    y = T.reshape(x, (n, c, ph, i, pw, i))
    y = T.transpose(y, (0, 2, 4, 1, 3, 5))
    return T.reshape(y, (n * ph * pw, c, i, i))


def from_patches(p: T.Tensor, n: int, h: int, w: int) -> T.Tensor:
    """``[N * P, I, I] -> [N, H, W]``, inverse of the spatial part of :func:`to_patches`."""
    i = p.shape[-1]
    ph, pw = h // i, w // i
    y = T.reshape(p, (n, ph, pw, i, i))
    y = T.transpose(y, (0, 1, 3, 2, 4))
    return T.reshape(y, (n, h, w))


def _region_patches(region: np.ndarray, i: int) -> np.ndarray:
    n, h, w = region.shape
    r = region.reshape(n, h // i, i, w // i, i).transpose(0, 1, 3, 2, 4)
    return r.reshape(-1, i, i)


# ---------------------------------------------------------------------------
# local / global / combined


def local_masks_batch(f_t: T.Tensor, f_s: T.Tensor, region: np.ndarray, cfg: MaskConfig) -> LocalMasks:
    """Local masks for ``[N, C, H, W]`` inputs.

    Returns channel ``[N, C]`` (mean over patches with a non-empty region),
    spatial ``[N, H, W]`` and per-patch channel masks ``[N, P, C]``. Patches
    lying entirely outside the region contribute zero masks.
    """
    if f_t.shape != f_s.shape:
        raise ShapeMismatch(f"teacher {f_t.shape} vs student {f_s.shape}")
    n, c, h, w = f_t.shape
    cfg.check_divisible(h, w)
    i = cfg.instance_size
    p = (h // i) * (w // i)
    rp = _region_patches(region, i)
    ch_factor = cfg.channel_factor(c, i, i)
    sp_factor = cfg.spatial_factor(c, i, i)

    ch_t, empty = _channel_mask_batch(to_patches(f_t, i), rp, ch_factor, cfg.temperature, allow_empty=True)
    ch_s, _ = _channel_mask_batch(to_patches(f_s, i), rp, ch_factor, cfg.temperature, allow_empty=True)
    sp_t, _ = _spatial_mask_batch(to_patches(f_t, i), rp, sp_factor, cfg.temperature, allow_empty=True)
    sp_s, _ = _spatial_mask_batch(to_patches(f_s, i), rp, sp_factor, cfg.temperature, allow_empty=True)

    valid = (~empty).astype(np.float64)  # [N*P]
    ch = T.add(ch_t, ch_s)
    sp = T.add(sp_t, sp_s)
    if not valid.all():
        ch = T.mul(ch, np.repeat(valid[:, None], c, axis=1))
        sp = T.mul(sp, np.broadcast_to(valid[:, None, None], sp.shape).copy())
    ch_patches = T.reshape(ch, (n, p, c))
    n_valid = valid.reshape(n, p).sum(axis=1)
    if np.any(n_valid == 0):
        raise EmptyRegion("no patch of an image intersects its region")
    ch_mean = T.mul(T.sum(ch_patches, axes=1), np.repeat((1.0 / n_valid)[:, None], c, axis=1))
    return LocalMasks(ch_mean, from_patches(sp, n, h, w), ch_patches)


def global_masks_batch(f_t: T.Tensor, f_s: T.Tensor, region: np.ndarray, cfg: MaskConfig):
    if f_t.shape != f_s.shape:
        raise ShapeMismatch(f"teacher {f_t.shape} vs student {f_s.shape}")
    n, c, h, w = f_t.shape
    ch_factor = cfg.channel_factor(c, h, w)
    sp_factor = cfg.spatial_factor(c, h, w)
    ch_t, _ = _channel_mask_batch(f_t, region, ch_factor, cfg.temperature)
    ch_s, _ = _channel_mask_batch(f_s, region, ch_factor, cfg.temperature)
    sp_t, _ = _spatial_mask_batch(f_t, region, sp_factor, cfg.temperature)
    sp_s, _ = _spatial_mask_batch(f_s, region, sp_factor, cfg.temperature)
    return T.add(ch_t, ch_s), T.add(sp_t, sp_s)


def combine_masks(l_ch, l_sp, g_ch, g_sp) -> LevelMasks:
    """Average the local and global views."""
    l_ch, l_sp, g_ch, g_sp = (T._as_tensor(m) for m in (l_ch, l_sp, g_ch, g_sp))
    if l_ch.shape != g_ch.shape or l_sp.shape != g_sp.shape:
        raise ShapeMismatch("local and global masks disagree in shape")
    return LevelMasks(
        T.scale(T.add(l_ch, g_ch), 0.5),
        T.scale(T.add(l_sp, g_sp), 0.5),
        l_ch, l_sp, g_ch, g_sp,
    )


def local_masks(f_t, f_s, region=None, cfg: MaskConfig = MaskConfig()) -> LocalMasks:
    """Per-image local masks for ``[C, H, W]`` teacher/student features."""
    f_t, f_s = T._as_tensor(f_t), T._as_tensor(f_s)
    if f_t.shape != f_s.shape:
        raise ShapeMismatch(f"teacher {f_t.shape} vs student {f_s.shape}")
    c, h, w = f_t.shape
    r = _as_region(region, 1, h, w)
    out = local_masks_batch(T.reshape(f_t, (1, c, h, w)), T.reshape(f_s, (1, c, h, w)), r, cfg)
    p = out.channel_patches.shape[1]
    return LocalMasks(T.reshape(out.channel, (c,)), T.reshape(out.spatial, (h, w)),
                      T.reshape(out.channel_patches, (p, c)))


def global_masks(f_t, f_s, region=None, cfg: MaskConfig = MaskConfig()):
    """Per-image global masks ``(G_ch [C], G_sp [H, W])``."""
    f_t, f_s = T._as_tensor(f_t), T._as_tensor(f_s)
    if f_t.shape != f_s.shape:
        raise ShapeMismatch(f"teacher {f_t.shape} vs student {f_s.shape}")
    c, h, w = f_t.shape
    r = _as_region(region, 1, h, w)
    g_ch, g_sp = global_masks_batch(T.reshape(f_t, (1, c, h, w)), T.reshape(f_s, (1, c, h, w)), r, cfg)
    return T.reshape(g_ch, (c,)), T.reshape(g_sp, (h, w))


def level_masks(f_t: T.Tensor, f_s: T.Tensor, region: np.ndarray | None, cfg: MaskConfig) -> LevelMasks:
    """Combined masks for one batched level."""
    n, c, h, w = f_t.shape
    region = _as_region(region, n, h, w)
    loc = local_masks_batch(f_t, f_s, region, cfg)
    g_ch, g_sp = global_masks_batch(f_t, f_s, region, cfg)
    return combine_masks(loc.channel, loc.spatial, g_ch, g_sp)


def compute_masks(feats_t: list, feats_s: list, cfg: MaskConfig,
                  proposals: ProposalSet | None = None, strides=None) -> AttnMasks:
    """Masks for every FPN level.

    ``feats_s`` must already be mapped to the teacher's channel count.
    ``proposals`` are image-space boxes; ``strides`` maps them per level.
    The student features carry gradient only when ``cfg.detach`` is False.
    """
    if len(feats_t) != len(feats_s):
        raise ShapeMismatch("teacher and student level counts differ")
    levels = []
    for li, (ft, fs) in enumerate(zip(feats_t, feats_s)):
        n, c, h, w = ft.shape
        props = None
        if proposals is not None and cfg.use_proposal_mask:
            if strides is None:
                raise ValueError("strides are required to map proposals onto levels")
            props = proposals.at_stride(strides[li], h, w)
        region = region_masks(props, n, h, w, cfg)
        ft = ft.detach()
        if cfg.detach:
            with T.no_grad():
                levels.append(level_masks(ft, fs.detach(), region, cfg))
        else:
            levels.append(level_masks(ft, fs, region, cfg))
    return AttnMasks(levels)
