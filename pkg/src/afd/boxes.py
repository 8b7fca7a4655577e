"""Axis-aligned box geometry: IoU, anchor grids, offset encoding, NMS.

Boxes are ``(x_min, y_min, x_max, y_max)`` in pixel units. Offsets use the
usual centre/size parameterisation::

    dx = (gx - ax) / aw      dw = log(gw / aw)
    dy = (gy - ay) / ah      dh = log(gh / ah)
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import InvalidBox

# keeps exp(dw) bounded during early training
MAX_LOG_SCALE = float(np.log(1000.0 / 16.0))
MIN_BOX_SIZE = 1e-3


def iou(a, b) -> float:
    """IoU of two single boxes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for box in (a, b):
        if box.shape != (4,) or not np.all(np.isfinite(box)) or box[2] <= box[0] or box[3] <= box[1]:
            raise InvalidBox(f"invalid box {box.tolist()}")
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between box arrays ``a[n,4]`` and ``b[m,4]``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def make_anchors(height: int, width: int, stride: int, sizes) -> np.ndarray:
    """Square anchors centred on every cell; shape ``(A, H, W, 4)``."""
    ys = (np.arange(height) + 0.5) * stride
    xs = (np.arange(width) + 0.5) * stride
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((len(sizes), height, width, 4))
    for a, s in enumerate(sizes):
        out[a, :, :, 0] = cx - s / 2
        out[a, :, :, 1] = cy - s / 2
        out[a, :, :, 2] = cx + s / 2
        out[a, :, :, 3] = cy + s / 2
    return out


def encode(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    ax = anchors[..., 0] + 0.5 * aw
    ay = anchors[..., 1] + 0.5 * ah
    gw = boxes[..., 2] - boxes[..., 0]
    gh = boxes[..., 3] - boxes[..., 1]
    gx = boxes[..., 0] + 0.5 * gw
    gy = boxes[..., 1] + 0.5 * gh
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=-1)


def decode(anchors: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    ax = anchors[..., 0] + 0.5 * aw
    ay = anchors[..., 1] + 0.5 * ah
    cx = ax + offsets[..., 0] * aw
    cy = ay + offsets[..., 1] * ah
    w = aw * np.exp(np.minimum(offsets[..., 2], MAX_LOG_SCALE))
    h = ah * np.exp(np.minimum(offsets[..., 3], MAX_LOG_SCALE))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def decode_tensor(anchors: np.ndarray, dx, dy, dw, dh):
    """Differentiable decode. Offsets are tensors shaped like ``anchors[..., 0]``.

    Returns the four box coordinates as separate tensors; widths and heights
    are clamped below at ``MIN_BOX_SIZE``.
    """
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    ax = anchors[..., 0] + 0.5 * aw
    ay = anchors[..., 1] + 0.5 * ah
    cx = T.add(T.mul(dx, aw), ax)
    cy = T.add(T.mul(dy, ah), ay)
    w = T.clamp(T.mul(T.exp(T.clamp(dw, hi=MAX_LOG_SCALE)), aw), lo=MIN_BOX_SIZE)
    h = T.clamp(T.mul(T.exp(T.clamp(dh, hi=MAX_LOG_SCALE)), ah), lo=MIN_BOX_SIZE)
    half_w = T.scale(w, 0.5)
    half_h = T.scale(h, 0.5)
    return T.sub(cx, half_w), T.sub(cy, half_h), T.add(cx, half_w), T.add(cy, half_h)


def iou_tensor(a, b):
    """Elementwise IoU of two boxes given as 4-tuples of same-shaped tensors."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = T.relu(T.sub(T.minimum(ax1, bx1), T.maximum(ax0, bx0)))
    ih = T.relu(T.sub(T.minimum(ay1, by1), T.maximum(ay0, by0)))
    inter = T.mul(iw, ih)
    area_a = T.mul(T.sub(ax1, ax0), T.sub(ay1, ay0))
    area_b = T.mul(T.sub(bx1, bx0), T.sub(by1, by0))
    union = T.sub(T.add(area_a, area_b), inter)
    return T.div(inter, union)


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    out = boxes.copy()
    out[..., 0] = np.clip(out[..., 0], 0, width)
    out[..., 2] = np.clip(out[..., 2], 0, width)
    out[..., 1] = np.clip(out[..., 1], 0, height)
    out[..., 3] = np.clip(out[..., 3], 0, height)
    return out


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy NMS. Ties in score keep the lower index first. Returns kept indices."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(scores), dtype=bool)
    ious = pairwise_iou(boxes, boxes) if len(boxes) else np.zeros((0, 0))
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_thresh
    return np.asarray(keep, dtype=np.int64)
