"""Tiny dense anchor-based detector with a two-level FPN and an objectness branch."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .. import boxes as B
from .. import tensor as T
from ..attention import ProposalSet
from ..errors import ConfigError, NoSampledAnchors, ShapeMismatch
from ..losses import rpn_loss
from ..nn import Conv2d, Module

POS_IOU = 0.5
NEG_IOU = 0.4
NEG_PER_POS = 3


@dataclass(frozen=True)
class DetectorSpec:
    base_channels: int = 32
    num_classes: int = 3
    image_size: int = 64
    strides: tuple = (8, 16)
    anchor_sizes: tuple = (12.0, 24.0)
    anchor_scales: tuple = (1.0, 1.5)

    def __post_init__(self):
        if tuple(self.strides) != (8, 16):
            raise ConfigError("the toy detector has exactly two FPN levels with strides 8 and 16")
        if self.image_size % 16:
            raise ConfigError("image size must be a multiple of 16")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be positive")
        object.__setattr__(self, "strides", tuple(self.strides))
        object.__setattr__(self, "anchor_sizes", tuple(float(s) for s in self.anchor_sizes))
        object.__setattr__(self, "anchor_scales", tuple(float(s) for s in self.anchor_scales))

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales)

    @property
    def fpn_channels(self) -> int:
        return self.base_channels

    def level_shapes(self) -> list:
        return [(self.image_size // s, self.image_size // s) for s in self.strides]

    def anchors(self) -> list:
        """Per-level anchor grids, each ``(A, H, W, 4)``."""
        return [
            B.make_anchors(h, w, s, [base * k for k in self.anchor_scales])
            for (h, w), s, base in zip(self.level_shapes(), self.strides, self.anchor_sizes)
        ]

    def flat_anchors(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1, 4) for a in self.anchors()], axis=0)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


class HeadOutputs(NamedTuple):
    cls: list  # [N, A*(K+1), H, W] per level; class 0 is background
    reg: list  # [N, 4A, H, W]
    obj: list  # [N, A, H, W]


@dataclass
class Detection:
    box: np.ndarray
    cls: int
    score: float


@dataclass
class Targets:
    labels: np.ndarray  # [N, M] in {1, 0, -1}
    classes: np.ndarray  # [N, M] in 0..K (0 background)
    offsets: np.ndarray  # [N, M, 4]
    extra: dict = field(default_factory=dict)


class Detector(Module):
    """Four stride-2 conv stages, a top-down FPN over strides 8 and 16, shared heads."""

    def __init__(self, spec: DetectorSpec, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        c = spec.base_channels
        f = spec.fpn_channels
        a = spec.num_anchors
        k = spec.num_classes + 1
        self.spec = spec
        self.stages = [Conv2d(3, c, 3, stride=2, rng=rng)] + [Conv2d(c, c, 3, stride=2, rng=rng) for _ in range(3)]
        self.lateral = [Conv2d(c, f, 1, rng=rng), Conv2d(c, f, 1, rng=rng)]
        self.smooth = [Conv2d(f, f, 3, rng=rng), Conv2d(f, f, 3, rng=rng)]
        self.tower = Conv2d(f, f, 3, rng=rng)
        self.cls_head = Conv2d(f, a * k, 1, rng=rng)
        self.reg_head = Conv2d(f, 4 * a, 1, rng=rng)
        self.obj_head = Conv2d(f, a, 1, rng=rng)
        for head in (self.cls_head, self.reg_head, self.obj_head):
            head.weight.data *= 0.1
        self.obj_head.bias.data[:] = -2.0

    def features(self, images) -> list:
        x = T._as_tensor(images)
        if x.ndim != 4 or x.shape[1:] != (3, self.spec.image_size, self.spec.image_size):
            raise ShapeMismatch(f"expected [N, 3, {self.spec.image_size}, {self.spec.image_size}], got {x.shape}")
        c3 = None
        for i, stage in enumerate(self.stages):
            x = T.relu(stage(x))
            if i == 2:
                c3 = x
        c4 = x
        p4 = self.lateral[1](c4)
        p3 = T.add(self.lateral[0](c3), T.upsample_nearest(p4, 2))
        return [self.smooth[0](p3), self.smooth[1](p4)]

    def heads(self, feats: list) -> HeadOutputs:
        cls, reg, obj = [], [], []
        for p in feats:
            t = T.relu(self.tower(p))
            cls.append(self.cls_head(t))
            reg.append(self.reg_head(t))
            obj.append(self.obj_head(t))
        return HeadOutputs(cls, reg, obj)

    def __call__(self, images):
        feats = self.features(images)
        return feats, self.heads(feats)


def forward(model: Detector, images):
    """``(FpnFeatures, HeadOutputs)`` for an image batch."""
    return model(images)


# ---------------------------------------------------------------------------
# flattening helpers (anchor order: level, anchor, row, col)


def flatten_cls(outputs: HeadOutputs, num_anchors: int) -> T.Tensor:
    parts = []
    for o in outputs.cls:
        n, ak, h, w = o.shape
        k = ak // num_anchors
        y = T.transpose(T.reshape(o, (n, num_anchors, k, h, w)), (0, 1, 3, 4, 2))
        parts.append(T.reshape(y, (n, num_anchors * h * w, k)))
    return T.concat(parts, axis=1)


def flatten_reg(outputs: HeadOutputs, num_anchors: int) -> T.Tensor:
    parts = []
    for o in outputs.reg:
        n, _, h, w = o.shape
        y = T.transpose(T.reshape(o, (n, num_anchors, 4, h, w)), (0, 1, 3, 4, 2))
        parts.append(T.reshape(y, (n, num_anchors * h * w, 4)))
    return T.concat(parts, axis=1)


def flatten_obj(outputs: HeadOutputs) -> T.Tensor:
    parts = [T.reshape(o, (o.shape[0], -1)) for o in outputs.obj]
    return T.concat(parts, axis=1)


# ---------------------------------------------------------------------------
# targets and task loss


def assign_targets(anchors: np.ndarray, gt_boxes: np.ndarray, gt_classes: np.ndarray):
    """Label anchors for one image.

    Returns ``(labels, classes, offsets)``: labels 1/0/-1 for positive,
    negative and ignored anchors; classes in ``0..K`` with 0 = background;
    offsets encode the matched ground truth (zeros elsewhere).
    """
    m = len(anchors)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    labels = np.zeros(m, dtype=np.int64)
    classes = np.zeros(m, dtype=np.int64)
    offsets = np.zeros((m, 4))
    if len(gt_boxes) == 0:
        return labels, classes, offsets
    ious = B.pairwise_iou(anchors, gt_boxes)  # [M, G]
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(m), best_gt]
    labels[(best_iou >= NEG_IOU) & (best_iou < POS_IOU)] = -1
    pos = best_iou >= POS_IOU
    # every ground truth keeps its best anchor
    for g in range(len(gt_boxes)):
        a = int(ious[:, g].argmax())
        if ious[a, g] > 0:
            pos[a] = True
            best_gt[a] = g
    labels[pos] = 1
    classes[pos] = gt_classes[best_gt[pos]] + 1
    offsets[pos] = B.encode(anchors[pos], gt_boxes[best_gt[pos]])
    return labels, classes, offsets


def build_targets(spec: DetectorSpec, scenes) -> Targets:
    anchors = spec.flat_anchors()
    labels, classes, offsets = zip(*(assign_targets(anchors, s.boxes, s.classes) for s in scenes))
    return Targets(np.stack(labels), np.stack(classes), np.stack(offsets))


def mine_negatives(ce: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Sampling mask: all positives plus the hardest negatives at 3:1 per image."""
    sampled = labels == 1
    for i in range(labels.shape[0]):
        n_pos = int((labels[i] == 1).sum())
        neg = np.nonzero(labels[i] == 0)[0]
        take = min(len(neg), NEG_PER_POS * max(1, n_pos))
        order = np.argsort(-ce[i, neg], kind="stable")[:take]
        sampled[i, neg[order]] = True
    return sampled


def task_loss_parts(outputs: HeadOutputs, targets: Targets, spec: DetectorSpec, lambda1=1.0, lambda2=1.0,
                    sampled: np.ndarray | None = None):
    """``(classification CE over sampled anchors, objectness/offset RPN loss)``.

    ``sampled`` overrides hard-negative mining with a fixed ``[N, M]`` mask,
    which keeps the loss smooth for finite-difference checks.
    """
    a = spec.num_anchors
    logits = flatten_cls(outputs, a)  # [N, M, K+1]
    n, m, k = logits.shape
    log_p = T.log_softmax(logits, axes=2)
    onehot = np.zeros((n, m, k))
    np.put_along_axis(onehot, targets.classes[..., None], 1.0, axis=2)
    ce = T.neg(T.sum(T.mul(log_p, onehot), axes=2))  # [N, M]
    if sampled is None:
        sampled = mine_negatives(ce.data, targets.labels)
    n_sampled = int(sampled.sum())
    if n_sampled == 0:
        raise NoSampledAnchors("no anchor sampled for classification")
    l_cls = T.scale(T.sum(T.mul(ce, sampled.astype(np.float64))), 1.0 / n_sampled)
    obj = T.reshape(flatten_obj(outputs), (n * m,))
    reg = T.reshape(flatten_reg(outputs, a), (n * m, 4))
    l_rpn = rpn_loss(obj, reg, targets.labels.reshape(-1), targets.offsets.reshape(-1, 4), lambda1, lambda2)
    return l_cls, l_rpn


def task_loss(outputs: HeadOutputs, targets: Targets, spec: DetectorSpec) -> T.Tensor:
    l_cls, l_rpn = task_loss_parts(outputs, targets, spec)
    return T.add(l_cls, l_rpn)


# ---------------------------------------------------------------------------
# inference


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def decode_and_nms(outputs: HeadOutputs, spec: DetectorSpec, score_thresh: float = 0.05,
                   iou_thresh: float = 0.5, max_dets: int = 100) -> list:
    """Per-image lists of :class:`Detection` (class ids 0..K-1)."""
    if not (0 < score_thresh < 1 and 0 < iou_thresh < 1):
        raise ValueError("thresholds must lie in (0, 1)")
    a = spec.num_anchors
    with T.no_grad():
        probs = _softmax_np(flatten_cls(outputs, a).data, axis=2)
        offs = flatten_reg(outputs, a).data
    anchors = spec.flat_anchors()
    size = spec.image_size
    results = []
    for i in range(probs.shape[0]):
        boxes = B.clip_boxes(B.decode(anchors, offs[i]), size, size)
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        dets = []
        for c in range(1, probs.shape[2]):
            sel = np.nonzero(valid & (probs[i, :, c] > score_thresh))[0]
            if len(sel) == 0:
                continue
            keep = B.nms(boxes[sel], probs[i, sel, c], iou_thresh)
            dets.extend(Detection(boxes[sel[j]], c - 1, float(probs[i, sel[j], c])) for j in keep)
        dets.sort(key=lambda d: -d.score)
        results.append(dets[:max_dets])
    return results


def proposals_from_teacher(outputs: HeadOutputs, spec: DetectorSpec, top_n: int = 10,
                           iou_thresh: float = 0.7) -> ProposalSet:
    """Top objectness boxes per image after decoding and class-agnostic NMS (image space)."""
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    a = spec.num_anchors
    with T.no_grad():
        obj = flatten_obj(outputs).data
        offs = flatten_reg(outputs, a).data
    anchors = spec.flat_anchors()
    size = spec.image_size
    boxes_out, scores_out = [], []
    for i in range(obj.shape[0]):
        boxes = B.clip_boxes(B.decode(anchors, offs[i]), size, size)
        score = 1.0 / (1.0 + np.exp(-obj[i]))
        valid = np.nonzero((boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1]))[0]
        keep = valid[B.nms(boxes[valid], score[valid], iou_thresh)][:top_n]
        boxes_out.append(boxes[keep])
        scores_out.append(score[keep])
    return ProposalSet(boxes_out, scores_out, stride=1.0)
