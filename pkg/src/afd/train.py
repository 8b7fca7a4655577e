"""Teacher training, AFD distillation and the no-distillation baseline."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from . import tensor as T
from .attention import compute_masks
from .config import RunConfig, TrainConfig
from .errors import CheckpointMismatch
from .evaluate import evaluate_detections, mean_ap
from .gcontext import GcBlockParams, global_loss
from .losses import cls_head_loss, feature_attn_loss, feature_distill_loss, loc_head_loss, total_loss
from .nn import Conv2d, Module
from .toydet.detector import (
    Detector,
    DetectorSpec,
    Targets,
    build_targets,
    decode_and_nms,
    proposals_from_teacher,
    task_loss_parts,
)

log = logging.getLogger(__name__)

METRIC_KEYS = ("epoch", "lr", "task_loss", "l_fd", "l_fa", "l_glob", "l_cls_h", "l_loc_h", "l_rpn", "total", "val_map")
EVAL_BATCH = 32


class SGD:
    """SGD with momentum and L2 weight decay, optional global-norm clipping."""

    def __init__(self, params: list, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros(p.shape) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float, grad_clip: float | None = None) -> float:
        grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in self.params]
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
        factor = 1.0
        if grad_clip is not None and norm > grad_clip:
            factor = grad_clip / (norm + 1e-12)
        for p, g, v in zip(self.params, grads, self.velocity):
            d = g * factor + self.weight_decay * p.data
            v *= self.momentum
            v += d
            p.data = p.data - lr * v
        return norm


class AfdObjective(Module):
    """Student-side distillation parameters: per-level channel adapters and GC blocks."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        c_t = cfg.teacher.fpn_channels
        c_s = cfg.student.fpn_channels
        n_levels = len(cfg.teacher.strides)
        self.cfg = cfg
        self.adapt = [Conv2d(c_s, c_t, 1, rng=rng) for _ in range(n_levels)]
        self.gc = [GcBlockParams(c_t, cfg.gc.reduction, cfg.gc.loss_weight, rng=rng) for _ in range(n_levels)]
        self.anchors = cfg.student.anchors()

    def adapted(self, feats_s: list) -> list:
        return [a(f) for a, f in zip(self.adapt, feats_s)]

    def masks(self, feats_t, adapted, outputs_t=None):
        props = None
        if self.cfg.mask.use_proposal_mask:
            props = proposals_from_teacher(outputs_t, self.cfg.teacher, self.cfg.proposals.top_n,
                                           self.cfg.proposals.iou_thresh)
        return compute_masks(feats_t, adapted, self.cfg.mask, props, self.cfg.teacher.strides)

    def components(self, feats_t, outputs_t, feats_s, outputs_s, masks=None) -> dict:
        """Every distillation term (no RPN) for one batch."""
        adapted = self.adapted(feats_s)
        if masks is None:
            masks = self.masks(feats_t, adapted, outputs_t)
        a = self.cfg.student.num_anchors
        return {
            "l_fd": feature_distill_loss(feats_t, adapted, None, masks),
            "l_fa": feature_attn_loss(feats_t, adapted, self.cfg.mask.instance_size),
            "l_glob": global_loss(feats_t, adapted, self.gc),
            "l_cls_h": cls_head_loss(outputs_s.cls, outputs_t.cls, masks, a),
            "l_loc_h": loc_head_loss(outputs_s.reg, outputs_t.reg, self.anchors, masks),
        }


@dataclass
class Dataset:
    images: np.ndarray
    scenes: list
    targets: Targets | None = None

    def __len__(self):
        return len(self.scenes)


def make_split(scenes: list, spec: DetectorSpec | None = None) -> Dataset:
    images = np.stack([s.image for s in scenes]) if scenes else np.zeros((0, 3, 64, 64))
    targets = build_targets(spec, scenes) if (spec is not None and scenes) else None
    return Dataset(images, scenes, targets)


def _batch_targets(t: Targets, idx: np.ndarray) -> Targets:
    return Targets(t.labels[idx], t.classes[idx], t.offsets[idx])


def evaluate_model(model: Detector, data: Dataset, cfg: RunConfig):
    """``(mAP, per_class_ap, curves)`` on a split."""
    dets = []
    with T.no_grad():
        for i in range(0, len(data), EVAL_BATCH):
            _, out = model(data.images[i : i + EVAL_BATCH])
            dets.extend(decode_and_nms(out, model.spec, cfg.eval.score_thresh, cfg.eval.nms_iou))
    gts = [(s.boxes, s.classes) for s in data.scenes]
    aps, curves = evaluate_detections(dets, gts, model.spec.num_classes, cfg.eval.match_iou)
    return mean_ap(aps), aps, curves


def _order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 3, epoch]).permutation(n)


def _metrics_line(epoch, lr, sums: dict, steps: int, val_map: float) -> dict:
    line = {"epoch": epoch, "lr": lr}
    for k in METRIC_KEYS[2:-1]:
        v = sums.get(k)
        line[k] = None if v is None else v / steps
    line["val_map"] = val_map
    return line


def _run_epochs(tc: TrainConfig, seed: int, train: Dataset, params: list, step_fn, on_epoch):
    opt = SGD(params, tc.momentum, tc.weight_decay)
    it = 0
    for epoch in range(tc.epochs):
        order = _order(seed, epoch, len(train))
        sums: dict = {}
        steps = 0
        for start in range(0, len(order), tc.batch_size):
            idx = order[start : start + tc.batch_size]
            lr = tc.lr_at(epoch, it)
            opt.zero_grad()
            objective, parts = step_fn(idx)
            T.backward(objective)
            opt.step(lr, tc.grad_clip)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            steps += 1
            it += 1
        on_epoch(epoch, tc.lr_at(epoch, tc.warmup_iters), sums, max(steps, 1))


def train_teacher(cfg: RunConfig, train: Dataset, val: Dataset, emit=None) -> tuple:
    """Fit the teacher on the task loss alone. Returns ``(model, metrics)``."""
    spec = cfg.teacher
    model = Detector(spec, np.random.default_rng([cfg.seed, 0]))
    metrics = []

    def step(idx):
        _, out = model(train.images[idx])
        l_cls, l_rpn = task_loss_parts(out, _batch_targets(train.targets, idx), spec,
                                       cfg.loss.lambda1, cfg.loss.lambda2)
        obj = T.add(l_cls, l_rpn)
        return obj, {"task_loss": obj.item(), "l_rpn": l_rpn.item(), "total": obj.item()}

    def on_epoch(epoch, lr, sums, steps):
        val_map = evaluate_model(model, val, cfg)[0] if len(val) else None
        line = _metrics_line(epoch + 1, lr, sums, steps, val_map)
        metrics.append(line)
        log.info("teacher epoch %d task %.4f val_map %s", epoch + 1, line["task_loss"], val_map)
        if emit:
            emit(line)

    _run_epochs(cfg.teacher_train, cfg.seed, train, model.parameters(), step, on_epoch)
    return model, metrics


def distill(cfg: RunConfig, teacher: Detector, train: Dataset, val: Dataset, mode: str = "afd",
            seed: int | None = None, emit=None) -> tuple:
    """Train a student with (``afd``) or without (``baseline``) distillation.

    Both modes draw the student initialisation and batch order from the same
    streams, so for equal seeds they start from identical bytes.
    Returns ``(student, objective_or_None, metrics)``.
    """
    if mode not in ("afd", "baseline"):
        raise ValueError(f"unknown mode {mode!r}")
    seed = cfg.seed if seed is None else seed
    spec = cfg.student
    teacher.requires_grad_(False).zero_grad()
    student = Detector(spec, np.random.default_rng([seed, 1]))
    objective = AfdObjective(cfg, np.random.default_rng([seed, 2])) if mode == "afd" else None
    params = student.parameters() + (objective.parameters() if objective else [])
    metrics = []

    def step(idx):
        images = train.images[idx]
        feats_s, out_s = student(images)
        l_cls, l_rpn = task_loss_parts(out_s, _batch_targets(train.targets, idx), spec,
                                       cfg.loss.lambda1, cfg.loss.lambda2)
        task = T.add(l_cls, l_rpn)
        if objective is None:
            return task, {"task_loss": task.item(), "l_rpn": l_rpn.item(), "total": task.item()}
        with T.no_grad():
            feats_t, out_t = teacher(images)
        comps = objective.components(feats_t, out_t, feats_s, out_s)
        comps["l_rpn"] = l_rpn
        total = total_loss(comps, cfg.loss)
        full = T.add(l_cls, total)
        parts = {k: v.item() for k, v in comps.items()}
        parts.update(task_loss=task.item(), total=full.item())
        return full, parts

    def on_epoch(epoch, lr, sums, steps):
        val_map = evaluate_model(student, val, cfg)[0] if len(val) else None
        line = _metrics_line(epoch + 1, lr, sums, steps, val_map)
        metrics.append(line)
        log.info("%s seed %d epoch %d total %.4f val_map %s", mode, seed, epoch + 1, line["total"], val_map)
        if emit:
            emit(line)

    _run_epochs(cfg.student_train, seed, train, params, step, on_epoch)
    return student, objective, metrics


# ---------------------------------------------------------------------------
# checkpoints


def save_model(path, model: Detector, cfg: RunConfig, role: str, epoch: int, seed: int,
               extra: Module | None = None, mode: str | None = None) -> str:
    tensors = {f"detector.{k}": v for k, v in model.state_dict().items()}
    if extra is not None:
        tensors.update({f"afd.{k}": v for k, v in extra.state_dict().items()})
    meta = {
        "role": role,
        "mode": mode,
        "epoch": epoch,
        "seed": seed,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "detector": model.spec.to_dict(),
    }
    return checkpoint.save(path, tensors, meta)


def load_model(path, expect: DetectorSpec | None = None) -> tuple:
    """Load ``(detector, meta)``; ``expect`` pins the architecture."""
    tensors, meta = checkpoint.load(path)
    if "detector" not in meta:
        raise CheckpointMismatch(f"{path}: not a detector checkpoint")
    spec_doc = dict(meta["detector"])
    spec = DetectorSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in spec_doc.items()})
    if expect is not None and spec != expect:
        raise CheckpointMismatch(f"{path}: architecture {spec} does not match {expect}")
    model = Detector(spec)
    state = {k[len("detector."):]: v for k, v in tensors.items() if k.startswith("detector.")}
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointMismatch(f"{path}: {exc}") from None
    return model, meta


def write_metrics(path, metrics: list):
    with open(path, "w") as fh:
        for line in metrics:
            fh.write(json.dumps(line, sort_keys=False) + "\n")
