"""Run configuration: a strict JSON document mapped onto frozen dataclasses."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .attention import MaskConfig
from .errors import ConfigError
from .losses import LossWeights
from .toydet.detector import DetectorSpec
from .toydet.scenes import SceneConfig


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 24
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    # None places the two decays at 16/24 and 22/24 of the run
    decay_epochs: tuple | None = None
    decay_factor: float = 0.1
    warmup_iters: int = 100
    grad_clip: float | None = 10.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr > 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("invalid optimizer settings")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError("decay_factor must lie in (0, 1]")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive or null")
        if self.decay_epochs is not None:
            object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))

    def milestones(self) -> tuple:
        if self.decay_epochs is not None:
            return self.decay_epochs
        return (round(self.epochs * 16 / 24), round(self.epochs * 22 / 24))

    def lr_at(self, epoch: int, iteration: int) -> float:
        """Step schedule with linear warmup over the first ``warmup_iters`` iterations."""
        lr = self.lr * self.decay_factor ** sum(epoch >= m for m in self.milestones())
        if self.warmup_iters and iteration < self.warmup_iters:
            lr *= (iteration + 1) / self.warmup_iters
        return lr


@dataclass(frozen=True)
class DataConfig:
    train: int = 512
    val: int = 128
    scene: SceneConfig = SceneConfig()

    def __post_init__(self):
        if self.train < 0 or self.val < 0:
            raise ConfigError("split sizes must be non-negative")


@dataclass(frozen=True)
class GcConfig:
    reduction: int = 4
    loss_weight: float = 5e-4


@dataclass(frozen=True)
class ProposalConfig:
    top_n: int = 10
    iou_thresh: float = 0.7

    def __post_init__(self):
        if self.top_n < 1:
            raise ConfigError("top_n must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    match_iou: float = 0.5


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = DataConfig()
    teacher: DetectorSpec = DetectorSpec(base_channels=32)
    student: DetectorSpec = DetectorSpec(base_channels=8)
    mask: MaskConfig = MaskConfig()
    loss: LossWeights = LossWeights()
    gc: GcConfig = GcConfig()
    teacher_train: TrainConfig = TrainConfig(lr=0.02)
    student_train: TrainConfig = TrainConfig()
    proposals: ProposalConfig = ProposalConfig()
    eval: EvalConfig = EvalConfig()

    def __post_init__(self):
        self.validate()

    def validate(self):
        t, s = self.teacher, self.student
        if t.num_classes != s.num_classes or t.num_classes != self.data.scene.num_classes:
            raise ConfigError("teacher, student and data must agree on num_classes")
        if t.image_size != s.image_size or t.image_size != self.data.scene.image_size:
            raise ConfigError("teacher, student and data must agree on image_size")
        if (t.strides, t.anchor_sizes, t.anchor_scales) != (s.strides, s.anchor_sizes, s.anchor_scales):
            raise ConfigError("teacher and student must share the anchor layout")
        if s.base_channels >= t.base_channels:
            raise ConfigError("the student must be narrower than the teacher")
        if t.fpn_channels % self.gc.reduction:
            raise ConfigError("gc.reduction must divide the teacher channel count")
        for h, w in t.level_shapes():
            self.mask.check_divisible(h, w)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        return _from_plain(cls, doc, "config")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(doc)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def _from_plain(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in doc.items():
        default = getattr(cls(), name) if cls is not RunConfig else getattr(_DEFAULT, name)
        if dataclasses.is_dataclass(default):
            # nested sections merge onto the section default
            merged = {**_to_plain(default), **(value if isinstance(value, dict) else {})}
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{name}: expected an object")
            kwargs[name] = _from_plain(type(default), merged, f"{where}.{name}")
        elif value is None:
            if "None" not in str(fields[name].type):
                raise ConfigError(f"{where}.{name}: may not be null")
            kwargs[name] = None
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        elif isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{where}.{name}: expected a boolean")
        elif isinstance(default, (int, float)) and not isinstance(default, bool) and (
            isinstance(value, bool) or not isinstance(value, (int, float))
        ):
            raise ConfigError(f"{where}.{name}: expected a number")
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{where}.{name}: expected a string")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


_DEFAULT = RunConfig()
