"""Desk-scale detection world: synthetic scenes and tiny teacher/student detectors."""

from .detector import (
    Detection,
    Detector,
    DetectorSpec,
    HeadOutputs,
    Targets,
    assign_targets,
    build_targets,
    decode_and_nms,
    forward,
    proposals_from_teacher,
    task_loss,
    task_loss_parts,
)
from .scenes import Scene, SceneConfig, gen_scene, make_dataset

__all__ = [
    "Detection",
    "Detector",
    "DetectorSpec",
    "HeadOutputs",
    "Targets",
    "assign_targets",
    "build_targets",
    "decode_and_nms",
    "forward",
    "proposals_from_teacher",
    "task_loss",
    "task_loss_parts",
    "Scene",
    "SceneConfig",
    "gen_scene",
    "make_dataset",
]
