"""A miniature teacher/student run through the Python API.

The real experiment lives behind the ``afd`` command (see the README). This
shrinks every size so the whole thing finishes in about a minute; expect
lower numbers than the full run.

Run with ``python3 demos/tiny_distillation.py``.
"""

import numpy as np

from afd.config import RunConfig
from afd.toydet.scenes import make_dataset
from afd.train import distill, evaluate_model, make_split, train_teacher

cfg = RunConfig.from_dict({
    "data": {"train": 256, "val": 64},
    "teacher": {"base_channels": 16},
    "student": {"base_channels": 4},
    "teacher_train": {"epochs": 16, "lr": 0.02, "warmup_iters": 50},
    "student_train": {"epochs": 12, "warmup_iters": 50},
})
scenes = make_dataset(0, 320, cfg.data.scene)
print("first scene:", len(scenes[0].boxes), "objects, classes", scenes[0].classes)

split = lambda spec: (make_split(scenes[:256], spec), make_split(scenes[256:], spec))

teacher, hist = train_teacher(cfg, *split(cfg.teacher))
for row in hist:
    print(f"teacher epoch {row['epoch']}: task {row['task_loss']:.3f} val mAP {row['val_map']:.3f}")

train, val = split(cfg.student)
for mode in ("baseline", "afd"):
    student, objective, hist = distill(cfg, teacher, train, val, mode, seed=0)
    last = hist[-1]
    parts = "  ".join(f"{k} {last[k]:.3f}" for k in ("l_fd", "l_fa", "l_glob", "l_cls_h", "l_loc_h")
                      if last.get(k) is not None)
    print(f"{mode}: val mAP {last['val_map']:.3f}  {parts}")

# evaluate_model gives per-class AP as well
m, aps, _ = evaluate_model(student, val, cfg)
print("afd student per-class AP", np.round(list(aps.values()), 3))
