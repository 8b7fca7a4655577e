"""Command-line entry point: ``afd <command> [flags]``.

Commands: gen-data, train-teacher, distill, eval, gradcheck, report.
Every command is deterministic given its flags and input files.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import checkpoint
from . import gradcheck as gradcheck_mod
from .config import RunConfig
from .errors import AfdError, CheckpointMismatch, ConfigError, GradCheckFailure
from .evaluate import write_pr_csv
from .toydet.scenes import SceneConfig, arrays_to_scenes, make_dataset, scenes_to_arrays
from .train import (
    METRIC_KEYS,
    distill,
    evaluate_model,
    load_model,
    make_split,
    save_model,
    train_teacher,
    write_metrics,
)

log = logging.getLogger("afd")


def workers() -> int:
    """Worker cap from ``AFD_THREADS`` (default 1)."""
    raw = os.environ.get("AFD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"AFD_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(n, os.cpu_count() or 1))


def load_config(path) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def save_scenes(path, scenes: list, meta: dict, image_size: int) -> str:
    return checkpoint.save(path, scenes_to_arrays(scenes, image_size), {"kind": "scenes", **meta})


def load_scenes(path) -> list:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "scenes":
        raise CheckpointMismatch(f"{path}: not a scene dataset")
    return arrays_to_scenes(tensors)


def split(cfg: RunConfig, scenes: list, spec):
    """The first ``data.train`` scenes train, the next ``data.val`` validate."""
    need = cfg.data.train + cfg.data.val
    if len(scenes) < need:
        raise ConfigError(f"dataset holds {len(scenes)} scenes, config needs {need}")
    train = make_split(scenes[: cfg.data.train], spec)
    val = make_split(scenes[cfg.data.train : need], spec)
    return train, val


def _metrics_path(args) -> Path:
    return Path(args.metrics) if args.metrics else Path(str(args.out) + ".metrics.jsonl")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    scene_cfg = load_config(args.config).data.scene if args.config else SceneConfig()
    scenes = make_dataset(args.seed, args.count, scene_cfg, workers())
    meta = {"seed": args.seed, "count": args.count, "scene": dataclasses.asdict(scene_cfg)}
    digest = save_scenes(args.out, scenes, meta, scene_cfg.image_size)
    print(json.dumps({"count": len(scenes), "sha256": digest}))
    return 0


def cmd_train_teacher(args) -> int:
    cfg = load_config(args.config)
    train, val = split(cfg, load_scenes(args.data), cfg.teacher)
    model, metrics = train_teacher(cfg, train, val)
    write_metrics(_metrics_path(args), metrics)
    digest = save_model(args.out, model, cfg, "teacher", cfg.teacher_train.epochs, cfg.seed)
    final = metrics[-1]["val_map"] if metrics else None
    print(json.dumps({"val_map": final, "sha256": digest}))
    return 0


def cmd_distill(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    teacher, _ = load_model(args.teacher_ckpt, expect=cfg.teacher)
    train, val = split(cfg, load_scenes(args.data), cfg.student)
    student, objective, metrics = distill(cfg, teacher, train, val, args.mode, seed)
    write_metrics(_metrics_path(args), metrics)
    digest = save_model(args.out, student, cfg, "student", cfg.student_train.epochs, seed, objective, args.mode)
    final = metrics[-1]["val_map"] if metrics else None
    print(json.dumps({"mode": args.mode, "seed": seed, "val_map": final, "sha256": digest}))
    return 0


def cmd_eval(args) -> int:
    model, meta = load_model(args.ckpt)
    cfg = RunConfig.from_dict(meta["config"])
    _, val = split(cfg, load_scenes(args.data), model.spec)
    m, aps, curves = evaluate_model(model, val, cfg)
    pr_path = Path(args.pr_csv) if args.pr_csv else Path(str(args.ckpt) + ".pr.csv")
    write_pr_csv(pr_path, curves)
    print(json.dumps({"aps": {str(k): v for k, v in aps.items()}, "map": m}))
    return 0


def cmd_gradcheck(args) -> int:
    scopes = gradcheck_mod.SCOPES if args.scope == "all" else (args.scope,)
    failed = False
    for scope in scopes:
        for c in gradcheck_mod.run(scope, args.seed, raise_on_failure=False):
            print(f"{scope:<8s} {c}")
            failed |= not c.ok
    if failed:
        print("gradcheck: FAILED", file=sys.stderr)
        return 1
    return 0


def read_metrics(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def cmd_report(args) -> int:
    runs = {}
    for p in args.runs:
        label = Path(p).name.split(".")[0]
        if label in runs:
            raise ConfigError(f"duplicate run label {label!r}; rename one of the metrics files")
        runs[label] = {line["epoch"]: line for line in read_metrics(p)}
    epochs = sorted({e for lines in runs.values() for e in lines})
    for label, lines in runs.items():
        if sorted(lines) != epochs:
            raise ConfigError(f"run {label!r} does not cover the shared epoch axis")
    keys = [k for k in METRIC_KEYS if k not in ("epoch",)]
    header = ["epoch"] + [f"{label}_{k}" for label in runs for k in keys]
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for e in epochs:
            row = [e]
            for lines in runs.values():
                row.extend("" if lines[e].get(k) is None else repr(lines[e][k]) for k in keys)
            w.writerow(row)
    print(json.dumps({"runs": list(runs), "epochs": len(epochs), "out": str(args.out)}))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="afd", description="Attention-based feature distillation toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="take the scene settings from this run config")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="train the teacher on the task loss")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="JSON-lines metrics path (default: <out>.metrics.jsonl)")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="train a student with or without distillation")
    p.add_argument("--config")
    p.add_argument("--teacher-ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("afd", "baseline"), default="afd")
    p.add_argument("--seed", type=int, help="student seed (default: config seed)")
    p.add_argument("--metrics", help="JSON-lines metrics path (default: <out>.metrics.jsonl)")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="per-class AP and mAP on the checkpoint's validation split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pr-csv", help="precision/recall CSV path (default: <ckpt>.pr.csv)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--scope", choices=(*gradcheck_mod.SCOPES, "all"), default="ops")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="merge metrics files into one CSV")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except GradCheckFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (AfdError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
