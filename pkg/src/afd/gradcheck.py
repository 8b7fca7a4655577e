"""Finite-difference gradient suites for ops, losses and the full objective.

Each check compares tape gradients with central differences and reports a
norm-wise relative error per input tensor::

    err = |g_tape - g_fd| / max(|g_tape|, |g_fd|, floor)

Suites return lists of :class:`Check`; :func:`run` raises
:class:`~afd.errors.GradCheckFailure` when any of them exceeds its tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import MaskConfig, compute_masks, global_masks_batch, local_masks_batch
from .errors import GradCheckFailure
from .featnorm import normalize_features
from .gcontext import GcBlockParams, gc_forward, global_loss
from .losses import (
    cls_head_loss,
    feature_attn_loss,
    feature_distill_loss,
    loc_head_loss,
    rpn_loss,
)

OPS_TOL = 1e-6
LOSS_TOL = 1e-6
PIPELINE_TOL = 1e-4
FLOOR = 1e-12
SCOPES = ("ops", "losses", "pipeline")


@dataclass
class Check:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(self.error < self.tol)

    def __str__(self):
        return f"{'ok  ' if self.ok else 'FAIL'} {self.name:<40s} rel_err={self.error:.3e} tol={self.tol:.0e}"


def relative_error(a, b, floor: float = FLOOR) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def check_fn(name: str, fn, inputs: list, tol: float, h: float = 1e-6) -> Check:
    """Check ``fn(*tensors) -> scalar`` against central differences in every input."""
    leaves = [T.Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    tape = T.gradients(fn(*leaves), leaves)
    worst = 0.0
    for i, x in enumerate(inputs):
        def f(t, i=i):
            args = [T.Tensor(np.array(v, dtype=np.float64)) for v in inputs]
            args[i] = t
            return fn(*args)

        worst = max(worst, relative_error(tape[i], T.finite_diff_grad(f, x, h)))
    return Check(name, worst, tol)


def check_params(name: str, loss_fn, params: list, tol: float, h: float = 1e-5) -> Check:
    """Check ``loss_fn() -> scalar`` against central differences in every parameter tensor.

    Parameters are perturbed in place, so ``loss_fn`` must read them afresh.
    Tensors whose gradient is exactly zero by symmetry (a bias in front of a
    softmax, say) would otherwise compare rounding noise with zero; the floor
    turns the check into an absolute one at ten times the rounding noise of
    the central differences.
    """
    loss = loss_fn()
    tape = T.gradients(loss, params)
    worst = 0.0
    for p, g in zip(params, tape):
        noise = 10 * np.sqrt(p.data.size) * np.finfo(np.float64).eps * (1.0 + abs(loss.item())) / h
        floor = max(FLOOR, noise / tol)
        fd = np.zeros(p.shape)
        flat = p.data.reshape(-1)  # a view: edits reach the parameter
        fd_flat = fd.reshape(-1)
        with T.no_grad():
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                fp = loss_fn().item()
                flat[j] = orig - h
                fm = loss_fn().item()
                flat[j] = orig
                fd_flat[j] = (fp - fm) / (2.0 * h)
        worst = max(worst, relative_error(g, fd, floor))
    return Check(name, worst, tol)


def _weighted(out: T.Tensor) -> T.Tensor:
    # fixed random weights stop symmetric outputs from hiding errors
    return T.sum(T.mul(out, np.random.default_rng(list(out.shape)).normal(size=out.shape)))


def _away_from(rng, shape, margin=0.1, spread=1.0):
    x = rng.normal(scale=spread, size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


# ---------------------------------------------------------------------------
# suites


def ops_suite(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    s = (2, 3, 4)
    a, b = rng.normal(size=s), rng.normal(size=s)
    pos = rng.uniform(0.5, 2.0, size=s)
    far = _away_from(rng, s)
    gap = a + _away_from(rng, s)
    checks = []

    def add(name, fn, *inputs):
        checks.append(check_fn(name, lambda *t: _weighted(fn(*t)), list(inputs), OPS_TOL))

    add("add", T.add, a, b)
    add("sub", T.sub, a, b)
    add("mul", T.mul, a, b)
    add("div", T.div, a, pos)
    add("neg", T.neg, a)
    add("scale", lambda x: T.scale(x, -1.7), a)
    add("relu", T.relu, far)
    add("abs", T.abs, far)
    add("square", T.square, a)
    add("sqrt", T.sqrt, pos)
    add("exp", T.exp, a)
    add("log", T.log, pos)
    add("sigmoid", T.sigmoid, a)
    add("softplus", T.softplus, a)
    add("maximum", T.maximum, a, gap)
    add("minimum", T.minimum, a, gap)
    add("clamp", lambda x: T.clamp(x, -0.05, 0.05), far)
    add("smooth_l1", lambda x: T.smooth_l1(x, 1.0), far + np.where(np.abs(np.abs(far) - 1) < 0.1, 0.3, 0.0))
    add("softmax", lambda x: T.softmax(x, (1, 2)), a)
    mask = rng.random(s) > 0.3
    mask[:, 0, 0] = True
    add("softmax_masked", lambda x: T.softmax(x, (1, 2), mask=mask), a)
    add("log_softmax", lambda x: T.log_softmax(x, 2), a)
    add("sum", lambda x: T.reshape(T.sum(x, (0, 2)), (1, 3)), a)
    add("mean", lambda x: T.mean(x, 1), a)
    add("reshape", lambda x: T.reshape(x, (4, 6)), a)
    add("transpose", lambda x: T.transpose(x, (2, 0, 1)), a)
    add("expand", lambda x: T.expand(x, (2, 3, 4)), rng.normal(size=(2, 1, 4)))
    add("concat", lambda x, y: T.concat([x, y], 1), a, b)
    add("stack", lambda x, y: T.stack([x, y], 0), a, b)
    add("getitem_basic", lambda x: x[:, 1:, ::2], a)
    add("getitem_fancy", lambda x: x[np.array([0, 1, 1]), np.array([2, 0, 2])], a)
    add("upsample_nearest", lambda x: T.upsample_nearest(x, 2), rng.normal(size=(1, 2, 3, 3)))
    img = rng.normal(size=(2, 3, 4, 4))
    add("conv2d_3x3", lambda x, k, c: T.conv2d(x, k, c, 1, 1), img, rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2))
    add("conv2d_3x3_s2", lambda x, k, c: T.conv2d(x, k, c, 2, 1), img, rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2))
    add("conv2d_1x1", lambda x, k, c: T.conv2d(x, k, c), img, rng.normal(size=(4, 3, 1, 1)), rng.normal(size=4))
    add("softmax_of_mean", lambda x: T.softmax(T.mean(T.abs(x), 1), 1), far)
    return checks


def losses_suite(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    n, c, hh = 2, 8, 4
    shapes = [(n, c, hh, hh), (n, c, hh // 2, hh // 2)]
    f_t = [rng.normal(size=s) for s in shapes]
    f_s = [rng.normal(size=s) for s in shapes]
    cfg = MaskConfig(temperature=0.5, instance_size=2, detach=False)
    region = np.ones((n, hh, hh), dtype=bool)
    masks = compute_masks([T.Tensor(x) for x in f_t], [T.Tensor(x) for x in f_s], cfg)
    checks = []

    def add(name, fn, inputs, tol=LOSS_TOL):
        checks.append(check_fn(name, fn, inputs, tol))

    def two(fn):
        return lambda s0, s1: fn([T.Tensor(f_t[0]), T.Tensor(f_t[1])], [s0, s1])

    def frozen(m):
        return type(masks)([type(lv)(*(T.Tensor(v.data) if isinstance(v, T.Tensor) else v for v in lv)) for lv in m])

    fixed = frozen(masks)
    add("local_masks", lambda t, s: _weighted(local_masks_batch(t, s, region, cfg).spatial), [f_t[0], f_s[0]])
    add("local_channel_mask", lambda t, s: _weighted(local_masks_batch(t, s, region, cfg).channel), [f_t[0], f_s[0]])
    add("global_masks", lambda t, s: T.add(*(_weighted(m) for m in global_masks_batch(t, s, region, cfg))),
        [f_t[0], f_s[0]])
    add("feature_norm", lambda x: _weighted(normalize_features(x)), [f_s[0]])
    add("feature_distill", two(lambda ft, fs: feature_distill_loss(ft, fs, None, fixed)), f_s)
    add("feature_attention", two(lambda ft, fs: feature_attn_loss(ft, fs, 2)), f_s)
    add("feature_distill_live_masks",
        two(lambda ft, fs: feature_distill_loss(ft, fs, None, compute_masks(ft, fs, cfg))), f_s)

    gc = GcBlockParams(c, reduction=2, rng=np.random.default_rng(seed + 2))
    gc.l3.weight.data[:] = rng.normal(scale=0.3, size=gc.l3.weight.shape)
    add("gc_forward", lambda x: _weighted(gc_forward(x, gc)), [f_s[0]])
    add("global_loss", two(lambda ft, fs: global_loss(ft, fs, [gc, gc])), f_s)
    checks.append(check_params("global_loss_params",
                               lambda: global_loss([T.Tensor(f_t[0])], [T.Tensor(f_s[0])], [gc]),
                               gc.parameters(), LOSS_TOL, h=1e-6))

    a, k = 2, 4
    lt = [rng.normal(size=(n, a * k, *s[2:])) for s in shapes]
    ls = [rng.normal(size=(n, a * k, *s[2:])) for s in shapes]
    add("cls_head", lambda s0, s1: cls_head_loss([s0, s1], [T.Tensor(x) for x in lt], fixed, a), ls)
    anchors = []
    for (_, _, h_, w_), stride in zip(shapes, (8, 16)):
        cy, cx = np.meshgrid((np.arange(h_) + 0.5) * stride, (np.arange(w_) + 0.5) * stride, indexing="ij")
        grid = [np.stack([cx - sz / 2, cy - sz / 2, cx + sz / 2, cy + sz / 2], -1) for sz in (10.0, 15.0)]
        anchors.append(np.stack(grid))
    kt = [rng.normal(scale=0.2, size=(n, 4 * a, *s[2:])) for s in shapes]
    ks = [rng.normal(scale=0.2, size=(n, 4 * a, *s[2:])) for s in shapes]
    add("loc_head", lambda s0, s1: loc_head_loss([s0, s1], [T.Tensor(x) for x in kt], anchors, fixed), ks)

    m = 40
    labels = rng.choice([1, 0, -1], size=m, p=[0.3, 0.5, 0.2])
    targets = rng.normal(size=(m, 4))
    offs = targets + _away_from(rng, (m, 4), 0.1, 1.0)
    offs = np.where(np.abs(np.abs(offs - targets) - 1.0) < 0.1, offs + 0.3, offs)
    add("rpn", lambda o, r: rpn_loss(o, r, labels, targets, 1.0, 2.0), [rng.normal(size=m), offs])
    return checks


def _micro_setup(seed: int, detach: bool):
    # import here: the pipeline suite pulls in the whole training stack
    from .config import RunConfig
    from .toydet.detector import Detector, build_targets, flatten_cls, mine_negatives
    from .toydet.scenes import gen_scene
    from .train import AfdObjective

    cfg = RunConfig.from_dict({
        "teacher": {"base_channels": 4},
        "student": {"base_channels": 2},
        "gc": {"reduction": 2},
        "mask": {"detach": detach, "temperature": 0.5},
    })
    scenes = [gen_scene(seed * 2 + i, cfg.data.scene) for i in range(2)]
    images = np.stack([s.image for s in scenes])
    targets = build_targets(cfg.student, scenes)
    teacher = Detector(cfg.teacher, np.random.default_rng([seed, 0]))
    teacher.requires_grad_(False)
    student = Detector(cfg.student, np.random.default_rng([seed, 1]))
    objective = AfdObjective(cfg, np.random.default_rng([seed, 2]))
    # zero biases put dead 3x3 patches exactly on the relu kink, and a zero L3
    # starves the GC parameters of gradient, so move both off the defaults
    jitter = np.random.default_rng([seed, 4])
    for name, p in [*student.named_parameters(), *objective.named_parameters()]:
        if name.endswith("bias") or name.endswith("l3.weight"):
            p.data = p.data + jitter.normal(scale=0.1, size=p.shape)
    with T.no_grad():
        feats_t, out_t = teacher(images)
        _, out_s = student(images)
        logits = flatten_cls(out_s, cfg.student.num_anchors).data
    lp = logits - logits.max(2, keepdims=True)
    lp = lp - np.log(np.exp(lp).sum(2, keepdims=True))
    ce = -np.take_along_axis(lp, targets.classes[..., None], 2)[..., 0]
    sampled = mine_negatives(ce, targets.labels)
    return cfg, images, targets, sampled, feats_t, out_t, student, objective


def pipeline_objective(cfg, images, targets, sampled, feats_t, out_t, student, objective, masks=None):
    """Task loss plus the full distillation objective on one micro-batch."""
    from .losses import total_loss
    from .toydet.detector import task_loss_parts

    feats_s, out_s = student(images)
    l_cls, l_rpn = task_loss_parts(out_s, targets, cfg.student, cfg.loss.lambda1, cfg.loss.lambda2, sampled)
    comps = objective.components(feats_t, out_t, feats_s, out_s, masks)
    comps["l_rpn"] = l_rpn
    return T.add(l_cls, total_loss(comps, cfg.loss))


def pipeline_suite(seed: int = 0) -> list:
    """Full objective on a 2-image micro-batch against every trainable parameter.

    Hard-negative sampling is frozen at the starting point; the mining
    selection is piecewise constant and would otherwise jump under perturbation.
    """
    checks = []
    # live masks: gradient flows through the student side of every mask
    setup = _micro_setup(seed, detach=False)
    student, objective = setup[-2], setup[-1]
    params = student.parameters() + objective.parameters()
    checks.append(check_params("pipeline_live_masks", lambda: pipeline_objective(*setup), params, PIPELINE_TOL))
    # frozen masks, precomputed once as in the default training path
    setup = _micro_setup(seed, detach=True)
    cfg, images, _, _, feats_t, out_t, student, objective = setup
    with T.no_grad():
        masks = objective.masks(feats_t, objective.adapted(student(images)[0]), out_t)
    params = student.parameters() + objective.parameters()
    checks.append(check_params("pipeline_frozen_masks", lambda: pipeline_objective(*setup, masks=masks),
                               params, PIPELINE_TOL))
    return checks


SUITES = {"ops": ops_suite, "losses": losses_suite, "pipeline": pipeline_suite}


def run(scope: str, seed: int = 0, raise_on_failure: bool = True) -> list:
    if scope not in SUITES:
        raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")
    checks = SUITES[scope](seed)
    bad = [c for c in checks if not c.ok]
    if bad and raise_on_failure:
        raise GradCheckFailure("; ".join(str(c) for c in bad))
    return checks
