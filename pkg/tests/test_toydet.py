import math

import numpy as np
import pytest

import oracles
from afd import boxes as B
from afd import gradcheck
from afd import tensor as T
from afd.toydet import detector as D
from afd.toydet.scenes import BACKGROUND, MAX_OBJECTS, SceneConfig, gen_scene, make_dataset, shape_mask

SPEC = D.DetectorSpec(base_channels=4)


def unflatten(flat, spec, depth):
    """Inverse of the detector's flattening: ``[N, M, depth]`` to per-level maps."""
    out, start = [], 0
    a = spec.num_anchors
    for h, w in spec.level_shapes():
        m = a * h * w
        part = flat[:, start : start + m].reshape(flat.shape[0], a, h, w, depth)
        out.append(T.Tensor(part.transpose(0, 1, 4, 2, 3).reshape(flat.shape[0], a * depth, h, w)))
        start += m
    return out


def outputs_from(cls_flat, reg_flat, obj_flat, spec):
    objs, start = [], 0
    for h, w in spec.level_shapes():
        m = spec.num_anchors * h * w
        objs.append(T.Tensor(obj_flat[:, start : start + m].reshape(-1, spec.num_anchors, h, w)))
        start += m
    return D.HeadOutputs(unflatten(cls_flat, spec, cls_flat.shape[2]), unflatten(reg_flat, spec, 4), objs)


# ---------------------------------------------------------------------------
# scenes


def test_scene_is_deterministic():
    a, b = gen_scene(123), gen_scene(123)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.boxes, b.boxes)
    assert [s.image.tobytes() for s in make_dataset(5, 4)] == [s.image.tobytes() for s in make_dataset(5, 4)]


def test_scene_invariants():
    for s in make_dataset(1, 50):
        assert 1 <= len(s.classes) <= MAX_OBJECTS
        assert s.image.shape == (3, 64, 64) and s.image.min() >= 0 and s.image.max() <= 1
        w, h = s.boxes[:, 2] - s.boxes[:, 0], s.boxes[:, 3] - s.boxes[:, 1]
        assert np.all(w >= 6) and np.all(h >= 6)
        assert np.all(s.boxes >= 0) and np.all(s.boxes <= 64)


def test_clean_disk_is_brighter_than_background():
    cfg = SceneConfig(noise_sigma=0.0, count_probs=(1, 0, 0, 0, 0, 0))
    seed = next(s for s in range(100) if gen_scene(s, cfg).classes.tolist() == [0])
    sc = gen_scene(seed, cfg)
    x0, y0, x1, y1 = sc.boxes[0].astype(int)
    fg = np.any(sc.image != BACKGROUND, axis=0)
    # the only non-background pixels are the disk's, and each is brighter in every channel
    assert fg.sum() == shape_mask("disk", x1 - x0).sum()
    assert not fg[:y0].any() and not fg[y1:].any() and not fg[:, :x0].any() and not fg[:, x1:].any()
    assert np.all(sc.image[:, fg] > BACKGROUND)


def test_object_count_histogram():
    probs = np.array([0.3, 0.25, 0.2, 0.1, 0.1, 0.05])
    cfg = SceneConfig(count_probs=tuple(probs))
    counts = np.bincount([len(gen_scene(s, cfg).classes) for s in range(1000)], minlength=7)[1:]
    expected = 1000 * probs
    sigma = np.sqrt(1000 * probs * (1 - probs))
    assert np.all(np.abs(counts - expected) <= 3 * sigma)


# ---------------------------------------------------------------------------
# forward


def test_forward_shapes():
    x = np.zeros((2, 3, 64, 64))
    feats, out = D.forward(D.Detector(D.DetectorSpec()), x)
    assert feats[0].shape == (2, 32, 8, 8) and feats[1].shape == (2, 32, 4, 4)
    assert out.cls[0].shape == (2, 2 * 4, 8, 8) and out.reg[1].shape == (2, 8, 4, 4)
    assert out.obj[0].shape == (2, 2, 8, 8)
    student, _ = D.forward(D.Detector(D.DetectorSpec(base_channels=8)), x)
    assert student[0].shape == (2, 8, 8, 8)


def test_zero_weights_give_zero_outputs():
    model = D.Detector(SPEC)
    for p in model.parameters():
        p.data[...] = 0
    x = np.random.default_rng(0).uniform(size=(1, 3, 64, 64))
    feats, out = model(x)
    for t in [*feats, *out.cls, *out.reg, *out.obj]:
        assert not np.any(t.data)


def test_task_loss_gradient_through_forward():
    spec = D.DetectorSpec(base_channels=2)
    model = D.Detector(spec, np.random.default_rng(1))
    rng = np.random.default_rng(2)
    for p in model.parameters():
        p.data += rng.normal(size=p.shape) * 0.1  # move biases off relu kinks
    scenes = make_dataset(3, 1)
    x = np.stack([s.image for s in scenes])
    tg = D.build_targets(spec, scenes)
    _, out = model(x)
    ce = -np.log(D._softmax_np(D.flatten_cls(out, 2).data, 2))
    ce = np.take_along_axis(ce, tg.classes[..., None], axis=2)[..., 0]
    sampled = D.mine_negatives(ce, tg.labels)

    def loss():
        l_cls, l_rpn = D.task_loss_parts(model(x)[1], tg, spec, sampled=sampled)
        return T.add(l_cls, l_rpn)

    check = gradcheck.check_params("task", loss, model.parameters(), 1e-4)
    assert check.ok, str(check)


# ---------------------------------------------------------------------------
# targets


def test_gt_equal_to_anchor():
    anchors = SPEC.flat_anchors()
    lab, cls, off = D.assign_targets(anchors, anchors[37:38], np.array([2]))
    assert lab[37] == 1 and cls[37] == 3
    assert np.array_equal(off[37], np.zeros(4))


def test_no_gt_all_negative():
    lab, cls, off = D.assign_targets(SPEC.flat_anchors(), np.zeros((0, 4)), np.zeros(0))
    assert np.all(lab == 0) and np.all(cls == 0) and not off.any()


def test_assignment_matches_all_pairs_oracle():
    anchors = SPEC.flat_anchors()
    for sc in make_dataset(7, 20):
        lab, cls, off = D.assign_targets(anchors, sc.boxes, sc.classes)
        table = [[oracles.iou_one(a, g) for g in sc.boxes] for a in anchors]
        # each ground truth claims its best anchor (first on ties); later claims win
        best_anchor = [max(range(len(anchors)), key=lambda i: (table[i][k], -i)) for k in range(len(sc.boxes))]
        for i, a in enumerate(anchors):
            ious = table[i]
            g = int(np.argmax(ious))
            forced = [k for k in range(len(sc.boxes)) if best_anchor[k] == i and ious[k] > 0]
            if forced:
                want, g = 1, forced[-1]
            elif ious[g] >= 0.5:
                want = 1
            elif ious[g] >= 0.4:
                want = -1
            else:
                want = 0
            assert lab[i] == want
            if want == 1:
                assert cls[i] == sc.classes[g] + 1
                assert np.allclose(B.decode(a, off[i]), sc.boxes[g], atol=1e-9)


def test_encode_decode_roundtrip():
    rng = np.random.default_rng(4)
    anchors = SPEC.flat_anchors()
    t = rng.normal(size=anchors.shape) * 0.5
    assert np.max(np.abs(B.encode(anchors, B.decode(anchors, t)) - t)) < 1e-10


def test_mining_keeps_three_negatives_per_positive():
    labels = np.array([[1, 0, 0, 0, 0, 0, -1, 0]])
    ce = np.array([[0.0, 5, 1, 4, 2, 3, 9, 0]])
    s = D.mine_negatives(ce, labels)
    assert s[0].tolist() == [True, True, False, True, False, True, False, False]


# ---------------------------------------------------------------------------
# task loss


def test_perfect_predictions():
    scenes = make_dataset(8, 2)
    tg = D.build_targets(SPEC, scenes)
    n, m = tg.labels.shape
    k = SPEC.num_classes + 1
    cls = np.full((n, m, k), -30.0)
    np.put_along_axis(cls, tg.classes[..., None], 30.0, axis=2)
    obj = np.where(tg.labels == 1, 40.0, -40.0)
    out = outputs_from(cls, tg.offsets.copy(), obj, SPEC)
    assert D.task_loss(out, tg, SPEC).item() < 1e-6


def test_uniform_logits_ce_is_log_k_plus_one():
    scenes = make_dataset(9, 2)
    tg = D.build_targets(SPEC, scenes)
    n, m = tg.labels.shape
    out = outputs_from(np.zeros((n, m, 4)), np.zeros((n, m, 4)), np.zeros((n, m)), SPEC)
    l_cls, _ = D.task_loss_parts(out, tg, SPEC)
    assert l_cls.item() == pytest.approx(math.log(4), rel=1e-14)


def test_task_loss_matches_loop_oracle():
    rng = np.random.default_rng(10)
    scenes = make_dataset(10, 2)
    tg = D.build_targets(SPEC, scenes)
    n, m = tg.labels.shape
    cls, reg, obj = rng.normal(size=(n, m, 4)), rng.normal(size=(n, m, 4)), rng.normal(size=(n, m))
    sampled = (tg.labels == 1) | ((tg.labels == 0) & (rng.uniform(size=(n, m)) < 0.1))
    l_cls, l_rpn = D.task_loss_parts(outputs_from(cls, reg, obj, SPEC), tg, SPEC, sampled=sampled)
    total, count = 0.0, 0
    for i in range(n):
        for j in range(m):
            if sampled[i, j]:
                p = oracles.softmax_list(list(cls[i, j]))
                total += -math.log(p[tg.classes[i, j]])
                count += 1
    assert abs(l_cls.item() - total / count) < 1e-12
    want = oracles.rpn(obj.ravel(), reg.reshape(-1, 4), tg.labels.ravel(), tg.offsets.reshape(-1, 4))
    assert abs(l_rpn.item() - want) < 1e-12


# ---------------------------------------------------------------------------
# inference


def test_nms_examples():
    two = np.array([[0, 0, 10, 10], [0, 0, 10, 10.0]])
    assert B.nms(two, np.array([0.9, 0.8]), 0.5).tolist() == [0]
    apart = np.array([[0, 0, 5, 5], [10, 10, 15, 15.0]])
    assert sorted(B.nms(apart, np.array([0.9, 0.8]), 0.5).tolist()) == [0, 1]


def test_nms_matches_reference():
    rng = np.random.default_rng(11)
    for _ in range(30):
        xy = rng.uniform(0, 40, size=(25, 2))
        wh = rng.uniform(4, 20, size=(25, 2))
        boxes = np.concatenate([xy, xy + wh], axis=1)
        scores = np.round(rng.uniform(size=25), 1)  # plenty of ties
        assert B.nms(boxes, scores, 0.4).tolist() == oracles.nms(boxes, scores, 0.4)


def test_decode_and_nms_on_random_outputs():
    rng = np.random.default_rng(12)
    m = len(SPEC.flat_anchors())
    cls = rng.normal(size=(1, m, 4)) * 2
    reg = rng.normal(size=(1, m, 4)) * 0.2
    out = outputs_from(cls, reg, np.zeros((1, m)), SPEC)
    (dets,) = D.decode_and_nms(out, SPEC, score_thresh=0.3, iou_thresh=0.5, max_dets=10**6)
    probs = D._softmax_np(cls[0], 1)
    boxes = B.clip_boxes(B.decode(SPEC.flat_anchors(), reg[0]), 64, 64)
    want = []
    for c in range(1, 4):
        sel = [i for i in range(m) if probs[i, c] > 0.3 and boxes[i, 2] > boxes[i, 0] and boxes[i, 3] > boxes[i, 1]]
        keep = oracles.nms(boxes[sel], probs[sel, c], 0.5)
        want += [(c - 1, probs[sel[k], c]) for k in keep]
    assert sorted((d.cls, d.score) for d in dets) == sorted(want)
    assert all(np.all(d.box >= 0) and np.all(d.box <= 64) for d in dets)


def test_proposals_tie_break_and_clipping():
    m = len(SPEC.flat_anchors())
    rng = np.random.default_rng(13)
    out = outputs_from(np.zeros((1, m, 4)), rng.normal(size=(1, m, 4)), np.zeros((1, m)), SPEC)
    props = D.proposals_from_teacher(out, SPEC, top_n=5)
    boxes = B.clip_boxes(B.decode(SPEC.flat_anchors(), D.flatten_reg(out, 2).data[0]), 64, 64)
    valid = [i for i in range(m) if boxes[i, 2] > boxes[i, 0] and boxes[i, 3] > boxes[i, 1]]
    keep = [valid[k] for k in oracles.nms(boxes[valid], [0.5] * len(valid), 0.7)][:5]
    assert np.array_equal(props.boxes[0], boxes[keep])
    assert np.all(props.boxes[0] >= 0) and np.all(props.boxes[0] <= 64)
    level = props.at_stride(16, 4, 4)
    assert np.all(level.boxes[0] >= 0) and np.all(level.boxes[0] <= 4)
    with pytest.raises(ValueError):
        D.proposals_from_teacher(out, SPEC, top_n=0)
