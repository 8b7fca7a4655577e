import numpy as np
import pytest

from afd import tensor as T
from afd.config import RunConfig
from afd.toydet.detector import Detector
from afd.toydet.scenes import make_dataset
from afd.train import SGD, AfdObjective, distill, make_split, train_teacher


@pytest.fixture
def setup(tiny):
    cfg = RunConfig.from_dict(tiny)
    scenes = make_dataset(0, 12, cfg.data.scene)
    train = make_split(scenes[:8], cfg.student)
    val = make_split(scenes[8:], cfg.student)
    teacher, _ = train_teacher(cfg, train, val)
    return cfg, teacher, train, val


def test_sgd_step_by_hand():
    p = T.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = SGD([p], momentum=0.5, weight_decay=0.1)
    p.grad = np.array([0.2, 0.4])
    opt.step(0.1)
    # v = g + wd * p; p -= lr * v
    assert np.allclose(p.data, [1.0 - 0.1 * 0.3, -2.0 - 0.1 * 0.2], atol=1e-15)
    p.grad = np.zeros(2)
    before = p.data.copy()
    opt.step(0.1)
    v = 0.5 * np.array([0.3, 0.2]) + 0.1 * before
    assert np.allclose(p.data, before - 0.1 * v, atol=1e-15)


def test_sgd_clips_global_norm():
    p = T.Tensor(np.zeros(2), requires_grad=True)
    opt = SGD([p], momentum=0.0, weight_decay=0.0)
    p.grad = np.array([3.0, 4.0])
    assert opt.step(1.0, grad_clip=1.0) == 5.0
    assert np.allclose(p.data, [-0.6, -0.8], atol=1e-12)


def test_modes_share_initialisation(tiny, setup):
    cfg, teacher, train, val = setup
    cfg0 = RunConfig.from_dict({**tiny, "student_train": {**tiny["student_train"], "epochs": 0}})
    a, _, _ = distill(cfg0, teacher, train, val, "baseline", seed=3)
    b, _, _ = distill(cfg0, teacher, train, val, "afd", seed=3)
    sa, sb = a.state_dict(), b.state_dict()
    assert sa.keys() == sb.keys() and all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


def test_teacher_stays_frozen(setup):
    cfg, teacher, train, val = setup
    before = {k: v.copy() for k, v in teacher.state_dict().items()}
    distill(cfg, teacher, train, val, "afd", seed=0)
    after = teacher.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)
    assert all(p.grad is None and not p.requires_grad for p in teacher.parameters())


def test_first_step_global_loss_is_raw_mse(setup):
    cfg, teacher, train, _ = setup
    student = Detector(cfg.student, np.random.default_rng([0, 1]))
    objective = AfdObjective(cfg, np.random.default_rng([0, 2]))
    x = train.images[:2]
    feats_t, out_t = teacher(x)
    feats_s, out_s = student(x)
    comps = objective.components(feats_t, out_t, feats_s, out_s)
    adapted = objective.adapted(feats_s)
    want = sum(cfg.gc.loss_weight * np.sum((ft.data - fa.data) ** 2) / 2 for ft, fa in zip(feats_t, adapted))
    assert comps["l_glob"].item() == pytest.approx(want, rel=1e-12)


def test_metrics_schema_and_determinism(setup):
    cfg, teacher, train, val = setup
    s1, o1, m1 = distill(cfg, teacher, train, val, "afd", seed=1)
    s2, o2, m2 = distill(cfg, teacher, train, val, "afd", seed=1)
    assert m1 == m2
    assert list(m1[0]) == ["epoch", "lr", "task_loss", "l_fd", "l_fa", "l_glob", "l_cls_h", "l_loc_h",
                           "l_rpn", "total", "val_map"]
    assert all(m1[0][k] is not None for k in m1[0])
    s = s1.state_dict()
    assert all(s[k].tobytes() == v.tobytes() for k, v in s2.state_dict().items())
    _, _, base = distill(cfg, teacher, train, val, "baseline", seed=1)
    assert base[0]["l_fd"] is None and base[0]["l_rpn"] is not None


def test_unknown_mode(setup):
    cfg, teacher, train, val = setup
    with pytest.raises(ValueError):
        distill(cfg, teacher, train, val, "bogus")
