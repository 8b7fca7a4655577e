import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from afd import attention as A
from afd import tensor as T
from afd.errors import BoxOutOfBounds, EmptyRegion, IndivisibleShape, ShapeMismatch

CFG = A.MaskConfig(temperature=0.1, instance_size=2)


def full(h, w):
    return [[True] * w for _ in range(h)]


# ---------------------------------------------------------------------------
# region


def test_region_without_proposals_is_all_ones():
    assert np.array_equal(A.proposal_region_mask(None, 3, 5).data, np.ones((3, 5)))
    assert np.array_equal(A.proposal_region_mask([], 3, 5).data, np.ones((3, 5)))


def test_region_full_box():
    assert np.array_equal(A.proposal_region_mask([[0, 0, 4, 4]], 4, 4).data, np.ones((4, 4)))


def test_region_two_overlapping_boxes_matches_rasterization():
    boxes = [[0.5, 0.5, 2.5, 2.0], [1.5, 1.0, 3.0, 3.5]]
    got = A.proposal_region_mask(boxes, 4, 4).data
    want = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            for x0, y0, x1, y1 in boxes:
                # cell [j, j+1) x [i, i+1) overlaps the box with positive area
                if min(x1, j + 1) - max(x0, j) > 0 and min(y1, i + 1) - max(y0, i) > 0:
                    want[i, j] = 1
    assert np.array_equal(got, want)
    assert got.sum() == want.sum()


def test_region_rejects_bad_boxes():
    with pytest.raises(BoxOutOfBounds):
        A.proposal_region_mask([[0, 0, 5, 2]], 4, 4)
    with pytest.raises(BoxOutOfBounds):
        A.proposal_region_mask([[2, 0, 1, 2]], 4, 4)


def test_region_masks_respects_the_switch():
    props = A.ProposalSet([np.array([[0, 0, 1, 1.0]])], [np.array([0.9])])
    off = A.region_masks(props, 1, 4, 4, A.MaskConfig())
    on = A.region_masks(props, 1, 4, 4, A.MaskConfig(use_proposal_mask=True))
    assert off.all()
    assert on.sum() == 1 and on[0, 0, 0]


# ---------------------------------------------------------------------------
# single-detector masks


def test_channel_mask_constant_input():
    x = np.full((4, 8, 8), 2.5)
    out = A.channel_mask(x, cfg=A.MaskConfig()).data
    assert np.allclose(out, 16.0, atol=1e-12, rtol=0)


def test_channel_mask_high_temperature_is_uniform():
    x = np.random.default_rng(0).normal(size=(5, 4, 4))
    out = A.channel_mask(x, cfg=A.MaskConfig(temperature=1e6)).data
    assert np.allclose(out, 16 / 5, atol=1e-6, rtol=0)


def test_channel_mask_matches_loop_oracle():
    x = np.random.default_rng(1).normal(size=(3, 4, 4))
    got = A.channel_mask(x, cfg=A.MaskConfig(temperature=0.1)).data
    want = oracles.channel_mask(x, full(4, 4), 16.0, 0.1)
    assert np.max(np.abs(got - want)) < 1e-10


def test_channel_mask_dimensional_scale():
    x = np.random.default_rng(2).normal(size=(3, 4, 4))
    out = A.channel_mask(x, cfg=A.MaskConfig(channel_scale="dimensional")).data
    assert out.sum() == pytest.approx(3.0, abs=1e-12)


def test_spatial_mask_constant_input():
    out = A.spatial_mask(np.ones((3, 2, 2)), cfg=A.MaskConfig()).data
    assert np.allclose(out, 0.75, atol=1e-15, rtol=0)


def test_spatial_mask_half_region():
    x = np.random.default_rng(3).normal(size=(3, 4, 4))
    region = np.zeros((4, 4))
    region[:, :2] = 1
    out = A.spatial_mask(x, region, A.MaskConfig()).data
    assert np.all(out[:, 2:] == 0)
    assert out[:, :2].sum() == pytest.approx(3.0, abs=1e-12)
    want = oracles.spatial_mask(x, region.astype(bool).tolist(), 3.0, 0.1)
    assert np.max(np.abs(out - want)) < 1e-10


def test_spatial_mask_matches_loop_oracle():
    x = np.random.default_rng(4).normal(size=(3, 4, 4))
    got = A.spatial_mask(x, cfg=A.MaskConfig()).data
    assert np.max(np.abs(got - oracles.spatial_mask(x, full(4, 4), 3.0, 0.1))) < 1e-10


def test_empty_region_raises():
    x = np.ones((2, 2, 2))
    with pytest.raises(EmptyRegion):
        A.channel_mask(x, np.zeros((2, 2)))
    with pytest.raises(EmptyRegion):
        A.spatial_mask(x, np.zeros((2, 2)))


def test_temperature_rescaling_keeps_argmax():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 4, 4))
    k = 3.0
    a = A.channel_mask(x, cfg=A.MaskConfig(temperature=0.2)).data
    b = A.channel_mask(k * x, cfg=A.MaskConfig(temperature=0.2 * k)).data
    assert np.allclose(a, b, atol=1e-12, rtol=0)
    assert np.argmax(a) == np.argmax(A.channel_mask(k * x, cfg=A.MaskConfig(temperature=0.2)).data)


# ---------------------------------------------------------------------------
# patches


def test_split_single_patch():
    x = np.random.default_rng(6).normal(size=(2, 4, 4))
    (p,) = A.split_patches(x, 4)
    assert np.array_equal(p.data, x)


def test_split_row_major_and_roundtrip():
    x = np.random.default_rng(7).normal(size=(3, 8, 8))
    ps = A.split_patches(x, 4)
    assert len(ps) == 4
    assert np.array_equal(ps[1].data, x[:, :4, 4:])
    assert np.array_equal(ps[2].data, x[:, 4:, :4])
    assert np.array_equal(A.merge_patches(ps, 8, 8).data, x)


def test_split_indivisible():
    with pytest.raises(IndivisibleShape):
        A.split_patches(np.zeros((1, 6, 6)), 4)
    with pytest.raises(IndivisibleShape):
        A.local_masks(np.zeros((1, 6, 6)), np.zeros((1, 6, 6)), cfg=A.MaskConfig(instance_size=4))


def test_batched_patches_match_split():
    x = np.random.default_rng(8).normal(size=(2, 3, 4, 8))
    flat = A.to_patches(T.Tensor(x), 2).data
    want = [p.data for n in range(2) for p in A.split_patches(x[n], 2)]
    assert np.array_equal(flat, np.stack(want))
    sp = x[:, 0]
    back = A.from_patches(A.to_patches(T.Tensor(x), 2)[:, 0], 2, 4, 8).data
    assert np.array_equal(back, sp)


# ---------------------------------------------------------------------------
# local / global / combined


def test_local_equal_inputs_doubles_patch_masks():
    x = np.random.default_rng(9).normal(size=(3, 4, 4))
    loc = A.local_masks(x, x, cfg=CFG)
    for p, patch in enumerate(A.split_patches(x, 2)):
        single = A.channel_mask(patch.data, cfg=CFG).data
        assert np.allclose(loc.channel_patches.data[p], 2 * single, atol=1e-12, rtol=0)


def test_single_patch_local_equals_global():
    rng = np.random.default_rng(10)
    ft, fs = rng.normal(size=(2, 3, 4, 4))
    cfg = A.MaskConfig(instance_size=4)
    loc = A.local_masks(ft, fs, cfg=cfg)
    g_ch, g_sp = A.global_masks(ft, fs, cfg=cfg)
    assert np.max(np.abs(loc.channel.data - g_ch.data)) <= 1e-12
    assert np.max(np.abs(loc.spatial.data - g_sp.data)) <= 1e-12
    lg = A.combine_masks(loc.channel, loc.spatial, g_ch, g_sp)
    assert np.max(np.abs(lg.channel.data - g_ch.data)) <= 1e-12


def test_local_matches_loop_oracle():
    rng = np.random.default_rng(11)
    ft, fs = rng.normal(size=(2, 3, 4, 4))
    loc = A.local_masks(ft, fs, cfg=CFG)
    l_ch, l_sp, rows = oracles.local_masks(ft, fs, full(4, 4), 0.1, 2)
    assert np.max(np.abs(loc.channel.data - l_ch)) < 1e-10
    assert np.max(np.abs(loc.spatial.data - l_sp)) < 1e-10
    assert np.max(np.abs(loc.channel_patches.data - rows)) < 1e-10


def test_local_with_region_skips_empty_patches():
    rng = np.random.default_rng(12)
    ft, fs = rng.normal(size=(2, 3, 4, 4))
    region = np.zeros((4, 4))
    region[0, 0] = region[3, 1] = region[2, 3] = 1
    loc = A.local_masks(ft, fs, region, CFG)
    l_ch, l_sp, rows = oracles.local_masks(ft, fs, region.astype(bool).tolist(), 0.1, 2)
    assert np.all(loc.channel_patches.data[1] == 0)
    assert np.max(np.abs(loc.channel.data - l_ch)) < 1e-10
    assert np.max(np.abs(loc.spatial.data - l_sp)) < 1e-10


def test_global_constant_inputs():
    x = np.full((4, 2, 2), 0.3)
    g_ch, g_sp = A.global_masks(x, x, cfg=A.MaskConfig())
    assert np.allclose(g_ch.data, 2 * 4 / 4, atol=1e-12, rtol=0)
    assert np.allclose(g_sp.data, 2 * 4 / 4, atol=1e-12, rtol=0)


def test_global_zero_student_adds_uniform():
    ft = np.random.default_rng(13).normal(size=(3, 4, 4))
    g_ch, g_sp = A.global_masks(ft, np.zeros_like(ft), cfg=A.MaskConfig())
    t_ch = A.channel_mask(ft, cfg=A.MaskConfig()).data
    t_sp = A.spatial_mask(ft, cfg=A.MaskConfig()).data
    assert np.allclose(g_ch.data, t_ch + 16 / 3, atol=1e-12, rtol=0)
    assert np.allclose(g_sp.data, t_sp + 3 / 16, atol=1e-12, rtol=0)


def test_global_matches_loop_oracle():
    rng = np.random.default_rng(14)
    ft, fs = rng.normal(size=(2, 4, 8, 8))
    g_ch, g_sp = A.global_masks(ft, fs, cfg=A.MaskConfig())
    o_ch, o_sp = oracles.global_masks(ft, fs, full(8, 8), 0.1)
    assert np.max(np.abs(g_ch.data - o_ch)) < 1e-10
    assert np.max(np.abs(g_sp.data - o_sp)) < 1e-10


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        A.global_masks(np.ones((2, 4, 4)), np.ones((3, 4, 4)))
    with pytest.raises(ShapeMismatch):
        A.combine_masks(np.ones(3), np.ones((2, 2)), np.ones(4), np.ones((2, 2)))


def test_combine_arithmetic():
    lg = A.combine_masks(np.full(3, 2.0), np.full((2, 2), 2.0), np.full(3, 4.0), np.full((2, 2), 4.0))
    assert np.all(lg.channel.data == 3) and np.all(lg.spatial.data == 3)
    same = A.combine_masks(np.arange(3.0), np.ones((2, 2)), np.arange(3.0), np.ones((2, 2)))
    assert np.array_equal(same.channel.data, np.arange(3.0))


def test_compute_masks_matches_combined_oracle():
    rng = np.random.default_rng(15)
    ft = rng.normal(size=(2, 4, 4, 4))
    fs = rng.normal(size=(2, 4, 4, 4))
    masks = A.compute_masks([T.Tensor(ft)], [T.Tensor(fs)], CFG)
    for n in range(2):
        o_ch, o_sp = oracles.combined_masks(ft[n], fs[n], full(4, 4), 0.1, 2)
        assert np.max(np.abs(masks[0].channel.data[n] - o_ch)) < 1e-10
        assert np.max(np.abs(masks[0].spatial.data[n] - o_sp)) < 1e-10


def test_compute_masks_detaches_by_default():
    fs = T.Tensor(np.random.default_rng(16).normal(size=(1, 2, 2, 2)), requires_grad=True)
    ft = T.Tensor(np.ones((1, 2, 2, 2)))
    cfg = A.MaskConfig(instance_size=2)
    assert not A.compute_masks([ft], [fs], cfg)[0].channel.requires_grad
    live = A.compute_masks([ft], [fs], A.MaskConfig(instance_size=2, detach=False))
    assert live[0].channel.requires_grad


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.05, 0.1, 0.4, 2.0]), st.sampled_from([1, 2, 4]))
def test_sum_constraints_and_nonnegativity(seed, temp, size):
    rng = np.random.default_rng(seed)
    ft = rng.normal(size=(1, 3, 4, 4)) * rng.uniform(0.1, 5)
    fs = rng.normal(size=(1, 3, 4, 4))
    cfg = A.MaskConfig(temperature=temp, instance_size=size)
    ch = A.channel_mask(ft[0], cfg=cfg).data
    sp = A.spatial_mask(ft[0], cfg=cfg).data
    assert abs(ch.sum() - 16) < 1e-9 and abs(sp.sum() - 3) < 1e-9
    lv = A.compute_masks([T.Tensor(ft)], [T.Tensor(fs)], cfg)[0]
    assert all(np.all(m.data >= 0) for m in lv)
