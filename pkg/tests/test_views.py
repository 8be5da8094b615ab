import numpy as np
import pytest

from orbitdiff.denoiser import FrameLayout, ROLE_CONDITIONING, ROLE_TARGET
from orbitdiff.views import (ANCHOR_OFFSETS, MAX_FRAMES_PER_PASS, MAX_INTERMEDIATE_TARGETS,
                             SamplingPass, ViewRef, circular_distance, format_plan,
                             max_coverage_gap, nearest_anchors, pack_frames, parse_plan,
                             plan_anchors, plan_intermediates, plan_views, signed_delta,
                             to_channels, unpack, wrap_yaw)

from conftest import tiny_layout


# ----------------------------------------------------------------------------
# circular arithmetic

def test_signed_delta_range_and_values():
    assert signed_delta(10.0, 350.0) == pytest.approx(20.0)
    assert signed_delta(350.0, 10.0) == pytest.approx(-20.0)
    assert signed_delta(180.0, 0.0) == pytest.approx(-180.0)   # half-open [-180, 180)
    for a in np.linspace(0, 720, 97):
        for b in (0.0, 123.4, 359.9):
            d = signed_delta(a, b)
            assert -180.0 <= d < 180.0
            assert np.isclose(np.mod(b + d, 360.0), np.mod(a, 360.0))


def test_wrap_and_distance():
    assert wrap_yaw(-45.0) == 315.0
    assert wrap_yaw(405.0) == 45.0
    assert circular_distance(359.0, 1.0) == pytest.approx(2.0)


# ----------------------------------------------------------------------------
# anchor pass

def test_anchor_pass_offsets_in_order():
    ap = plan_anchors(30.0)
    assert ap.m == 1 and ap.conditioning[0].kind == "input"
    assert ap.conditioning[0].yaw == 30.0
    expect = [wrap_yaw(30.0 + off) for off in ANCHOR_OFFSETS]
    assert ap.target_yaws == expect            # offset order is part of the contract
    assert ap.k == 7
    assert ap.m + ap.k == MAX_FRAMES_PER_PASS


def test_anchor_offsets_are_the_fixed_seven():
    assert ANCHOR_OFFSETS == (45.0, -45.0, 90.0, -90.0, 135.0, -135.0, 180.0)
    # together with the input they scaffold the circle at 45 degrees
    ap = plan_anchors(0.0)
    assert sorted([0.0] + ap.target_yaws) == [0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0]


def test_nearest_anchors_orders_behind_first_and_breaks_ties_low():
    anchors = [45.0, 315.0, 90.0]
    k, l = nearest_anchors(0.0, anchors)
    # 45 and 315 are both 45 degrees away; the pair is ordered behind-first
    assert (anchors[k], anchors[l]) == (315.0, 45.0)
    k, l = nearest_anchors(50.0, anchors)
    assert (anchors[k], anchors[l]) == (45.0, 90.0)
    with pytest.raises(ValueError):
        nearest_anchors(0.0, [10.0])


# ----------------------------------------------------------------------------
# full plan

def test_plan_views_default_step_counts():
    plan = plan_views(0.0, step=7.5)
    assert len(plan.covered_yaws) == 48                  # input + 7 + 40
    assert len(plan.anchor_pass.target_yaws) == 7
    assert len(plan.intermediate_passes) == 8            # one per 45-degree arc
    for p in plan.intermediate_passes:
        assert p.m == 3
        assert p.conditioning[0].kind == "input"
        assert p.conditioning[1].kind == "anchor" and p.conditioning[2].kind == "anchor"
        assert 1 <= p.k <= MAX_INTERMEDIATE_TARGETS
        assert p.m + p.k <= MAX_FRAMES_PER_PASS
        # targets lie strictly inside the arc spanned by the two anchors
        a, b = p.conditioning[1].yaw, p.conditioning[2].yaw
        arc = np.mod(b - a, 360.0)
        for t in p.target_yaws:
            assert 0.0 < np.mod(t - a, 360.0) < arc


def test_plan_covers_grid_exactly_once():
    plan = plan_views(12.0, step=7.5)
    got = sorted(np.mod(np.asarray(plan.covered_yaws) - 12.0, 360.0))
    expect = [i * 7.5 for i in range(48)]
    assert np.allclose(got, expect, atol=1e-9)
    assert max_coverage_gap(plan.covered_yaws) == pytest.approx(7.5)


def test_plan_equivariant_under_input_rotation():
    base = plan_views(0.0, step=15.0)
    rot = plan_views(77.0, step=15.0)
    for pb, pr in zip(base.passes, rot.passes):
        assert len(pb.target_yaws) == len(pr.target_yaws)
        for tb, tr in zip(pb.target_yaws, pr.target_yaws):
            assert circular_distance(tr, wrap_yaw(tb + 77.0)) < 1e-9
        for cb, cr in zip(pb.conditioning, pr.conditioning):
            assert cb.kind == cr.kind
            assert circular_distance(cr.yaw, wrap_yaw(cb.yaw + 77.0)) < 1e-9


def test_plan_chunks_respect_target_cap():
    # step 5 -> 72 grid points, 8 per 45-degree arc -> chunks of 5 and 3
    plan = plan_views(0.0, step=5.0)
    ks = [p.k for p in plan.intermediate_passes]
    assert all(k <= MAX_INTERMEDIATE_TARGETS for k in ks)
    assert sum(ks) + 7 + 1 == 72
    assert max_coverage_gap(plan.covered_yaws) == pytest.approx(5.0)


def test_plan_rejects_bad_step():
    with pytest.raises(ValueError):
        plan_views(0.0, step=7.0)       # does not divide 360
    with pytest.raises(ValueError):
        plan_intermediates(-7.5, 0.0, [45.0, 315.0])


def test_sampling_pass_validation():
    with pytest.raises(ValueError):
        SamplingPass([ViewRef("input", 0.0), ViewRef("anchor", 45.0)], [10.0])  # M=2
    with pytest.raises(ValueError):
        SamplingPass([ViewRef("input", 0.0)], list(np.arange(8.0)))            # 1+8 > 8
    with pytest.raises(ValueError):
        ViewRef("target", 0.0)


# ----------------------------------------------------------------------------
# plan text round-trip

def test_plan_text_round_trip():
    plan = plan_views(33.0, step=7.5, pitch=12.0)
    text = format_plan(plan)
    back = parse_plan(text)
    assert back.input_yaw == pytest.approx(plan.input_yaw)
    assert back.input_pitch == pytest.approx(plan.input_pitch)
    assert back.step == pytest.approx(plan.step)
    assert len(back.passes) == len(plan.passes)
    for pa, pb in zip(plan.passes, back.passes):
        assert pa.pitch == pytest.approx(pb.pitch)
        assert [r.kind for r in pa.conditioning] == [r.kind for r in pb.conditioning]
        assert np.allclose([r.yaw for r in pa.conditioning], [r.yaw for r in pb.conditioning])
        assert np.allclose(pa.target_yaws, pb.target_yaws)
    # formatting the parsed plan reproduces the text exactly
    assert format_plan(back) == text


def test_parse_plan_rejects_garbage():
    with pytest.raises(ValueError):
        parse_plan("# not a plan\n")
    with pytest.raises(ValueError):
        parse_plan("# view plan v1 step=7.5\ninput yaw=0 pitch=0\n")   # no anchor pass


# ----------------------------------------------------------------------------
# frame packing

def test_pack_unpack_round_trip(rng):
    lay = tiny_layout()
    n = 4
    imgs = [rng.random((lay.c_img, lay.size, lay.size)).astype(np.float32) for _ in range(n)]
    nrms = [rng.random((lay.c_nrm, lay.size, lay.size)).astype(np.float32) for _ in range(n)]
    rays = [rng.random((lay.c_ray, lay.size, lay.size)).astype(np.float32) for _ in range(n)]
    roles = [ROLE_CONDITIONING, ROLE_TARGET, ROLE_TARGET, ROLE_TARGET]
    batch = pack_frames(imgs, nrms, rays, roles, sigma_targets=2.5)
    assert np.array_equal(batch.sigma_per_frame, [0.0, 2.5, 2.5, 2.5])
    packed = to_channels(batch)
    assert packed.shape == (n, lay.c_total, lay.size, lay.size)
    parts = unpack(packed, lay)
    for i in range(n):
        assert np.array_equal(parts["image"][i], imgs[i])
        assert np.array_equal(parts["normals"][i], nrms[i])
        assert np.array_equal(parts["raymap"][i], rays[i])
    assert np.array_equal(parts["mask"][0], np.ones((1, lay.size, lay.size), dtype=np.float32))
    assert np.array_equal(parts["mask"][1], np.zeros((1, lay.size, lay.size), dtype=np.float32))
    with pytest.raises(ValueError):
        unpack(packed[:, :-1], lay)
    with pytest.raises(ValueError):
        pack_frames(imgs, nrms[:-1], rays, roles)
