import numpy as np
import pytest

from orbitdiff.geometry import (CameraIntrinsics, CameraPose, OrbitSpec, RaymapConfig,
                                FULL_SCALE_RAYMAP, camera_rays, encode_raymap,
                                look_at_pose, orbit_to_pose, raymap_for_view,
                                relative_pose, relative_rays, rotation_angle_deg,
                                transform_pose)

# 40-digit reference for the orbit position at yaw=90, pitch=30, r=1.5
ORBIT_X = 1.299038105676657970145584756129404275207


def _rand_rotation(rng):
    # QR of a random matrix, sign-fixed to det +1
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


# ----------------------------------------------------------------------------
# poses

def test_orbit_reference_position():
    pose = orbit_to_pose(OrbitSpec(90.0, 30.0, 1.5))
    assert pose.translation[0] == pytest.approx(ORBIT_X, abs=1e-12)
    assert pose.translation[1] == pytest.approx(0.0, abs=1e-12)
    assert pose.translation[2] == pytest.approx(0.75, abs=1e-12)


def test_orbit_axis_points_at_look_target():
    for yaw, pitch in [(0, 0), (123.4, -35.0), (270.0, 10.0)]:
        spec = OrbitSpec(yaw, pitch, 2.5, look_at=(0.3, -0.2, 0.1))
        pose = orbit_to_pose(spec)
        fwd = pose.rotation[:, 2]
        to_target = np.asarray(spec.look_at) - pose.translation
        to_target /= np.linalg.norm(to_target)
        assert np.allclose(fwd, to_target, atol=1e-12)
        assert np.linalg.norm(pose.translation - spec.look_at) == pytest.approx(2.5, rel=1e-12)


def test_look_at_degeneracies():
    with pytest.raises(ValueError):
        look_at_pose((0, 0, 0), (0, 0, 0))
    with pytest.raises(ValueError):
        look_at_pose((0, 0, 1.0), (0, 0, 0))   # axis parallel to world up
    with pytest.raises(ValueError):
        OrbitSpec(0.0, 0.0, -1.0)


def test_pose_validation():
    with pytest.raises(ValueError):
        CameraPose(np.eye(3) * 2.0, np.zeros(3))
    refl = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValueError):
        CameraPose(refl, np.zeros(3))


def test_relative_pose_identity_and_composition():
    rng = np.random.default_rng(5)
    a = CameraPose(_rand_rotation(rng), rng.standard_normal(3))
    b = CameraPose(_rand_rotation(rng), rng.standard_normal(3))
    rel_aa = relative_pose(a, a)
    assert np.allclose(rel_aa.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(rel_aa.translation, 0.0, atol=1e-12)
    # applying the global transform leaves relatives unchanged
    R, t = _rand_rotation(rng), rng.standard_normal(3)
    a2, b2 = transform_pose(a, R, t), transform_pose(b, R, t)
    r1, r2 = relative_pose(b, a), relative_pose(b2, a2)
    assert np.allclose(r1.rotation, r2.rotation, atol=1e-10)
    assert np.allclose(r1.translation, r2.translation, atol=1e-10)


def test_rotation_angle():
    rng = np.random.default_rng(6)
    for _ in range(5):
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        ang = rng.uniform(1.0, 179.0)
        K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        R = np.eye(3) + np.sin(np.deg2rad(ang)) * K + (1 - np.cos(np.deg2rad(ang))) * K @ K
        assert rotation_angle_deg(R) == pytest.approx(ang, abs=1e-9)


def test_pose_dict_roundtrip():
    pose = orbit_to_pose(OrbitSpec(33.0, -12.0, 2.0))
    back = CameraPose.from_dict(pose.to_dict())
    assert np.allclose(back.rotation, pose.rotation, atol=0)
    assert np.allclose(back.translation, pose.translation, atol=0)


# ----------------------------------------------------------------------------
# rays

def test_camera_rays_shapes_and_units():
    intr = CameraIntrinsics.square(8)
    pose = orbit_to_pose(OrbitSpec(40.0, 10.0, 3.0))
    o, d = camera_rays(pose, intr, 8, 8)
    assert o.shape == (3, 8, 8) and d.shape == (3, 8, 8)
    assert np.allclose(np.linalg.norm(d, axis=0), 1.0, atol=1e-12)
    assert np.allclose(o, pose.translation[:, None, None], atol=0)


def test_camera_rays_center_pixel_points_forward():
    # pixel centers at +0.5: with an even size the optical axis lies between
    # the four central rays, so their mean direction aligns with it
    intr = CameraIntrinsics.square(8)
    pose = orbit_to_pose(OrbitSpec(77.0, -20.0, 2.0))
    _, d = camera_rays(pose, intr, 8, 8)
    center = d[:, 3:5, 3:5].mean(axis=(1, 2))
    center /= np.linalg.norm(center)
    assert np.allclose(center, pose.rotation[:, 2], atol=1e-9)


def test_relative_rays_self_reference_is_canonical():
    intr = CameraIntrinsics.square(4)
    pose = orbit_to_pose(OrbitSpec(15.0, 25.0, 2.0))
    o, d = camera_rays(pose, intr, 4, 4)
    ro, rd = relative_rays(o, d, pose)
    assert np.allclose(ro, 0.0, atol=1e-12)                    # origin at the reference camera
    assert np.allclose(np.linalg.norm(rd, axis=0), 1.0, atol=1e-12)
    assert np.all(rd[2] > 0)                                   # forward (+z) hemisphere


# ----------------------------------------------------------------------------
# ray maps

def test_raymap_channel_layout():
    cfg = RaymapConfig(levels=2)
    assert cfg.channels == 6 + 2 * 12
    assert FULL_SCALE_RAYMAP.channels == 149  # 6 + 12*12 = 150, truncated
    intr = CameraIntrinsics.square(4)
    pose = orbit_to_pose(OrbitSpec(60.0, 5.0, 2.0))
    ref = orbit_to_pose(OrbitSpec(0.0, 0.0, 2.0))
    rm = raymap_for_view(pose, intr, ref, 4, 4, cfg)
    assert rm.channels.shape == (30, 4, 4)
    assert rm.channels.dtype == np.float32
    o, d = camera_rays(pose, intr, 4, 4)
    ro, rd = relative_rays(o, d, ref)
    raw = np.concatenate([ro, rd], axis=0)
    assert np.allclose(rm.channels[:6], raw.astype(np.float32), atol=1e-6)
    # channel 6 is sin(2^0 * origin_x) of the relative rays
    assert np.allclose(rm.channels[6], np.sin(raw[0]).astype(np.float32), atol=1e-6)
    assert np.allclose(rm.channels[6 + 12], np.sin(2.0 * raw[0]).astype(np.float32), atol=1e-6)


def test_raymap_rejects_unnormalized_directions():
    cfg = RaymapConfig(levels=1)
    o = np.zeros((3, 2, 2))
    d = np.full((3, 2, 2), 1.0)  # norm sqrt(3)
    with pytest.raises(ValueError):
        encode_raymap(o, d, cfg)


def test_raymap_rigid_invariance():
    """Relative-frame ray maps are unchanged by a global rigid motion."""
    rng = np.random.default_rng(42)
    intr = CameraIntrinsics.square(8)
    cfg = RaymapConfig(levels=2)
    worst = 0.0
    for _ in range(100):
        poses = [orbit_to_pose(OrbitSpec(rng.uniform(0, 360), rng.uniform(-45, 45),
                                         rng.uniform(1.5, 4.0)))
                 for _ in range(3)]
        ref = poses[0]
        R, t = _rand_rotation(rng), rng.standard_normal(3) * 2.0
        moved = [transform_pose(p, R, t) for p in poses]
        for p, q in zip(poses, moved):
            a = raymap_for_view(p, intr, ref, 8, 8, cfg).channels
            b = raymap_for_view(q, intr, moved[0], 8, 8, cfg).channels
            worst = max(worst, float(np.max(np.abs(a - b))))
    assert worst < 1e-5
