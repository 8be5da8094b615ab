"""Cameras, orbits, rays, and per-pixel ray-representation maps.

Conventions (fixed once, everything downstream depends on them):

  * World frame is right-handed with +z up.  Subjects sit at/near the origin.
  * An orbit pose is (yaw, pitch, radius, look_at).  yaw=0, pitch=0 places
    the camera at look_at + (0, -radius, 0) looking along +y; yaw increases
    counterclockwise when seen from +z; pitch raises the camera toward +z.
    position = look_at + radius * (cos p sin y, -cos p cos y, sin p).
  * CameraPose.rotation is camera-to-world; columns are the camera axes
    expressed in world coordinates.  CameraPose.translation is the camera
    center in world coordinates.
  * The camera frame is CV-style: x right, y down, z forward (optical axis).
  * Pixel (i, j) samples its center, i.e. (j + 0.5, i + 0.5) in pixel units.

Ray maps encode per-pixel (origin, direction), optionally re-expressed in
the frame of a reference camera so that the encoding is invariant to rigid
motions of the whole scene, followed by sin/cos harmonics of every raw
component.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np


# ----------------------------------------------------------------------------
# pose / intrinsics types

@dataclass(frozen=True)
class CameraIntrinsics:
    focal_x: float
    focal_y: float
    principal_x: float
    principal_y: float
    width: int
    height: int

    def __post_init__(self):
        if self.focal_x <= 0 or self.focal_y <= 0:
            raise ValueError("focal length must be positive")
        if not (0 <= self.principal_x < self.width and 0 <= self.principal_y < self.height):
            raise ValueError("principal point outside image extent")

    @staticmethod
    def square(size: int, focal: Optional[float] = None) -> "CameraIntrinsics":
        f = float(size) if focal is None else float(focal)
        return CameraIntrinsics(f, f, size / 2.0, size / 2.0, size, size)


@dataclass(frozen=True)
class CameraPose:
    """rotation: 3x3 camera-to-world; translation: camera center, world units."""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation must be proper (det=+1)")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def to_dict(self):
        return {"rotation": [float(v) for v in self.rotation.reshape(-1)],  # row-major
                "translation": [float(v) for v in self.translation]}

    @staticmethod
    def from_dict(d):
        return CameraPose(np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
                          np.asarray(d["translation"], dtype=np.float64))


@dataclass(frozen=True)
class OrbitSpec:
    yaw: float          # degrees in [0, 360)
    pitch: float        # degrees
    radius: float       # world units
    look_at: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("orbit radius must be positive")


_WORLD_UP = np.array([0.0, 0.0, 1.0])


def orbit_to_pose(spec: OrbitSpec) -> CameraPose:
    """Place a camera on the orbit sphere, optical axis through look_at."""
    y = np.deg2rad(spec.yaw)
    p = np.deg2rad(spec.pitch)
    look = np.asarray(spec.look_at, dtype=np.float64)
    offset = spec.radius * np.array([np.cos(p) * np.sin(y),
                                     -np.cos(p) * np.cos(y),
                                     np.sin(p)])
    pos = look + offset
    return look_at_pose(pos, look)


def look_at_pose(position, target) -> CameraPose:
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - position
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("degenerate look-at: camera position equals target")
    z = fwd / n
    x = np.cross(z, _WORLD_UP)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise ValueError("degenerate look-at: optical axis parallel to world up")
    x = x / nx
    yaxis = np.cross(z, x)  # x right, y down, z forward; det(R)=+1
    R = np.stack([x, yaxis, z], axis=1)
    return CameraPose(R, position)


def relative_pose(target: CameraPose, reference: CameraPose) -> CameraPose:
    """Express `target` in `reference`'s camera frame; relative_pose(p, p) = id."""
    Rr = reference.rotation
    R = Rr.T @ target.rotation
    t = Rr.T @ (target.translation - reference.translation)
    return CameraPose(R, t)


def transform_pose(pose: CameraPose, R, t) -> CameraPose:
    """Apply a global rigid transform p -> R p + t to the camera."""
    R = np.asarray(R, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64).reshape(3)
    return CameraPose(R @ pose.rotation, R @ pose.translation + t)


def rotation_angle_deg(R) -> float:
    """Rotation angle of a 3x3 rotation matrix (matrix-log magnitude)."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


# ----------------------------------------------------------------------------
# rays

def camera_rays(pose: CameraPose, intr: CameraIntrinsics, out_h: int, out_w: int):
    """Per-pixel (origins, directions), each (3, out_h, out_w), world frame.

    Origins are the camera center (a constant map).  Directions are unit
    vectors through pixel centers; when out_h/out_w differ from the native
    intrinsics resolution the grid is resampled accordingly.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be >= 1")
    sx = intr.width / float(out_w)
    sy = intr.height / float(out_h)
    u = (np.arange(out_w, dtype=np.float64) + 0.5) * sx
    v = (np.arange(out_h, dtype=np.float64) + 0.5) * sy
    uu, vv = np.meshgrid(u, v)
    xc = (uu - intr.principal_x) / intr.focal_x
    yc = (vv - intr.principal_y) / intr.focal_y
    d_cam = np.stack([xc, yc, np.ones_like(xc)], axis=0)
    d_cam = d_cam / np.linalg.norm(d_cam, axis=0, keepdims=True)
    d_world = np.einsum("ij,jhw->ihw", pose.rotation, d_cam)
    o_world = np.broadcast_to(pose.translation.reshape(3, 1, 1), d_world.shape).copy()
    return o_world, d_world


def relative_rays(origins, directions, reference: CameraPose):
    """Re-express world-frame rays in the reference camera's frame."""
    Rt = reference.rotation.T
    c = reference.translation.reshape(3, 1, 1)
    o = np.einsum("ij,jhw->ihw", Rt, origins - c)
    d = np.einsum("ij,jhw->ihw", Rt, directions)
    return o, d


# ----------------------------------------------------------------------------
# ray-map encoding

@dataclass(frozen=True)
class RaymapConfig:
    levels: int = 2                    # harmonic octaves L; C = 6*(1+2L)
    truncate_to: Optional[int] = None  # crop trailing channels to hit an exact budget

    @property
    def channels(self) -> int:
        c = 6 * (1 + 2 * self.levels)
        if self.truncate_to is not None:
            if not (0 < self.truncate_to <= c):
                raise ValueError("truncate_to outside valid channel range")
            c = self.truncate_to
        return c


# Full-scale layout mimicking a 158-channel production frame: 4+4 latent
# channels plus a 149-channel ray map (L=12 gives 150; the last harmonic
# channel is cropped).
FULL_SCALE_RAYMAP = RaymapConfig(levels=12, truncate_to=149)


@dataclass(frozen=True)
class RayMap:
    channels: np.ndarray  # (C, H, W)

    @property
    def channel_count(self) -> int:
        return int(self.channels.shape[0])


def encode_raymap(origins, directions, config: RaymapConfig = RaymapConfig()) -> RayMap:
    """Encode rays as [o, d, sin(2^l [o,d]), cos(2^l [o,d]) for l < L].

    Channel 0..5 are the raw origin/direction components; each harmonic
    level appends 6 sin then 6 cos channels, lowest frequency first.
    """
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    if o.shape != d.shape or o.shape[0] != 3:
        raise ValueError("origins/directions must both be (3, H, W)")
    norms = np.linalg.norm(d, axis=0)
    if np.max(np.abs(norms - 1.0)) > 1e-5:
        raise ValueError("ray directions must be unit-norm")
    raw = np.concatenate([o, d], axis=0)
    parts = [raw]
    for lvl in range(config.levels):
        scaled = (2.0 ** lvl) * raw
        parts.append(np.sin(scaled))
        parts.append(np.cos(scaled))
    ch = np.concatenate(parts, axis=0)
    if config.truncate_to is not None:
        ch = ch[:config.truncate_to]
    return RayMap(ch.astype(np.float32))


def raymap_for_view(pose: CameraPose, intr: CameraIntrinsics, reference: CameraPose,
                    out_h: int, out_w: int, config: RaymapConfig = RaymapConfig()) -> RayMap:
    """Ray map of `pose`, expressed relative to `reference` (the canonical
    choice downstream is the first conditioning view, which makes the maps
    invariant to global rigid motion of the rig)."""
    o, d = camera_rays(pose, intr, out_h, out_w)
    o, d = relative_rays(o, d, reference)
    return encode_raymap(o, d, config)
