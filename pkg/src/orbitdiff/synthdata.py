"""Procedural multi-view data: shaded ellipsoid "heads" with exact normals.

Each identity is a 16-parameter vector theta:

    theta[0:3]   ellipsoid semi-axes, per-axis in [0.7, 1.3]
    theta[3:6]   center offset in [-0.15, 0.15]
    theta[6:15]  albedo: 3 color channels x (constant, z-, x-) low-order
                 spherical-harmonic coefficients on the surface direction
    theta[15]    brightness in [0.8, 1.2]

Rendering is analytic ray-ellipsoid intersection with Lambertian shading
under one fixed directional light (fixed per dataset, rotating with the
scene so renders are pose-equivariant).  Normals come from the implicit
surface gradient and are encoded (n+1)/2 into [0,1]; background normal
pixels are exactly (0.5, 0.5, 0.5) and background image pixels carry the
background color exactly.
"""

import os
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from . import containers
from .geometry import CameraIntrinsics, CameraPose, OrbitSpec, camera_rays, orbit_to_pose

THETA_DIM = 16
THETA_LOW = np.array([0.7] * 3 + [-0.15] * 3 + [0.35, -0.25, -0.25] * 3 + [0.8])
THETA_HIGH = np.array([1.3] * 3 + [0.15] * 3 + [0.85, 0.25, 0.25] * 3 + [1.2])

_Y0 = 0.28209479177387814   # real SH l=0
_Y1 = 0.48860251190291992   # real SH l=1 scale
_AMBIENT = 0.35
_LIGHT_SCENE = np.array([0.4, -0.7, 0.6]) / np.linalg.norm([0.4, -0.7, 0.6])


@dataclass(frozen=True)
class SceneIdentity:
    theta: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        if t.shape[0] != THETA_DIM:
            raise ValueError(f"theta must have {THETA_DIM} entries")
        if np.any(t < THETA_LOW - 1e-9) or np.any(t > THETA_HIGH + 1e-9):
            raise ValueError("theta outside the parameter box")
        object.__setattr__(self, "theta", t)


@dataclass
class RenderSample:
    image: np.ndarray       # (3, H, W) in [0,1]
    normals: np.ndarray     # (3, H, W), (n+1)/2 encoding
    foreground: np.ndarray  # (H, W) bool
    pose: CameraPose
    background: Tuple[float, float, float]


def sample_identity(rng: np.random.Generator) -> SceneIdentity:
    u = rng.uniform(0.0, 1.0, size=THETA_DIM)
    return SceneIdentity(THETA_LOW + u * (THETA_HIGH - THETA_LOW))


def _albedo(theta: np.ndarray, n_param: np.ndarray) -> np.ndarray:
    """(3, N) per-channel albedo from the SH coefficients; n_param (3, N)
    is the surface direction in the ellipsoid's parameter frame."""
    basis = np.stack([np.full(n_param.shape[1], _Y0),
                      _Y1 * n_param[2],
                      _Y1 * n_param[0]])
    coef = theta[6:15].reshape(3, 3)
    # the constant coefficient is stored as the target mean albedo, so undo Y0
    coef = coef.copy()
    coef[:, 0] = coef[:, 0] / _Y0
    return np.clip(coef @ basis, 0.05, 1.0)


def render_view(theta, pose: CameraPose, intr: CameraIntrinsics,
                background: Tuple[float, float, float] = (1.0, 1.0, 1.0),
                out_size: Optional[int] = None,
                scene_rotation: Optional[np.ndarray] = None) -> RenderSample:
    """Analytic render of one view.

    scene_rotation R rotates the whole scene (geometry, albedo frame, light)
    by p -> R p; rotating the camera identically leaves the image unchanged.
    """
    theta = SceneIdentity(theta).theta if not isinstance(theta, SceneIdentity) else theta.theta
    axes = theta[0:3]
    center = theta[3:6]
    brightness = theta[15]
    h = w = int(out_size) if out_size is not None else intr.height
    Rs = np.eye(3) if scene_rotation is None else np.asarray(scene_rotation, dtype=np.float64)

    o, d = camera_rays(pose, intr, h, w)
    o = np.einsum("ij,jhw->ihw", Rs.T, o).reshape(3, -1)   # scene frame
    d = np.einsum("ij,jhw->ihw", Rs.T, d).reshape(3, -1)

    cam_scene = Rs.T @ pose.translation
    if np.sum(((cam_scene - center) / axes) ** 2) <= 1.0:
        raise ValueError("camera is inside the surface")

    u = (o - center[:, None]) / axes[:, None]
    v = d / axes[:, None]
    a = np.sum(v * v, axis=0)
    b = 2.0 * np.sum(u * v, axis=0)
    c = np.sum(u * u, axis=0) - 1.0
    disc = b * b - 4.0 * a * c
    hit = disc > 0.0
    t_hit = np.full(a.shape, np.inf)
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / (2.0 * a)
    t_hit = np.where(hit & (t0 > 1e-9), t0, np.inf)
    fg = np.isfinite(t_hit)

    img = np.empty((3, h * w))
    img[:] = np.asarray(background, dtype=np.float64)[:, None]
    nrm_enc = np.full((3, h * w), 0.5)

    if np.any(fg):
        p = o[:, fg] + t_hit[fg] * d[:, fg]                       # scene frame
        n_param = (p - center[:, None]) / axes[:, None]           # unit by construction
        grad = 2.0 * (p - center[:, None]) / (axes ** 2)[:, None]  # implicit gradient
        n_scene = grad / np.linalg.norm(grad, axis=0, keepdims=True)
        alb = _albedo(theta, n_param)
        diffuse = np.maximum(0.0, np.sum(n_scene * _LIGHT_SCENE[:, None], axis=0))
        shade = _AMBIENT + (1.0 - _AMBIENT) * diffuse
        img[:, fg] = np.clip(alb * shade * brightness, 0.0, 1.0)
        n_world = Rs @ n_scene
        nrm_enc[:, fg] = (n_world + 1.0) / 2.0

    return RenderSample(img.reshape(3, h, w).astype(np.float32),
                        nrm_enc.reshape(3, h, w).astype(np.float32),
                        fg.reshape(h, w), pose, tuple(float(x) for x in background))


def implicit_value(theta, p) -> np.ndarray:
    """f(p) = sum(((p - c)/a)^2) - 1, the surface's implicit function (used
    by the finite-difference normal oracle in tests)."""
    theta = np.asarray(theta, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    return np.sum(((p - theta[3:6]) / theta[0:3]) ** 2, axis=0) - 1.0


# ----------------------------------------------------------------------------
# dataset builder

@dataclass(frozen=True)
class DatasetConfig:
    n_identities: int = 150
    n_views: int = 24
    size: int = 32
    radius: float = 3.0
    elevations: Tuple[float, ...] = (0.0,)
    augment_background: bool = True
    seed: int = 0

    def to_dict(self):
        return {"n_identities": self.n_identities, "n_views": self.n_views,
                "size": self.size, "radius": self.radius,
                "elevations": list(self.elevations),
                "augment_background": self.augment_background, "seed": self.seed}


def dataset_intrinsics(size: int) -> CameraIntrinsics:
    return CameraIntrinsics.square(size)


def build_dataset(out_dir, cfg: DatasetConfig = DatasetConfig()) -> str:
    """Write samples and the scene manifest; returns the manifest path.

    Views sit on an orbit grid: azimuths j*360/n_views (equal gaps covering
    the full circle), elevations cycling through cfg.elevations.  With
    augmentation on, each sample's white background is replaced by a random
    color with probability 1/2.  Fully deterministic under cfg.seed.
    """
    out_dir = os.fspath(out_dir)
    intr = dataset_intrinsics(cfg.size)
    identities = []
    for i in range(cfg.n_identities):
        id_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, i]))
        ident = sample_identity(id_rng)
        views = []
        for j in range(cfg.n_views):
            yaw = 360.0 * j / cfg.n_views
            pitch = cfg.elevations[j % len(cfg.elevations)]
            pose = orbit_to_pose(OrbitSpec(yaw, pitch, cfg.radius))
            v_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, i, j]))
            background = (1.0, 1.0, 1.0)
            if cfg.augment_background and v_rng.random() < 0.5:
                background = tuple(v_rng.uniform(0.0, 1.0, size=3))
            sample = render_view(ident.theta, pose, intr, background=background)
            rel = {
                "image": f"id{i:04d}/v{j:02d}_img.npy",
                "normals": f"id{i:04d}/v{j:02d}_nrm.npy",
                "foreground": f"id{i:04d}/v{j:02d}_fg.npy",
            }
            containers.save_array(os.path.join(out_dir, rel["image"]), sample.image)
            containers.save_array(os.path.join(out_dir, rel["normals"]), sample.normals)
            containers.save_array(os.path.join(out_dir, rel["foreground"]), sample.foreground)
            views.append({
                "yaw": yaw, "pitch": pitch, "radius": cfg.radius,
                "files": rel,
                "background": [float(x) for x in background],
                **pose.to_dict(),
            })
        identities.append({"theta": [float(x) for x in ident.theta], "views": views})
    manifest = {
        "version": 1,
        "config": cfg.to_dict(),
        "intrinsics": {"focal_x": intr.focal_x, "focal_y": intr.focal_y,
                       "principal_x": intr.principal_x, "principal_y": intr.principal_y,
                       "width": intr.width, "height": intr.height},
        "identities": identities,
    }
    path = os.path.join(out_dir, "manifest.json")
    containers.dump_json(path, manifest)
    return path


# ----------------------------------------------------------------------------
# dataset access

class Dataset:
    def __init__(self, manifest_path):
        self.root = os.path.dirname(os.fspath(manifest_path))
        self.manifest = containers.load_json(manifest_path)
        if self.manifest.get("version") != 1:
            raise ValueError("unsupported dataset manifest version")
        i = self.manifest["intrinsics"]
        self.intrinsics = CameraIntrinsics(i["focal_x"], i["focal_y"], i["principal_x"],
                                           i["principal_y"], i["width"], i["height"])

    @property
    def n_identities(self) -> int:
        return len(self.manifest["identities"])

    @property
    def n_views(self) -> int:
        return len(self.manifest["identities"][0]["views"])

    def theta(self, i: int) -> np.ndarray:
        return np.asarray(self.manifest["identities"][i]["theta"], dtype=np.float64)

    def view_meta(self, i: int, j: int) -> dict:
        return self.manifest["identities"][i]["views"][j]

    def pose(self, i: int, j: int) -> CameraPose:
        return CameraPose.from_dict(self.view_meta(i, j))

    def load_view(self, i: int, j: int) -> RenderSample:
        meta = self.view_meta(i, j)
        return RenderSample(
            image=containers.load_array(os.path.join(self.root, meta["files"]["image"])),
            normals=containers.load_array(os.path.join(self.root, meta["files"]["normals"])),
            foreground=containers.load_array(os.path.join(self.root, meta["files"]["foreground"])),
            pose=self.pose(i, j),
            background=tuple(meta["background"]),
        )

    def load_scene(self, i: int) -> dict:
        """All views of one identity stacked (images, normals, yaws, poses)."""
        views = self.manifest["identities"][i]["views"]
        imgs, nrms, poses, yaws, pitches = [], [], [], [], []
        for j in range(len(views)):
            s = self.load_view(i, j)
            imgs.append(s.image)
            nrms.append(s.normals)
            poses.append(s.pose)
            yaws.append(views[j]["yaw"])
            pitches.append(views[j]["pitch"])
        return {"theta": self.theta(i), "images": np.stack(imgs), "normals": np.stack(nrms),
                "poses": poses, "yaws": np.asarray(yaws), "pitches": np.asarray(pitches)}


def identity_embedding(theta, den) -> "object":
    """Pad the generative parameters into the denoiser's identity token."""
    return den.build_condition_sequence(np.asarray(theta, dtype=np.float64))
