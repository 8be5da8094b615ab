"""Training loop.

Phase 1 trains with a single conditioning view; phase 2 draws the
conditioning count M from {0, 1, 3} uniformly.  Per step: one noise level
sigma ~ exp(Normal(P_mean, P_std^2)) shared by the whole batch, shifted by
sqrt(K) for the K jointly denoised targets of each scene; noise goes to
target latents only (conditioning latents stay clean at sigma=0 — asserted
every step); with probability p_uncond the identity sequence is replaced by
the null sequence and the conditioning frames' latents are zeroed (ray maps
and role masks stay).  The loss is lambda(sigma) * mean((D - clean)^2),
whose weight makes the raw network's regression target unit-scale.

Every step draws its randomness from a Generator seeded by (seed, step), so
training is resumable bitwise: a run restarted from a checkpoint consumes
exactly the same random stream as an uninterrupted one.
"""

import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
import torch

from . import containers
from .denoiser import (FrameLayout, MultiViewDenoiser, PrecondConfig, ViewFrame,
                       ROLE_CONDITIONING, build_denoiser, load_denoiser, save_denoiser)
from .edm import NoiseDistribution, loss_weight, sample_training_sigma, shift_sigma_for_views
from .geometry import camera_rays, encode_raymap, relative_rays
from .network import NetConfig
from .synthdata import Dataset
from .views import signed_delta

FRAMES_PER_SCENE = 8


@dataclass(frozen=True)
class TrainConfig:
    steps_phase1: int = 3000
    steps_phase2: int = 3000
    batch_scenes: int = 2
    lr: float = 2e-3
    lr_final: float = 2e-4           # cosine-decayed to by the last step
    grad_clip: float = 1.0           # global grad-norm ceiling; 0 disables
    input_perturb: float = 0.1       # extra input noise fraction; 0 disables
    ema_decay: float = 0.999         # weight EMA; checkpoints carry the EMA
    p_uncond: float = 0.15
    regime: tuple = (0, 1, 3)          # phase-2 conditioning counts
    regime_probs: tuple = (1 / 3, 1 / 3, 1 / 3)
    frontal_window: float = 60.0       # deg; first conditioning view must face front
    seed: int = 0
    ckpt_every: int = 2000
    noise: NoiseDistribution = field(default_factory=NoiseDistribution)

    def __post_init__(self):
        if not (0.0 <= self.p_uncond <= 1.0):
            raise ValueError("p_uncond must lie in [0, 1]")
        if abs(sum(self.regime_probs) - 1.0) > 1e-9:
            raise ValueError("regime probabilities must sum to 1")

    def to_dict(self):
        return {"steps_phase1": self.steps_phase1, "steps_phase2": self.steps_phase2,
                "batch_scenes": self.batch_scenes, "lr": self.lr, "lr_final": self.lr_final,
                "grad_clip": self.grad_clip, "input_perturb": self.input_perturb,
                "ema_decay": self.ema_decay, "p_uncond": self.p_uncond,
                "regime": list(self.regime), "regime_probs": list(self.regime_probs),
                "frontal_window": self.frontal_window, "seed": self.seed,
                "ckpt_every": self.ckpt_every,
                "noise": {"p_mean": self.noise.p_mean, "p_std": self.noise.p_std}}


@dataclass
class StepInfo:
    step: int
    phase: int
    ms: List[int]            # conditioning count per scene in the batch
    dropped: List[bool]      # CFG dropout flag per scene
    sigma: float             # unshifted step sigma
    sigmas_shifted: List[float]
    loss: float
    cond_noise_free: bool    # conditioning latents entered clean at sigma=0


class _SceneCache:
    """Holds decoded views and per-view world rays for raymap assembly."""

    def __init__(self, ds: Dataset, indices):
        self.intr = ds.intrinsics
        self.scenes = []
        for i in indices:
            sc = ds.load_scene(i)
            size = sc["images"].shape[-1]
            rays = [camera_rays(p, ds.intrinsics, size, size) for p in sc["poses"]]
            sc["rays"] = rays
            self.scenes.append(sc)


def _frontal_candidates(yaws, window):
    return [j for j, y in enumerate(yaws) if abs(signed_delta(float(y), 0.0)) <= window]


def _scene_frames(scene, cond_idx, tgt_idx, layout: FrameLayout):
    """Build conditioning ViewFrames and target (clean latents, raymaps)."""
    ref_j = cond_idx[0] if cond_idx else tgt_idx[0]
    ref_pose = scene["poses"][ref_j]

    def rm(j):
        o, d = relative_rays(*scene["rays"][j], ref_pose)
        return encode_raymap(o, d, layout.raymap).channels

    cond_frames = [ViewFrame(scene["images"][j], scene["normals"][j], rm(j),
                             ROLE_CONDITIONING, scene["poses"][j]) for j in cond_idx]
    clean = np.stack([np.concatenate([scene["images"][j], scene["normals"][j]]) for j in tgt_idx])
    raymaps = np.stack([rm(j) for j in tgt_idx])
    return cond_frames, clean.astype(np.float32), raymaps.astype(np.float32)


def _zero_latents(frames):
    return [ViewFrame(np.zeros_like(f.image_latent), np.zeros_like(f.normal_latent),
                      f.raymap, f.role, f.pose) for f in frames]


def training_step(den: MultiViewDenoiser, opt, cache: _SceneCache, cfg: TrainConfig,
                  step: int, phase: int) -> StepInfo:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3, step]))
    sigma_raw = float(sample_training_sigma(rng, cfg.noise))
    scene_ids = rng.integers(0, len(cache.scenes), size=cfg.batch_scenes)

    # preconditioning sanity, checked live on every step's noise level
    c = den.coeffs(sigma_raw)
    assert abs(loss_weight(sigma_raw) * c.c_out * c.c_out - 1.0) < 1e-6

    losses = []
    ms, dropped, shifted = [], [], []
    cond_noise_free = True
    for si in scene_ids:
        scene = cache.scenes[si]
        n_views = len(scene["poses"])
        if n_views < FRAMES_PER_SCENE:
            raise ValueError("scene supplies fewer views than the frame budget")
        m = 1 if phase == 1 else int(rng.choice(cfg.regime, p=cfg.regime_probs))
        remaining = list(range(n_views))
        cond_idx = []
        if m >= 1:
            front = _frontal_candidates(scene["yaws"], cfg.frontal_window)
            if not front:
                raise ValueError("no view inside the frontal conditioning window")
            first = int(rng.choice(front))
            cond_idx.append(first)
            remaining.remove(first)
            extra = list(rng.choice(remaining, size=m - 1, replace=False)) if m > 1 else []
            for e in extra:
                cond_idx.append(int(e))
                remaining.remove(int(e))
        k = FRAMES_PER_SCENE - m
        tgt_idx = [int(j) for j in rng.choice(remaining, size=k, replace=False)]
        drop = bool(rng.random() < cfg.p_uncond)

        cond_frames, clean, raymaps = _scene_frames(scene, cond_idx, tgt_idx, den.layout)
        for f in cond_frames:  # conditioning latents must be the clean renders
            cond_noise_free &= bool(np.array_equal(f.latent, np.concatenate(
                [f.image_latent, f.normal_latent])))
        sigma = shift_sigma_for_views(sigma_raw, k)
        eps = rng.standard_normal(clean.shape).astype(np.float32)
        if cfg.input_perturb > 0.0:
            # the sampler feeds x that is never exactly clean + sigma*eps, so
            # widen the input noise slightly without telling the net
            eps = eps + np.float32(cfg.input_perturb) * rng.standard_normal(
                clean.shape).astype(np.float32)
        x_hat = clean + np.float32(sigma) * eps

        use_cond = den.build_condition_sequence(None) if drop else scene["cond"]
        use_frames = _zero_latents(cond_frames) if drop else cond_frames
        d = den.denoise_torch(den._t(x_hat), sigma, use_frames, den._t(raymaps), use_cond)
        loss = loss_weight(sigma) * torch.mean((d - den._t(clean)) ** 2)
        losses.append(loss)
        ms.append(m)
        dropped.append(drop)
        shifted.append(sigma)

    total = torch.stack(losses).mean()
    if not torch.isfinite(total):
        raise RuntimeError(f"non-finite loss at step {step} (sigma={sigma_raw:.4g})")
    opt.zero_grad()
    total.backward()
    if cfg.grad_clip > 0.0:
        torch.nn.utils.clip_grad_norm_(opt.param_groups[0]["params"], cfg.grad_clip)
    opt.step()
    return StepInfo(step, phase, ms, dropped, sigma_raw, shifted, float(total.item()),
                    cond_noise_free)


# ----------------------------------------------------------------------------
# weight averaging: the checkpoint's `param.*` entries are the EMA (what
# inference should load); the live training weights ride along as `raw.*`

def _ema_update(ema, names, decay, step):
    d = min(decay, (1.0 + step) / (10.0 + step))   # ramp: track fast early on
    with torch.no_grad():
        for name, p in names:
            ema[name].mul_(d).add_(p.detach(), alpha=1.0 - d)


def _save_with_ema(path, den, names, ema, extra_arrays, extra_config):
    if ema is None:
        save_denoiser(path, den, extra_arrays=extra_arrays, extra_config=extra_config)
        return
    raw = {name: p.detach().clone() for name, p in names}
    extra_arrays = dict(extra_arrays)
    extra_arrays.update({f"raw.{name}": raw[name].cpu().numpy() for name in raw})
    with torch.no_grad():
        for name, p in names:
            p.copy_(ema[name])
    try:
        save_denoiser(path, den, extra_arrays=extra_arrays, extra_config=extra_config)
    finally:
        with torch.no_grad():
            for name, p in names:
                p.copy_(raw[name])


# ----------------------------------------------------------------------------
# optimizer state (de)serialization for bitwise resume

def _opt_arrays(opt, names):
    out = {}
    for name, p in names:
        st = opt.state.get(p)
        if not st:
            continue
        out[f"opt.{name}.exp_avg"] = st["exp_avg"].detach().cpu().numpy()
        out[f"opt.{name}.exp_avg_sq"] = st["exp_avg_sq"].detach().cpu().numpy()
        out[f"opt.{name}.step"] = np.asarray(float(st["step"]))
    return out


def _restore_opt(opt, names, arrays):
    for name, p in names:
        key = f"opt.{name}.exp_avg"
        if key not in arrays:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(arrays[f"opt.{name}.step"])),
            "exp_avg": torch.from_numpy(arrays[key].copy()).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(arrays[f"opt.{name}.exp_avg_sq"].copy()).to(p.dtype),
        }


# ----------------------------------------------------------------------------

def train(manifest_path, cfg: TrainConfig, out_dir,
          net_cfg: Optional[NetConfig] = None, layout: Optional[FrameLayout] = None,
          precond: Optional[PrecondConfig] = None, resume_from=None,
          scene_indices=None, hook: Optional[Callable[[StepInfo], None]] = None) -> str:
    """Run phase 1 then phase 2; returns the final checkpoint path.

    scene_indices restricts training to a subset of the dataset's identities
    (the usual split holds out the tail for evaluation).
    """
    os.makedirs(out_dir, exist_ok=True)
    ds = Dataset(manifest_path)
    layout = layout or FrameLayout(size=ds.intrinsics.width)
    start_step = 0
    if resume_from is not None:
        den, extra_arrays, extra = load_denoiser(resume_from)
        start_step = int(extra["global_step"])
    else:
        net_cfg = net_cfg or NetConfig(in_channels=layout.c_total, out_channels=layout.c_lat,
                                       image_size=layout.size)
        den = build_denoiser(net_cfg, layout, precond or PrecondConfig(), seed=cfg.seed)
        extra_arrays = {}

    if scene_indices is None:
        scene_indices = list(range(ds.n_identities))
    cache = _SceneCache(ds, scene_indices)
    for sc in cache.scenes:
        sc["cond"] = den.build_condition_sequence(sc["theta"])

    names = sorted(den.net.named_parameters(), key=lambda kv: kv[0])
    opt = torch.optim.Adam([p for _, p in names], lr=cfg.lr)
    if resume_from is not None:
        _restore_opt(opt, names, extra_arrays)

    total_steps = cfg.steps_phase1 + cfg.steps_phase2
    log_path = os.path.join(out_dir, "loss_log.txt")
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    # wall time goes to stdout only: checkpoints must be byte-stable reruns
    t0 = time.time()
    with open(log_path, "a", encoding="utf-8") as log:
        for step in range(start_step, total_steps):
            phase = 1 if step < cfg.steps_phase1 else 2
            # cosine decay as a pure function of step: resume reproduces it
            frac = step / max(total_steps - 1, 1)
            opt.param_groups[0]["lr"] = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (
                1.0 + math.cos(math.pi * frac))
            info = training_step(den, opt, cache, cfg, step, phase)
            if not info.cond_noise_free:
                raise RuntimeError("conditioning frames were not clean")
            log.write(f"{info.step} {info.phase} {','.join(map(str, info.ms))} "
                      f"{info.sigma:.6g} {info.loss:.6g}\n")
            if hook is not None:
                hook(info)
            if (step + 1) % cfg.ckpt_every == 0 or step + 1 == total_steps:
                save_denoiser(ckpt_path, den,
                              extra_arrays=_opt_arrays(opt, names),
                              extra_config={"global_step": step + 1,
                                            "train_cfg": cfg.to_dict()})
    print(f"trained {total_steps - start_step} steps in {time.time() - t0:.1f}s -> {ckpt_path}")
    return ckpt_path
