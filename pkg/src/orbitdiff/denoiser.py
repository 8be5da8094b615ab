"""Preconditioned multi-view denoiser.

A frame is packed channel-wise as [image latent | normal latent | ray map |
role mask].  The role mask is all-ones for conditioning frames (clean, they
enter at sigma=0) and all-zeros for target frames (the ones being denoised).
The denoiser D is built from the raw network F in the usual EDM convention

    D(x; sigma) = c_skip(sigma) * x + c_out(sigma) * F(c_in(sigma) * x; c_noise)

applied to the target frames' latent channels only; ray maps and masks pass
through unscaled, and conditioning frames' latents enter un-noised with a
c_noise embedding of 0.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from .edm import PreconditionCoeffs, precondition_edm, precondition_sd, sd_sigma_table
from .geometry import CameraPose, RaymapConfig, FULL_SCALE_RAYMAP
from .network import MultiViewNet, NetConfig
from . import containers

ROLE_CONDITIONING = "conditioning"
ROLE_TARGET = "target"

ALLOWED_COND_COUNTS = (0, 1, 3)


# ----------------------------------------------------------------------------
# frame layout and containers

@dataclass(frozen=True)
class FrameLayout:
    c_img: int = 3
    c_nrm: int = 3
    raymap: RaymapConfig = field(default_factory=RaymapConfig)
    size: int = 32

    @property
    def c_ray(self) -> int:
        return self.raymap.channels

    @property
    def c_lat(self) -> int:
        return self.c_img + self.c_nrm

    @property
    def c_total(self) -> int:
        return self.c_lat + self.c_ray + 1

    @staticmethod
    def full_scale() -> "FrameLayout":
        # 4 + 4 + 149 + 1 = 158 channels at 64x64
        return FrameLayout(c_img=4, c_nrm=4, raymap=FULL_SCALE_RAYMAP, size=64)

    def to_dict(self):
        return {"c_img": self.c_img, "c_nrm": self.c_nrm, "size": self.size,
                "ray_levels": self.raymap.levels, "ray_truncate": self.raymap.truncate_to}

    @staticmethod
    def from_dict(d):
        return FrameLayout(c_img=d["c_img"], c_nrm=d["c_nrm"], size=d["size"],
                           raymap=RaymapConfig(levels=d["ray_levels"], truncate_to=d["ray_truncate"]))


@dataclass
class ViewFrame:
    image_latent: np.ndarray   # (c_img, H, W)
    normal_latent: np.ndarray  # (c_nrm, H, W)
    raymap: np.ndarray         # (c_ray, H, W)
    role: str                  # conditioning | target
    pose: Optional[CameraPose] = None

    def __post_init__(self):
        if self.role not in (ROLE_CONDITIONING, ROLE_TARGET):
            raise ValueError(f"bad role {self.role!r}")

    @property
    def role_mask(self) -> np.ndarray:
        h, w = self.image_latent.shape[-2:]
        fill = 1.0 if self.role == ROLE_CONDITIONING else 0.0
        return np.full((1, h, w), fill, dtype=np.float32)

    @property
    def latent(self) -> np.ndarray:
        return np.concatenate([self.image_latent, self.normal_latent], axis=0)


@dataclass
class FrameBatch:
    frames: List[ViewFrame]
    sigma_per_frame: np.ndarray  # 0 for conditioning frames

    def __post_init__(self):
        self.sigma_per_frame = np.asarray(self.sigma_per_frame, dtype=np.float64)
        if len(self.sigma_per_frame) != len(self.frames):
            raise ValueError("sigma_per_frame length mismatch")
        m = sum(1 for f in self.frames if f.role == ROLE_CONDITIONING)
        if m not in ALLOWED_COND_COUNTS:
            raise ValueError(f"conditioning count {m} not in {ALLOWED_COND_COUNTS}")
        for f, s in zip(self.frames, self.sigma_per_frame):
            if f.role == ROLE_CONDITIONING and s != 0.0:
                raise ValueError("conditioning frames must carry sigma=0")

    @property
    def target_indices(self) -> List[int]:
        return [i for i, f in enumerate(self.frames) if f.role == ROLE_TARGET]


@dataclass
class DenoiserOutput:
    denoised: np.ndarray          # (K, c_lat, H, W), one row per target frame
    target_indices: List[int]


@dataclass
class IdentityCondition:
    raw_id: Optional[np.ndarray]
    padded_id: np.ndarray
    sequence: np.ndarray          # (seq_len, cond_dim) snapshot
    is_null: bool


# ----------------------------------------------------------------------------
# generic array-level wrapper (used by stubs and analytic oracles)

class WrappedDenoiser:
    """D(x; sigma) from a raw callable F(x_scaled, c_noise) and a coeffs fn."""

    def __init__(self, raw_net: Callable, coeffs_fn: Callable[[float], PreconditionCoeffs]):
        self.raw_net = raw_net
        self.coeffs_fn = coeffs_fn

    def denoise(self, x: np.ndarray, sigma: float) -> np.ndarray:
        c = self.coeffs_fn(sigma)
        f = self.raw_net(c.c_in * x, c.c_noise)
        f = np.asarray(f)
        if f.shape != x.shape:
            raise ValueError(f"raw net returned shape {f.shape}, expected {x.shape}")
        return c.c_skip * x + c.c_out * f

    __call__ = denoise


def wrap_precondition(raw_net: Callable, coeffs_fn: Callable[[float], PreconditionCoeffs]) -> WrappedDenoiser:
    return WrappedDenoiser(raw_net, coeffs_fn)


def finite_difference_vjp(denoise_fn: Callable, x: np.ndarray, sigma: float,
                          cotangent: np.ndarray, step_scale: float = 1e-3,
                          budget: int = 262144) -> np.ndarray:
    """Central-difference fallback for d<cotangent, D(x)>/dx.

    Costs 2*x.size denoiser calls; refuses inputs beyond `budget` entries.
    """
    if x.size > budget:
        raise ValueError(f"input has {x.size} entries, over the finite-difference budget {budget}")
    x = np.array(x, dtype=np.float64)  # owned contiguous copy: xf below must alias it
    h = step_scale * max(1.0, float(np.max(np.abs(x))))
    g = np.zeros_like(x, dtype=np.float64)
    flat = g.reshape(-1)
    xf = x.reshape(-1)
    for i in range(x.size):
        orig = xf[i]
        xf[i] = orig + h
        dp = denoise_fn(x, sigma)
        xf[i] = orig - h
        dm = denoise_fn(x, sigma)
        xf[i] = orig
        flat[i] = float(np.sum(cotangent * (dp - dm)) / (2.0 * h))
    return g.reshape(x.shape)


# ----------------------------------------------------------------------------
# the torch-backed multi-view denoiser

@dataclass(frozen=True)
class PrecondConfig:
    variant: str = "edm"       # "edm" | "sd"
    skip_mode: str = "bounded"  # for the edm variant

    def to_dict(self):
        return {"variant": self.variant, "skip_mode": self.skip_mode}


class MultiViewDenoiser:
    """Preconditioned wrapper around MultiViewNet operating on FrameBatch."""

    def __init__(self, net: MultiViewNet, layout: FrameLayout,
                 precond: PrecondConfig = PrecondConfig()):
        self.net = net
        self.layout = layout
        self.precond = precond
        self._sd_table = sd_sigma_table() if precond.variant == "sd" else None

    # -- plumbing ------------------------------------------------------
    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype

    def coeffs(self, sigma: float) -> PreconditionCoeffs:
        if self.precond.variant == "edm":
            return precondition_edm(sigma, self.precond.skip_mode)
        return precondition_sd(sigma, self._sd_table)

    def _t(self, a) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(a)).to(self.dtype)

    # -- identity conditioning -----------------------------------------
    def build_condition_sequence(self, raw_id: Optional[np.ndarray]) -> IdentityCondition:
        cfg = self.net.cfg
        if raw_id is None:
            seq = self.net.null_sequence.detach().cpu().numpy().copy()
            return IdentityCondition(None, np.zeros(cfg.cond_dim, dtype=np.float64), seq, True)
        raw_id = np.asarray(raw_id, dtype=np.float64).reshape(-1)
        if raw_id.shape[0] != cfg.id_dim:
            raise ValueError(f"raw identity must have dimension {cfg.id_dim}")
        padded = np.zeros(cfg.cond_dim, dtype=np.float64)
        padded[:cfg.id_dim] = raw_id
        seq_t = self.net.condition_sequence(self._t(padded))
        return IdentityCondition(raw_id.copy(), padded, seq_t.detach().cpu().numpy().copy(), False)

    def _cond_seq_torch(self, cond: IdentityCondition) -> torch.Tensor:
        if cond.is_null:
            return self.net.condition_sequence(None)
        return self.net.condition_sequence(self._t(cond.padded_id))

    # -- core torch path -------------------------------------------------
    def denoise_torch(self, x_hat: torch.Tensor, sigma: float,
                      cond_frames: Sequence[ViewFrame], target_raymaps: torch.Tensor,
                      cond: IdentityCondition) -> torch.Tensor:
        """x_hat: (K, c_lat, H, W) noisy target latents (torch); returns D, same shape.

        Frame order fed to the network: conditioning frames first (sigma=0,
        mask=1, clean latents), then targets (scaled by c_in, mask=0).
        """
        lay = self.layout
        K = x_hat.shape[0]
        c = self.coeffs(sigma)
        rows = []
        noises = []
        for f in cond_frames:
            rows.append(torch.cat([self._t(f.latent), self._t(f.raymap),
                                   torch.ones(1, lay.size, lay.size, dtype=self.dtype)], dim=0))
            noises.append(0.0)
        zeros_mask = torch.zeros(K, 1, lay.size, lay.size, dtype=self.dtype)
        tgt_rows = torch.cat([c.c_in * x_hat, target_raymaps, zeros_mask], dim=1)
        frames_t = torch.cat([torch.stack(rows), tgt_rows], dim=0) if rows else tgt_rows
        noises.extend([c.c_noise] * K)
        c_noise_t = torch.tensor(noises, dtype=self.dtype)
        raw = self.net(frames_t, c_noise_t, self._cond_seq_torch(cond))
        f_tgt = raw[len(cond_frames):]
        return c.c_skip * x_hat + c.c_out * f_tgt

    # -- FrameBatch API ----------------------------------------------------
    def _split_batch(self, batch: FrameBatch):
        tgt_idx = batch.target_indices
        if not tgt_idx:
            raise ValueError("batch has no target frames")
        sig = set(float(batch.sigma_per_frame[i]) for i in tgt_idx)
        if len(sig) != 1:
            raise ValueError("all target frames must share one sigma")
        sigma = sig.pop()
        cond_frames = [f for f in batch.frames if f.role == ROLE_CONDITIONING]
        x_hat = np.stack([batch.frames[i].latent for i in tgt_idx])
        raymaps = np.stack([batch.frames[i].raymap for i in tgt_idx])
        return cond_frames, x_hat, raymaps, sigma, tgt_idx

    def forward(self, batch: FrameBatch, cond: IdentityCondition) -> DenoiserOutput:
        cond_frames, x_hat, raymaps, sigma, tgt_idx = self._split_batch(batch)
        with torch.no_grad():
            d = self.denoise_torch(self._t(x_hat), sigma, cond_frames, self._t(raymaps), cond)
        return DenoiserOutput(d.cpu().numpy().astype(x_hat.dtype, copy=False), tgt_idx)

    def vjp(self, batch: FrameBatch, cond: IdentityCondition, cotangent: np.ndarray) -> np.ndarray:
        """Vector-Jacobian product of forward w.r.t. the target-frame latents."""
        cond_frames, x_hat, raymaps, sigma, _ = self._split_batch(batch)
        x_t = self._t(x_hat).requires_grad_(True)
        d = self.denoise_torch(x_t, sigma, cond_frames, self._t(raymaps), cond)
        (g,) = torch.autograd.grad(d, x_t, grad_outputs=self._t(np.asarray(cotangent)))
        return g.detach().cpu().numpy().astype(x_hat.dtype, copy=False)


# ----------------------------------------------------------------------------
# checkpoints

def build_denoiser(net_cfg: NetConfig, layout: FrameLayout, precond: PrecondConfig,
                   seed: int = 0, dtype: str = "float32") -> MultiViewDenoiser:
    net = MultiViewNet(net_cfg)
    if dtype == "float64":
        net = net.double()
    net.init_parameters(np.random.default_rng(np.random.SeedSequence([seed, 0xD0])))
    return MultiViewDenoiser(net, layout, precond)


def save_denoiser(path, den: MultiViewDenoiser, extra_arrays=None, extra_config=None):
    arrays = {f"param.{k}": v.detach().cpu().numpy() for k, v in den.net.named_parameters()}
    if extra_arrays:
        arrays.update(extra_arrays)
    cfg = {
        "net": den.net.cfg.to_dict(),
        "layout": den.layout.to_dict(),
        "precond": den.precond.to_dict(),
        "dtype": str(den.dtype).replace("torch.", ""),
        "extra": extra_config or {},
    }
    containers.save_checkpoint(path, arrays, cfg)


def load_denoiser(path):
    """Returns (denoiser, extra_arrays, extra_config)."""
    arrays, cfg = containers.load_checkpoint(path)
    net_cfg = NetConfig(**cfg["net"])
    net = MultiViewNet(net_cfg)
    if cfg["dtype"] == "float64":
        net = net.double()
    state = {k[len("param."):]: torch.from_numpy(v.copy()) for k, v in arrays.items()
             if k.startswith("param.")}
    net.load_state_dict(state)
    layout = FrameLayout.from_dict(cfg["layout"])
    den = MultiViewDenoiser(net, layout, PrecondConfig(**cfg["precond"]))
    extra_arrays = {k: v for k, v in arrays.items() if not k.startswith("param.")}
    return den, extra_arrays, cfg.get("extra", {})
