"""Toy multi-view denoising network.

Per-view conv encoder (two downsampling stages), joint attention over all
frames' coarse tokens (this is what ties the views together — there is no
frame-index positional encoding, so the network is permutation-equivariant
over frames and all cross-view information flows through the ray maps that
travel with each frame), cross-attention onto the identity token sequence,
and a per-view conv decoder with skip connections.  Two conditioning signals
additionally enter as additive encoder biases (like the noise embedding):
the identity token row, and a mask-weighted spatial mean over the
conditioning frames' input channels.  The attention paths alone start with
near-uniform weights, so these direct routes are what make the identity and
the reference appearance (notably the background color) trainable in a
short-budget run.

All parameters are (re)initialized from a numpy Generator so that weight
init is reproducible independently of torch's global RNG state.
"""

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 37        # per-frame: latents + ray map + role mask
    out_channels: int = 6        # image latent + normal latent estimate
    width: int = 48
    cond_dim: int = 32           # identity-token width D
    seq_len: int = 5             # template rows; token sits at token_slot
    token_slot: int = 3
    id_dim: int = 16             # raw identity vector length d
    heads: int = 4
    noise_emb_dim: int = 32
    max_frames: int = 8
    image_size: int = 32

    def to_dict(self):
        return asdict(self)


def sinusoidal_embedding(x: torch.Tensor, dim: int) -> torch.Tensor:
    """(P,) scalars -> (P, dim) sin/cos features, transformer-style."""
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=x.dtype, device=x.device) / max(half - 1, 1))
    ang = x[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class MultiViewNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        cw = 2 * w
        self.e1 = nn.Conv2d(cfg.in_channels, w, 3, padding=1)
        self.e2 = nn.Conv2d(w, w, 3, padding=1, stride=2)
        self.e3 = nn.Conv2d(w, cw, 3, padding=1, stride=2)
        self.mid = nn.Conv2d(cw, cw, 3, padding=1)
        self.noise_mlp = nn.Sequential(nn.Linear(cfg.noise_emb_dim, cw), nn.SiLU(), nn.Linear(cw, w + cw))
        self.cond_mlp = nn.Sequential(nn.Linear(cfg.cond_dim, cw), nn.SiLU(), nn.Linear(cw, w + cw))
        self.content_mlp = nn.Sequential(nn.Linear(cfg.in_channels, cw), nn.SiLU(), nn.Linear(cw, w + cw))
        self.attn = nn.MultiheadAttention(cw, cfg.heads, batch_first=True)
        self.attn_norm = nn.LayerNorm(cw)
        self.xattn = nn.MultiheadAttention(cw, cfg.heads, kdim=cfg.cond_dim, vdim=cfg.cond_dim,
                                           batch_first=True)
        self.xattn_norm = nn.LayerNorm(cw)
        coarse = cfg.image_size // 4
        self.pos = nn.Parameter(torch.zeros(coarse * coarse, cw))  # spatial only, shared by frames
        self.u3 = nn.ConvTranspose2d(cw, w, 4, stride=2, padding=1)
        self.f3 = nn.Conv2d(2 * w, w, 3, padding=1)
        self.u2 = nn.ConvTranspose2d(w, w, 4, stride=2, padding=1)
        self.f2 = nn.Conv2d(2 * w, w, 3, padding=1)
        self.out = nn.Conv2d(w, cfg.out_channels, 3, padding=1)
        # identity-condition constants: 5-row template (token row is replaced
        # by the padded identity at call time) and the learned null sequence
        self.template = nn.Parameter(torch.zeros(cfg.seq_len, cfg.cond_dim))
        self.null_sequence = nn.Parameter(torch.zeros(cfg.seq_len, cfg.cond_dim))

    # ------------------------------------------------------------------
    def init_parameters(self, rng: np.random.Generator):
        """Deterministic init: He-scaled normals for weights, zero biases,
        zero final conv (the raw net starts as F=0 so the wrapped denoiser
        starts at the skip path)."""
        dtype = next(self.parameters()).dtype
        for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
            with torch.no_grad():
                if name == "out.weight" or name == "out.bias":
                    p.zero_()
                elif name in ("template", "null_sequence"):
                    p.copy_(torch.from_numpy(rng.normal(0.0, 0.5, size=tuple(p.shape))).to(dtype))
                elif name == "pos":
                    p.copy_(torch.from_numpy(rng.normal(0.0, 0.02, size=tuple(p.shape))).to(dtype))
                elif name.endswith("bias"):
                    p.zero_()
                elif p.dim() >= 2:
                    fan_in = int(np.prod(p.shape[1:]))
                    std = 1.0 / math.sqrt(fan_in)
                    p.copy_(torch.from_numpy(rng.normal(0.0, std, size=tuple(p.shape))).to(dtype))
                else:  # layernorm weight
                    p.fill_(1.0)

    # ------------------------------------------------------------------
    def condition_sequence(self, padded_id: "torch.Tensor | None") -> torch.Tensor:
        """(seq_len, cond_dim) sequence; None selects the null sequence."""
        if padded_id is None:
            return self.null_sequence
        rows = [self.template[i] for i in range(self.cfg.seq_len)]
        rows[self.cfg.token_slot] = padded_id
        return torch.stack(rows, dim=0)

    def forward(self, frames: torch.Tensor, c_noise: torch.Tensor, cond_seq: torch.Tensor) -> torch.Tensor:
        """frames (P, Cin, H, W); c_noise (P,); cond_seq (seq_len, cond_dim).

        Returns raw predictions (P, out_channels, H, W) for every frame;
        callers select the target rows.
        """
        P = frames.shape[0]
        if P > self.cfg.max_frames:
            raise ValueError(f"{P} frames exceeds configured maximum {self.cfg.max_frames}")
        w = self.cfg.width
        nid = self.noise_mlp(sinusoidal_embedding(c_noise, self.cfg.noise_emb_dim))
        b1, b3 = nid[:, :w], nid[:, w:]
        cid = self.cond_mlp(cond_seq[self.cfg.token_slot])[None]   # same bias for every frame
        c1, c3 = cid[:, :w], cid[:, w:]
        # role-mask channel is 1 on conditioning frames only, so this pooled
        # summary carries their appearance (and is exactly zero when M = 0)
        mw = frames[:, -1].mean(dim=(1, 2))
        pooled = (frames.mean(dim=(2, 3)) * mw[:, None]).sum(0) / mw.sum().clamp(min=1.0)
        gid = self.content_mlp(pooled)[None]
        g1, g3 = gid[:, :w], gid[:, w:]

        h1 = F.silu(self.e1(frames) + (b1 + c1 + g1)[:, :, None, None])
        h2 = F.silu(self.e2(h1))
        h3 = F.silu(self.e3(h2) + (b3 + c3 + g3)[:, :, None, None])

        hw = h3.shape[-2] * h3.shape[-1]
        tok = h3.flatten(2).permute(0, 2, 1) + self.pos[None]   # (P, hw, cw)
        tok = tok.reshape(1, P * hw, -1)                        # joint over all frames
        tok = tok + self.attn(self.attn_norm(tok), self.attn_norm(tok), self.attn_norm(tok),
                              need_weights=False)[0]
        seq = cond_seq[None]
        tok = tok + self.xattn(self.xattn_norm(tok), seq, seq, need_weights=False)[0]
        h3 = h3 + tok.reshape(P, hw, -1).permute(0, 2, 1).reshape(h3.shape)
        h3 = F.silu(self.mid(h3))

        u = F.silu(self.u3(h3))
        u = F.silu(self.f3(torch.cat([u, h2], dim=1)))
        u = F.silu(self.u2(u))
        u = F.silu(self.f2(torch.cat([u, h1], dim=1)))
        return self.out(u)
