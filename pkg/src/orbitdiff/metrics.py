"""Image metrics: L2/PSNR/SSIM, normals angular error, identity consistency.

SSIM uses a uniform 8x8 window (mean over valid positions, channels
averaged) with the usual stabilizers C1=(0.01)^2, C2=(0.03)^2 for data in
[0, 1].  PSNR is 10*log10(1/mse), capped at 99 dB for exact matches.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .synthdata import render_view


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def l2(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


PSNR_CAP = 99.0


def psnr(a, b) -> float:
    mse = l2(a, b)
    if mse <= 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def _box_mean(x: np.ndarray, k: int) -> np.ndarray:
    """Mean over all k x k windows (valid positions) via an integral image."""
    s = np.cumsum(np.cumsum(x, axis=0), axis=1)
    s = np.pad(s, ((1, 0), (1, 0)))
    tot = s[k:, k:] - s[:-k, k:] - s[k:, :-k] + s[:-k, :-k]
    return tot / (k * k)


def ssim(a, b, window: int = 8, c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> float:
    a, b = _check_pair(a, b)
    if a.min() < -1e-6 or a.max() > 1 + 1e-6 or b.min() < -1e-6 or b.max() > 1 + 1e-6:
        raise ValueError("ssim expects values in [0, 1]")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if min(a.shape[-2:]) < window:
        raise ValueError("image smaller than the ssim window")
    vals = []
    for ch in range(a.shape[0]):
        x, y = a[ch], b[ch]
        mx, my = _box_mean(x, window), _box_mean(y, window)
        vx = _box_mean(x * x, window) - mx * mx
        vy = _box_mean(y * y, window) - my * my
        cxy = _box_mean(x * y, window) - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def normals_angular_error(pred_enc, gt_enc, foreground) -> float:
    """Mean angle (degrees) between decoded normals over foreground pixels."""
    pred, gt = _check_pair(pred_enc, gt_enc)
    fg = np.asarray(foreground, dtype=bool)
    if not np.any(fg):
        raise ValueError("empty foreground mask")
    p = (pred * 2.0 - 1.0)[:, fg]
    g = (gt * 2.0 - 1.0)[:, fg]
    denom = np.linalg.norm(p, axis=0) * np.linalg.norm(g, axis=0)
    dots = np.clip(np.sum(p * g, axis=0) / np.maximum(denom, 1e-12), -1.0, 1.0)
    return float(np.degrees(np.mean(np.arccos(dots))))


# ----------------------------------------------------------------------------

def identity_consistency(images: Sequence[np.ndarray], poses, theta, intr,
                         background=(1.0, 1.0, 1.0)) -> dict:
    """Render the known identity at the generated poses and score agreement.

    Higher SSIM/PSNR against the analytic re-render means the generations
    kept the subject's geometry and albedo (a stand-in for a learned
    identity-similarity scorer, which would need a pretrained network).
    """
    if len(images) == 0:
        raise ValueError("no views supplied")
    if len(images) != len(poses):
        raise ValueError("views and poses disagree")
    s_list, p_list = [], []
    for img, pose in zip(images, poses):
        ref = render_view(theta, pose, intr, background=background)
        s_list.append(ssim(np.clip(img, 0.0, 1.0), ref.image))
        p_list.append(psnr(img, ref.image))
    return {"ssim": float(np.mean(s_list)), "psnr": float(np.mean(p_list)),
            "per_view_ssim": s_list, "per_view_psnr": p_list}


# ----------------------------------------------------------------------------

@dataclass
class MetricReport:
    per_view: List[dict] = field(default_factory=list)

    def add(self, name: str, pred, gt, foreground: Optional[np.ndarray] = None,
            pred_normals=None, gt_normals=None):
        entry = {"name": name, "l2": l2(pred, gt), "psnr": psnr(pred, gt),
                 "ssim": ssim(np.clip(pred, 0, 1), np.clip(gt, 0, 1))}
        if pred_normals is not None:
            entry["normal_angle_deg"] = normals_angular_error(pred_normals, gt_normals, foreground)
        self.per_view.append(entry)

    def aggregate(self) -> dict:
        if not self.per_view:
            raise ValueError("empty report")
        keys = [k for k in self.per_view[0] if k != "name"]
        return {k: float(np.mean([e[k] for e in self.per_view if k in e])) for k in keys}

    def to_text(self) -> str:
        lines = []
        for e in self.per_view:
            vals = " ".join(f"{k}={e[k]:.6g}" for k in e if k != "name")
            lines.append(f"view {e['name']} {vals}")
        agg = self.aggregate()
        lines.append("aggregate " + " ".join(f"{k}={agg[k]:.6g}" for k in sorted(agg)))
        return "\n".join(lines) + "\n"
