"""Planning a full 360-degree orbit of generated views.

Generation is staged: one pass generates 7 anchor views at fixed relative
yaws around the input (+/-45, +/-90, +/-135, 180 — together with the input
these scaffold the whole circle at 45-degree spacing), then intermediate
passes fill the grid.  Each intermediate pass conditions on the input plus
the two anchors bracketing its targets' arc (M=3) and generates at most 5
targets so every denoiser invocation stays within the 8-frame budget.

Yaw arithmetic is circular throughout; the target grid is laid out relative
to the input yaw, so plans are equivariant under rotating the input.
"""

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .denoiser import FrameBatch, FrameLayout, ViewFrame, ROLE_CONDITIONING, ROLE_TARGET

ANCHOR_OFFSETS = (45.0, -45.0, 90.0, -90.0, 135.0, -135.0, 180.0)
MAX_FRAMES_PER_PASS = 8
MAX_INTERMEDIATE_TARGETS = 5


def wrap_yaw(y: float) -> float:
    return float(np.mod(y, 360.0))


def signed_delta(a: float, b: float) -> float:
    """Circular a-b in [-180, 180)."""
    return float(np.mod(a - b + 180.0, 360.0) - 180.0)


def circular_distance(a: float, b: float) -> float:
    return abs(signed_delta(a, b))


@dataclass(frozen=True)
class ViewRef:
    kind: str   # "input" | "anchor"
    yaw: float  # absolute degrees

    def __post_init__(self):
        if self.kind not in ("input", "anchor"):
            raise ValueError(f"bad view ref kind {self.kind!r}")


@dataclass
class SamplingPass:
    conditioning: List[ViewRef]
    target_yaws: List[float]
    pitch: float = 0.0

    def __post_init__(self):
        if len(self.conditioning) not in (1, 3):
            raise ValueError("a pass conditions on 1 view (anchors) or 3 (intermediates)")
        if self.m + self.k > MAX_FRAMES_PER_PASS:
            raise ValueError("pass exceeds the frame budget")

    @property
    def m(self) -> int:
        return len(self.conditioning)

    @property
    def k(self) -> int:
        return len(self.target_yaws)


@dataclass
class ViewPlan:
    input_yaw: float
    input_pitch: float
    step: float
    anchor_pass: SamplingPass
    intermediate_passes: List[SamplingPass]

    @property
    def passes(self) -> List[SamplingPass]:
        return [self.anchor_pass] + list(self.intermediate_passes)

    @property
    def all_target_yaws(self) -> List[float]:
        out = list(self.anchor_pass.target_yaws)
        for p in self.intermediate_passes:
            out.extend(p.target_yaws)
        return out

    @property
    def covered_yaws(self) -> List[float]:
        return [self.input_yaw] + self.all_target_yaws


# ----------------------------------------------------------------------------
# planning

def plan_anchors(input_yaw: float, pitch: float = 0.0) -> SamplingPass:
    """One pass: M=1 (the input view), K=7 anchors at the fixed offsets."""
    input_yaw = wrap_yaw(input_yaw)
    targets = [wrap_yaw(input_yaw + off) for off in ANCHOR_OFFSETS]
    return SamplingPass([ViewRef("input", input_yaw)], targets, pitch=pitch)


def nearest_anchors(target_yaw: float, anchors: Sequence[float]) -> Tuple[int, int]:
    """Indices of the two circularly nearest anchors.

    Ties go to the smaller yaw value; the returned pair is ordered by signed
    circular offset from the target (the anchor "behind" first).
    """
    if len(anchors) < 2:
        raise ValueError("need at least 2 anchors")
    order = sorted(range(len(anchors)),
                   key=lambda i: (circular_distance(anchors[i], target_yaw), anchors[i]))
    k, l = order[0], order[1]
    if signed_delta(anchors[k], target_yaw) > signed_delta(anchors[l], target_yaw):
        k, l = l, k
    return k, l


def plan_intermediates(step: float, input_yaw: float, anchor_yaws: Sequence[float],
                       pitch: float = 0.0) -> List[SamplingPass]:
    """Fill the yaw grid (input_yaw + k*step) not already covered.

    Targets are grouped into contiguous arcs between circularly adjacent
    anchors (maximizing shared conditioning), then chunked to at most
    MAX_INTERMEDIATE_TARGETS per pass.  Conditioning is always
    [input, arc-start anchor, arc-end anchor].
    """
    n = 360.0 / step
    if abs(n - round(n)) > 1e-9 or step <= 0:
        raise ValueError("step must divide 360 evenly")
    n = int(round(n))
    input_yaw = wrap_yaw(input_yaw)
    # everything in input-relative coordinates
    rel_anchors = sorted(np.mod(np.asarray(anchor_yaws, dtype=np.float64) - input_yaw, 360.0))
    grid = [np.mod(i * step, 360.0) for i in range(n)]
    covered = {0.0} | {round(a, 9) for a in rel_anchors}
    passes = []
    for ai in range(len(rel_anchors)):
        a = rel_anchors[ai]
        b = rel_anchors[(ai + 1) % len(rel_anchors)]
        arc = np.mod(b - a, 360.0)
        inside = [g for g in grid
                  if 1e-9 < np.mod(g - a, 360.0) < arc - 1e-9 and round(g, 9) not in covered]
        inside.sort(key=lambda g: np.mod(g - a, 360.0))
        for i0 in range(0, len(inside), MAX_INTERMEDIATE_TARGETS):
            chunk = inside[i0:i0 + MAX_INTERMEDIATE_TARGETS]
            cond = [ViewRef("input", input_yaw),
                    ViewRef("anchor", wrap_yaw(a + input_yaw)),
                    ViewRef("anchor", wrap_yaw(b + input_yaw))]
            passes.append(SamplingPass(cond, [wrap_yaw(g + input_yaw) for g in chunk], pitch=pitch))
    return passes


def plan_views(input_yaw: float, step: float = 7.5, pitch: float = 0.0) -> ViewPlan:
    ap = plan_anchors(input_yaw, pitch=pitch)
    ips = plan_intermediates(step, input_yaw, ap.target_yaws, pitch=pitch)
    return ViewPlan(wrap_yaw(input_yaw), pitch, step, ap, ips)


def max_coverage_gap(yaws: Sequence[float]) -> float:
    ys = np.sort(np.mod(np.asarray(yaws, dtype=np.float64), 360.0))
    gaps = np.diff(np.append(ys, ys[0] + 360.0))
    return float(np.max(gaps))


# ----------------------------------------------------------------------------
# plan dump / parse (text round-trip used by the CLI and golden tests)

def format_plan(plan: ViewPlan) -> str:
    def fy(y):
        return f"{y:.6g}"

    lines = [f"# view plan v1 step={fy(plan.step)}",
             f"input yaw={fy(plan.input_yaw)} pitch={fy(plan.input_pitch)}"]
    for idx, p in enumerate(plan.passes):
        kind = "anchors" if idx == 0 else "intermediate"
        cond = ",".join(f"{r.kind}:{fy(r.yaw)}" for r in p.conditioning)
        tgts = ",".join(fy(t) for t in p.target_yaws)
        lines.append(f"pass {idx} kind={kind} pitch={fy(p.pitch)} cond={cond} targets={tgts}")
    return "\n".join(lines) + "\n"


def parse_plan(text: str) -> ViewPlan:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    head = lines[0]
    if not head.startswith("# view plan v1"):
        raise ValueError("not a v1 view plan")
    step = float(head.split("step=")[1])
    kv = dict(tok.split("=") for tok in lines[1].split()[1:])
    input_yaw, input_pitch = float(kv["yaw"]), float(kv["pitch"])
    anchor_pass = None
    intermediates = []
    for ln in lines[2:]:
        toks = ln.split()
        fields = dict(tok.split("=", 1) for tok in toks[2:])
        cond = []
        for c in fields["cond"].split(","):
            kind, yaw = c.split(":")
            cond.append(ViewRef(kind, float(yaw)))
        tgts = [float(t) for t in fields["targets"].split(",")]
        sp = SamplingPass(cond, tgts, pitch=float(fields["pitch"]))
        if fields["kind"] == "anchors":
            anchor_pass = sp
        else:
            intermediates.append(sp)
    if anchor_pass is None:
        raise ValueError("plan has no anchor pass")
    return ViewPlan(input_yaw, input_pitch, step, anchor_pass, intermediates)


# ----------------------------------------------------------------------------
# frame packing

def pack_frames(images: Sequence[np.ndarray], normals: Sequence[np.ndarray],
                raymaps: Sequence[np.ndarray], roles: Sequence[str],
                sigma_targets: float = 0.0, poses=None) -> FrameBatch:
    """Assemble per-view arrays into a FrameBatch (channel order
    [image | normals | raymap | mask] when packed)."""
    if not (len(images) == len(normals) == len(raymaps) == len(roles)):
        raise ValueError("pack_frames: inconsistent view counts")
    frames = []
    sigmas = []
    for i, role in enumerate(roles):
        pose = poses[i] if poses is not None else None
        frames.append(ViewFrame(np.asarray(images[i], dtype=np.float32),
                                np.asarray(normals[i], dtype=np.float32),
                                np.asarray(raymaps[i], dtype=np.float32), role, pose))
        sigmas.append(0.0 if role == ROLE_CONDITIONING else sigma_targets)
    return FrameBatch(frames, np.asarray(sigmas))


def to_channels(batch: FrameBatch) -> np.ndarray:
    """(P, c_img + c_nrm + c_ray + 1, H, W) packed array."""
    rows = []
    for f in batch.frames:
        rows.append(np.concatenate([f.image_latent, f.normal_latent, f.raymap, f.role_mask], axis=0))
    return np.stack(rows)


def unpack(packed: np.ndarray, layout: FrameLayout) -> dict:
    """Inverse of to_channels given the layout; returns per-view arrays."""
    if packed.shape[1] != layout.c_total:
        raise ValueError(f"packed channel count {packed.shape[1]} != layout {layout.c_total}")
    ci, cn = layout.c_img, layout.c_nrm
    return {
        "image": packed[:, :ci],
        "normals": packed[:, ci:ci + cn],
        "raymap": packed[:, ci + cn:ci + cn + layout.c_ray],
        "mask": packed[:, ci + cn + layout.c_ray:],
    }
