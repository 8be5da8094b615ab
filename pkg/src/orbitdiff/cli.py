"""Command-line surface.

Subcommands: gen-data, train, sample-views, inpaint-normals, sample-uncond,
interp-id, eval, dump-plan, dump-schedule.

Conventions shared by every run:
  * flags override values from an optional --config JSON file, which in turn
    overrides built-in defaults; the fully resolved config is echoed to
    stdout and written as run_config.json next to the artifacts;
  * relative --out paths are rooted at $ORBITDIFF_OUT (cwd when unset);
  * exit status: 0 ok, 1 usage problem, 2 runtime failure.
"""

import argparse
import os
import sys
from typing import Optional

import numpy as np
import torch

from . import containers
from .denoiser import FrameLayout, PrecondConfig, load_denoiser
from .edm import SigmaSchedule, ddpm_discretization, edm_discretization, format_schedule
from .geometry import OrbitSpec, orbit_to_pose, raymap_for_view
from .guidance import GuidanceConfig, recover_normals
from .metrics import MetricReport, normals_angular_error
from .network import NetConfig
from .pipeline import evaluate_heldout, run_view_sampling
from .sampler import ChurnSpec, SamplerConfig, sample_identity_only, interpolate_identity
from .synthdata import Dataset, DatasetConfig, build_dataset
from .train import TrainConfig, train
from .views import format_plan, plan_views

OUT_ROOT_ENV = "ORBITDIFF_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; the contract here is 1
    def error(self, message):
        raise UsageError(message)


# ----------------------------------------------------------------------------
# config resolution

def _out_dir(path: str) -> str:
    root = os.environ.get(OUT_ROOT_ENV, "")
    p = path if os.path.isabs(path) or not root else os.path.join(root, path)
    os.makedirs(p, exist_ok=True)
    return p


def _resolve(args, defaults: dict, required=()) -> dict:
    """defaults <- config file <- explicitly set flags; unknown keys rejected."""
    from_file = {}
    if getattr(args, "config", None):
        from_file = containers.load_json(args.config)
        unknown = sorted(set(from_file) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    cfg = dict(defaults)
    cfg.update(from_file)
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    missing = [k for k in required if cfg.get(k) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return cfg


def _echo(command: str, cfg: dict, out_dir: Optional[str] = None):
    resolved = {"command": command, **cfg}
    print("config " + containers.canonical_json(resolved))
    if out_dir is not None:
        containers.dump_json(os.path.join(out_dir, "run_config.json"), resolved)


def _parse_input_ref(cfg) -> tuple:
    """--input 'i[:j]' or explicit --identity/--view; returns (identity, view)."""
    i, j = cfg.get("identity"), cfg.get("view")
    ref = cfg.get("input")
    if ref is not None:
        parts = str(ref).split(":")
        try:
            i = int(parts[0])
            j = int(parts[1]) if len(parts) > 1 else 0
        except ValueError:
            raise UsageError(f"bad --input reference {ref!r} (expected IDENTITY[:VIEW])")
    if i is None:
        raise UsageError("no input view: pass --input I[:J] or --identity/--view")
    return int(i), int(j or 0)


def _sampler_config(cfg) -> SamplerConfig:
    churn = ChurnSpec(s_churn=cfg.get("churn", 0.0))
    return SamplerConfig(steps=cfg["steps"], guidance_scale=cfg["gscale"], churn=churn,
                         schedule_kind=cfg.get("schedule", "edm"), seed=cfg["seed"],
                         second_order=bool(cfg.get("second_order", False)))


def _save_view(out_dir: str, stem: str, image: np.ndarray, normals: Optional[np.ndarray]):
    containers.save_array(os.path.join(out_dir, stem + "_img.npy"), image.astype(np.float32))
    containers.save_preview_png(os.path.join(out_dir, stem + "_img.png"), image)
    if normals is not None:
        containers.save_array(os.path.join(out_dir, stem + "_nrm.npy"), normals.astype(np.float32))
        containers.save_preview_png(os.path.join(out_dir, stem + "_nrm.png"), normals)


# ----------------------------------------------------------------------------
# subcommands

def _cmd_gen_data(args) -> int:
    cfg = _resolve(args, {
        "out": None, "identities": 150, "views": 24, "size": 32, "radius": 3.0,
        "elevations": [0.0], "augment": True, "seed": 0,
    }, required=("out",))
    out = _out_dir(cfg["out"])
    _echo("gen-data", cfg, out)
    manifest = build_dataset(out, DatasetConfig(
        n_identities=cfg["identities"], n_views=cfg["views"], size=cfg["size"],
        radius=cfg["radius"], elevations=tuple(cfg["elevations"]),
        augment_background=bool(cfg["augment"]), seed=cfg["seed"]))
    print(f"wrote {manifest}")
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve(args, {
        "data": None, "out": None, "phase1": 3000, "phase2": 3000, "batch": 2,
        "lr": 2e-3, "p_uncond": 0.15, "frontal_window": 60.0, "ckpt_every": 2000,
        "seed": 0, "width": 48, "train_identities": None, "resume": None,
    }, required=("data", "out"))
    out = _out_dir(cfg["out"])
    _echo("train", cfg, out)
    tcfg = TrainConfig(steps_phase1=cfg["phase1"], steps_phase2=cfg["phase2"],
                       batch_scenes=cfg["batch"], lr=cfg["lr"], p_uncond=cfg["p_uncond"],
                       frontal_window=cfg["frontal_window"], seed=cfg["seed"],
                       ckpt_every=cfg["ckpt_every"])
    ds = Dataset(cfg["data"])
    layout = FrameLayout(size=ds.intrinsics.width)
    net_cfg = NetConfig(in_channels=layout.c_total, out_channels=layout.c_lat,
                        width=cfg["width"], image_size=layout.size)
    indices = None
    if cfg["train_identities"] is not None:
        indices = list(range(int(cfg["train_identities"])))
    train(cfg["data"], tcfg, out, net_cfg=net_cfg, layout=layout,
          precond=PrecondConfig(), resume_from=cfg["resume"], scene_indices=indices)
    return 0


def _cmd_sample_views(args) -> int:
    cfg = _resolve(args, {
        "ckpt": None, "data": None, "out": None, "input": None, "identity": None,
        "view": None, "step": 7.5, "steps": 50, "gscale": 3.0, "alpha": 1e5,
        "guide_steps": 50, "seed": 0, "churn": 0.0, "schedule": "edm",
        "second_order": False, "anchors_only": False,
    }, required=("ckpt", "data", "out"))
    out = _out_dir(cfg["out"])
    _echo("sample-views", cfg, out)
    i, j = _parse_input_ref(cfg)
    den, _, _ = load_denoiser(cfg["ckpt"])
    ds = Dataset(cfg["data"])
    meta = ds.view_meta(i, j)
    view = ds.load_view(i, j)
    cond = den.build_condition_sequence(ds.theta(i))
    gcfg = GuidanceConfig(alpha=cfg["alpha"], steps=cfg["guide_steps"], seed=cfg["seed"])
    generated, input_normals, plan = run_view_sampling(
        den, view.image, view.pose, meta["yaw"], meta["pitch"], meta["radius"],
        ds.intrinsics, cond, step=cfg["step"], scfg=_sampler_config(cfg), gcfg=gcfg,
        seed=cfg["seed"], anchors_only=bool(cfg["anchors_only"]))
    with open(os.path.join(out, "plan.txt"), "w", encoding="utf-8") as f:
        f.write(format_plan(plan))
    entries = []
    _save_view(out, f"yaw{plan.input_yaw:06.2f}", view.image, input_normals)
    entries.append({"yaw": plan.input_yaw, "pitch": meta["pitch"], "is_input": True,
                    "stem": f"yaw{plan.input_yaw:06.2f}"})
    for gv in generated:
        stem = f"yaw{gv.yaw:06.2f}"
        _save_view(out, stem, gv.image, gv.normals)
        entries.append({"yaw": gv.yaw, "pitch": gv.pitch, "is_input": False, "stem": stem})
    containers.dump_json(os.path.join(out, "views.json"),
                         {"identity": i, "input_view": j, "views": entries})
    print(f"wrote {len(entries)} views to {out}")
    return 0


def _cmd_inpaint_normals(args) -> int:
    cfg = _resolve(args, {
        "ckpt": None, "data": None, "out": None, "input": None, "identity": None,
        "view": None, "alpha": 1e5, "steps": 50, "seed": 0,
    }, required=("ckpt", "data", "out"))
    out = _out_dir(cfg["out"])
    _echo("inpaint-normals", cfg, out)
    i, j = _parse_input_ref(cfg)
    den, _, _ = load_denoiser(cfg["ckpt"])
    ds = Dataset(cfg["data"])
    view = ds.load_view(i, j)
    cond = den.build_condition_sequence(ds.theta(i))
    gcfg = GuidanceConfig(alpha=cfg["alpha"], steps=cfg["steps"], seed=cfg["seed"])
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 5]))
    normals, latents = recover_normals(view.image, view.pose, ds.intrinsics, cond, gcfg,
                                       den, rng=rng)
    _save_view(out, "recovered", view.image, normals)
    containers.save_array(os.path.join(out, "latents.npy"), latents.astype(np.float32))
    err = normals_angular_error(normals, view.normals, view.foreground)
    print(f"angular error vs dataset normals: {err:.3f} deg")
    return 0


def _free_target_raymaps(den, yaws, pitch, radius, intr):
    """Raymaps for an all-target pass; reference = first target (as trained)."""
    lay = den.layout
    poses = [orbit_to_pose(OrbitSpec(y, pitch, radius)) for y in yaws]
    ref = poses[0]
    rms = [raymap_for_view(p, intr, ref, lay.size, lay.size, lay.raymap).channels for p in poses]
    return np.stack(rms), poses


def _cmd_sample_uncond(args) -> int:
    cfg = _resolve(args, {
        "ckpt": None, "data": None, "out": None, "num": 4, "pitch": 0.0,
        "identity": None, "steps": 50, "gscale": None, "seed": 0, "churn": 0.0,
        "schedule": "edm", "second_order": False,
    }, required=("ckpt", "data", "out"))
    out = _out_dir(cfg["out"])
    if not (1 <= int(cfg["num"]) <= 8):
        raise UsageError("--num must lie in [1, 8] (frame budget)")
    # identity-free draws extrapolate nothing: force the plain conditional path
    if cfg["gscale"] is None:
        cfg["gscale"] = 3.5 if cfg["identity"] is not None else 1.0
    _echo("sample-uncond", cfg, out)
    den, _, _ = load_denoiser(cfg["ckpt"])
    ds = Dataset(cfg["data"])
    radius = ds.manifest["config"]["radius"]
    yaws = [360.0 * k / int(cfg["num"]) for k in range(int(cfg["num"]))]
    raymaps, poses = _free_target_raymaps(den, yaws, cfg["pitch"], radius, ds.intrinsics)
    theta = None if cfg["identity"] is None else ds.theta(int(cfg["identity"]))
    cond = den.build_condition_sequence(theta)
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 7]))
    x = sample_identity_only(cond, _sampler_config(cfg), den, raymaps, rng=rng)
    lay = den.layout
    for k, y in enumerate(yaws):
        img = np.clip(x[k, :lay.c_img], 0.0, 1.0)
        nrm = np.clip(x[k, lay.c_img:], 0.0, 1.0)
        _save_view(out, f"yaw{y:06.2f}", img, nrm)
    print(f"wrote {len(yaws)} frames to {out}")
    return 0


def _cmd_interp_id(args) -> int:
    cfg = _resolve(args, {
        "ckpt": None, "data": None, "out": None, "id_a": None, "id_b": None,
        "t": 0.5, "yaw": 0.0, "pitch": 0.0, "steps": 50, "gscale": 3.5,
        "seed": 0, "churn": 0.0, "schedule": "edm", "second_order": False,
    }, required=("ckpt", "data", "out", "id_a", "id_b"))
    out = _out_dir(cfg["out"])
    _echo("interp-id", cfg, out)
    den, _, _ = load_denoiser(cfg["ckpt"])
    ds = Dataset(cfg["data"])
    cond = interpolate_identity(ds.theta(int(cfg["id_a"])), ds.theta(int(cfg["id_b"])),
                                float(cfg["t"]), den)
    radius = ds.manifest["config"]["radius"]
    raymaps, _ = _free_target_raymaps(den, [cfg["yaw"]], cfg["pitch"], radius, ds.intrinsics)
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 8]))
    x = sample_identity_only(cond, _sampler_config(cfg), den, raymaps, rng=rng)
    lay = den.layout
    _save_view(out, f"t{float(cfg['t']):.3f}", np.clip(x[0, :lay.c_img], 0.0, 1.0),
               np.clip(x[0, lay.c_img:], 0.0, 1.0))
    print(f"wrote interpolation frame to {out}")
    return 0


def _eval_dirs(pred_dir: str, gt_dir: str) -> MetricReport:
    names = sorted(f for f in os.listdir(pred_dir) if f.endswith("_img.npy"))
    if not names:
        raise RuntimeError(f"no *_img.npy files under {pred_dir}")
    report = MetricReport()
    for fname in names:
        gt_img = os.path.join(gt_dir, fname)
        if not os.path.exists(gt_img):
            raise RuntimeError(f"missing ground-truth file {gt_img}")
        pred = containers.load_array(os.path.join(pred_dir, fname))
        gt = containers.load_array(gt_img)
        stem = fname[:-len("_img.npy")]
        kw = {}
        p_nrm = os.path.join(pred_dir, stem + "_nrm.npy")
        g_nrm = os.path.join(gt_dir, stem + "_nrm.npy")
        g_fg = os.path.join(gt_dir, stem + "_fg.npy")
        if os.path.exists(p_nrm) and os.path.exists(g_nrm) and os.path.exists(g_fg):
            kw = {"pred_normals": containers.load_array(p_nrm),
                  "gt_normals": containers.load_array(g_nrm),
                  "foreground": containers.load_array(g_fg)}
        report.add(stem, pred, gt, **kw)
    return report


def _cmd_eval(args) -> int:
    cfg = _resolve(args, {
        "pred": None, "gt": None, "ckpt": None, "data": None, "out": None,
        "heldout": 20, "steps": 50, "gscale": 3.0, "alpha": 1e5, "seed": 0,
        "churn": 0.0, "schedule": "edm", "second_order": False,
    })
    if cfg["pred"] is not None or cfg["gt"] is not None:
        if cfg["pred"] is None or cfg["gt"] is None:
            raise UsageError("directory mode needs both --pred and --gt")
        out = _out_dir(cfg["out"]) if cfg["out"] else None
        _echo("eval", cfg, out)
        report = _eval_dirs(cfg["pred"], cfg["gt"])
        text = report.to_text()
        sys.stdout.write(text)
        if out:
            with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as f:
                f.write(text)
        return 0
    if cfg["ckpt"] is None or cfg["data"] is None:
        raise UsageError("pass --pred/--gt directories or --ckpt/--data for held-out eval")
    out = _out_dir(cfg["out"]) if cfg["out"] else None
    _echo("eval", cfg, out)
    den, _, _ = load_denoiser(cfg["ckpt"])
    ds = Dataset(cfg["data"])
    n = int(cfg["heldout"])
    if n < 1 or n > ds.n_identities:
        raise UsageError("--heldout outside the dataset's identity range")
    indices = list(range(ds.n_identities - n, ds.n_identities))
    res = evaluate_heldout(den, ds, indices, scfg=_sampler_config(cfg),
                           gcfg=GuidanceConfig(alpha=cfg["alpha"], seed=cfg["seed"]),
                           seed=cfg["seed"])
    for k in sorted(res):
        print(f"{k} {res[k]:.6g}" if isinstance(res[k], float) else f"{k} {res[k]}")
    if out:
        containers.dump_json(os.path.join(out, "heldout.json"), res)
    return 0


def _cmd_dump_plan(args) -> int:
    cfg = _resolve(args, {"input_yaw": 0.0, "step": 7.5, "pitch": 0.0, "out": None})
    text = format_plan(plan_views(cfg["input_yaw"], step=cfg["step"], pitch=cfg["pitch"]))
    if cfg["out"]:
        out = _out_dir(cfg["out"])
        _echo("dump-plan", cfg, out)
        with open(os.path.join(out, "plan.txt"), "w", encoding="utf-8") as f:
            f.write(text)
    else:
        _echo("dump-plan", cfg)
        sys.stdout.write(text)
    return 0


def _cmd_dump_schedule(args) -> int:
    cfg = _resolve(args, {"kind": "edm", "steps": 50, "sigma_min": 0.002,
                          "sigma_max": 700.0, "rho": 7.0, "out": None})
    if cfg["kind"] == "edm":
        sched = edm_discretization(cfg["steps"], cfg["sigma_min"], cfg["sigma_max"], cfg["rho"])
    elif cfg["kind"] == "ddpm-table":
        sched = ddpm_discretization(cfg["steps"])
    else:
        raise UsageError(f"unknown schedule kind {cfg['kind']!r}")
    text = format_schedule(sched)
    if cfg["out"]:
        out = _out_dir(cfg["out"])
        _echo("dump-schedule", cfg, out)
        with open(os.path.join(out, "schedule.txt"), "w", encoding="utf-8") as f:
            f.write(text)
    else:
        _echo("dump-schedule", cfg)
        sys.stdout.write(text)
    return 0


# ----------------------------------------------------------------------------
# parser assembly

def _add(sub, name, fn, flags):
    p = sub.add_parser(name)
    p.add_argument("--config", default=None, help="JSON file with defaults for this command")
    for flag, kw in flags:
        p.add_argument(flag, **kw)
    p.set_defaults(func=fn)
    return p


def _num(s):
    return float(s)


def build_parser() -> _Parser:
    parser = _Parser(prog="orbitdiff")
    sub = parser.add_subparsers(dest="command", metavar="command")
    paths = [("--out", {"default": None})]
    model = [("--ckpt", {"default": None}), ("--data", {"default": None})]
    inp = [("--input", {"default": None, "metavar": "I[:J]"}),
           ("--identity", {"type": int, "default": None}),
           ("--view", {"type": int, "default": None})]
    samp = [("--steps", {"type": int, "default": None}),
            ("--gscale", {"type": _num, "default": None}),
            ("--seed", {"type": int, "default": None}),
            ("--churn", {"type": _num, "default": None}),
            ("--schedule", {"choices": ["edm", "ddpm-table"], "default": None}),
            ("--second-order", {"action": "store_true", "default": None})]

    _add(sub, "gen-data", _cmd_gen_data, paths + [
        ("--identities", {"type": int, "default": None}),
        ("--views", {"type": int, "default": None}),
        ("--size", {"type": int, "default": None}),
        ("--radius", {"type": _num, "default": None}),
        ("--elevations", {"type": _num, "nargs": "+", "default": None}),
        ("--augment", {"action": "store_true", "default": None}),
        ("--no-augment", {"action": "store_false", "dest": "augment", "default": None}),
        ("--seed", {"type": int, "default": None})])
    _add(sub, "train", _cmd_train, paths + [
        ("--data", {"default": None}),
        ("--phase1", {"type": int, "default": None}),
        ("--phase2", {"type": int, "default": None}),
        ("--batch", {"type": int, "default": None}),
        ("--lr", {"type": _num, "default": None}),
        ("--p-uncond", {"type": _num, "default": None}),
        ("--frontal-window", {"type": _num, "default": None}),
        ("--ckpt-every", {"type": int, "default": None}),
        ("--width", {"type": int, "default": None}),
        ("--train-identities", {"type": int, "default": None}),
        ("--resume", {"default": None}),
        ("--seed", {"type": int, "default": None})])
    _add(sub, "sample-views", _cmd_sample_views, paths + model + inp + samp + [
        ("--step", {"type": _num, "default": None}),
        ("--alpha", {"type": _num, "default": None}),
        ("--guide-steps", {"type": int, "default": None}),
        ("--anchors-only", {"action": "store_true", "default": None})])
    _add(sub, "inpaint-normals", _cmd_inpaint_normals, paths + model + inp + [
        ("--alpha", {"type": _num, "default": None}),
        ("--steps", {"type": int, "default": None}),
        ("--seed", {"type": int, "default": None})])
    _add(sub, "sample-uncond", _cmd_sample_uncond, paths + model + samp + [
        ("--num", {"type": int, "default": None}),
        ("--pitch", {"type": _num, "default": None}),
        ("--identity", {"type": int, "default": None})])
    _add(sub, "interp-id", _cmd_interp_id, paths + model + samp + [
        ("--id-a", {"type": int, "default": None}),
        ("--id-b", {"type": int, "default": None}),
        ("--t", {"type": _num, "default": None}),
        ("--yaw", {"type": _num, "default": None}),
        ("--pitch", {"type": _num, "default": None})])
    _add(sub, "eval", _cmd_eval, paths + model + samp + [
        ("--pred", {"default": None}),
        ("--gt", {"default": None}),
        ("--heldout", {"type": int, "default": None}),
        ("--alpha", {"type": _num, "default": None})])
    _add(sub, "dump-plan", _cmd_dump_plan, paths + [
        ("--input-yaw", {"type": _num, "default": None}),
        ("--step", {"type": _num, "default": None}),
        ("--pitch", {"type": _num, "default": None})])
    _add(sub, "dump-schedule", _cmd_dump_schedule, paths + [
        ("--kind", {"choices": ["edm", "ddpm-table"], "default": None}),
        ("--steps", {"type": int, "default": None}),
        ("--sigma-min", {"type": _num, "default": None}),
        ("--sigma-max", {"type": _num, "default": None}),
        ("--rho", {"type": _num, "default": None})])
    return parser


def main(argv=None) -> int:
    torch.set_num_threads(1)  # fixed reduction order -> reproducible artifacts
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return int(args.func(args) or 0)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failures map to a distinct status
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
