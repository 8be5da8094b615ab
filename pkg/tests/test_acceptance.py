"""Shipping checklist for the package, one test per numbered bar.

Each test measures the stated quantity at the stated tolerance and prints a
single line ``acceptance N: PASS/FAIL (details)``; run with ``-s`` (or read
failure output) to see the measured numbers.  Bars 1-7 and 9 are analytic or
statistical oracles and run in seconds to minutes; bar 8 trains the reference
model from scratch and dominates the suite's runtime by design.
"""

import hashlib
import json
import os
import time

import numpy as np
import pytest
import torch

from orbitdiff.cli import main as cli_main
from orbitdiff.denoiser import (FrameBatch, FrameLayout, PrecondConfig, ViewFrame,
                                ROLE_CONDITIONING, ROLE_TARGET, build_denoiser,
                                load_denoiser, save_denoiser)
from orbitdiff.edm import edm_discretization, loss_weight
from orbitdiff.geometry import (CameraIntrinsics, OrbitSpec, RaymapConfig, orbit_to_pose,
                                raymap_for_view, transform_pose)
from orbitdiff.guidance import GuidanceConfig, guided_churn_sample
from orbitdiff.network import NetConfig
from orbitdiff.pipeline import evaluate_heldout
from orbitdiff.sampler import ChurnSpec, SamplerConfig, churned_euler_sample
from orbitdiff.synthdata import Dataset, DatasetConfig, build_dataset
from orbitdiff.train import StepInfo, TrainConfig, train
from orbitdiff.views import format_plan, plan_views

from conftest import TINY_SIZE, tiny_layout, tiny_net_cfg

# reference-model evaluation settings for bar 8 (calibrated on this package's
# reference training run; the table-derived schedule stays inside the noise
# range the reference model was actually trained on)
REF_TRAIN = TrainConfig()                       # 3000 + 3000 steps, width default
REF_SCFG = SamplerConfig(steps=50, guidance_scale=2.0, schedule_kind="ddpm-table", seed=0)
REF_GCFG = GuidanceConfig(alpha=1e5, steps=50, seed=0)
REF_HELDOUT = 20


def _check(num: int, ok: bool, detail: str):
    line = f"acceptance {num}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    assert ok, line


# ----------------------------------------------------------------------------
# 1. preconditioning identities

def test_acceptance_01_preconditioning_identities(tiny_denoiser):
    t0 = time.monotonic()
    sig = np.logspace(np.log10(1e-3), np.log10(700.0), 1000)
    worst = 0.0
    for s in sig:
        c = tiny_denoiser.coeffs(float(s))
        worst = max(worst,
                    abs(loss_weight(float(s)) * c.c_out * c.c_out - 1.0),
                    abs(c.c_in * c.c_in * (s * s + 1.0) - 1.0))
    dt = time.monotonic() - t0
    _check(1, worst < 1e-6 and dt < 1.0,
           f"max identity error {worst:.3g} over 1000 sigmas, {dt:.2f}s")


# ----------------------------------------------------------------------------
# 2. Gaussian-oracle distribution recovery

def test_acceptance_02_gaussian_oracle_distribution():
    t0 = time.monotonic()
    dim, n = 8, 20000
    mu = np.array([0.8, -0.4, 0.3, 0.0, -0.7, 0.25, -0.1, 0.55])
    sched = edm_discretization(50, sigma_max=700.0, rho=7.0)
    worst_mu, worst_var = 0.0, 0.0
    for sd in (0.25, 0.5, 1.0):
        def denoise_fn(x, sigma, _sd=sd):
            w = _sd * _sd / (_sd * _sd + sigma * sigma)
            return w * x + (1.0 - w) * mu
        rng = np.random.default_rng(np.random.SeedSequence([202, int(sd * 100)]))
        x0 = rng.standard_normal((n, dim)) * float(sched.sigmas[0])
        x = churned_euler_sample(x0, sched, denoise_fn, rng=rng, second_order=True)
        worst_mu = max(worst_mu, float(np.max(np.abs(x.mean(axis=0) - mu))))
        worst_var = max(worst_var, float(np.max(np.abs(x.var(axis=0) / (sd * sd) - 1.0))))
    dt = time.monotonic() - t0
    _check(2, worst_mu < 0.02 and worst_var < 0.10 and dt < 30.0,
           f"mean err {worst_mu:.4f} (tol 0.02), var err {worst_var*100:.1f}% (tol 10%), {dt:.1f}s")


# ----------------------------------------------------------------------------
# 3. guidance: alpha=0 equivalence and posterior pull

def _gaussian_world():
    rng = np.random.default_rng(np.random.SeedSequence([77]))
    mu = np.array([0.5, -0.3, 0.7, 0.1])
    a = rng.normal(size=(4, 4))
    cov = a @ a.T / 2.0 + 0.05 * np.eye(4)

    def denoise_fn(x, sigma):
        j = cov @ np.linalg.inv(cov + sigma * sigma * np.eye(4))
        return mu + (np.asarray(x) - mu) @ j.T

    def vjp_fn(x, sigma, cot):
        j = cov @ np.linalg.inv(cov + sigma * sigma * np.eye(4))
        return np.asarray(cot) @ j

    return mu, cov, denoise_fn, vjp_fn


def test_acceptance_03_guidance_posterior_pull():
    t0 = time.monotonic()
    mu, cov, denoise_fn, vjp_fn = _gaussian_world()
    m = np.array([1.0, 1.0, 0.0, 0.0])
    z = np.array([0.9, -0.1, 0.0, 0.0])
    svv = cov[:2, :2]
    cond_mean = mu[2:] + cov[2:, :2] @ np.linalg.solve(svv, z[:2] - mu[:2])
    sched = edm_discretization(50)

    # bitwise: alpha=0 goes through the plain loop
    rng_a = np.random.default_rng(np.random.SeedSequence([31]))
    rng_b = np.random.default_rng(np.random.SeedSequence([31]))
    x0 = rng_a.standard_normal(4) * float(sched.sigmas[0])
    plain = churned_euler_sample(x0.copy(), sched, denoise_fn, rng=rng_a)
    guided0 = guided_churn_sample(z, m, sched, denoise_fn, vjp_fn, ChurnSpec(), 0.0,
                                  rng_b, x_init=x0.copy())
    bitwise = bool(np.array_equal(plain, guided0))

    n = 2000
    losses, hidden_err = {}, None
    for alpha in (0.0, 1e2, 1e5):
        hid = np.zeros(2)
        loss = 0.0
        for k in range(n):
            # same seeds across alphas: paired comparison of the same draws
            rng = np.random.default_rng(np.random.SeedSequence([32, k]))
            x = guided_churn_sample(z, m, sched, denoise_fn, vjp_fn, ChurnSpec(), alpha, rng)
            hid += x[2:]
            r = (z - x) * m
            loss += float(r @ r)
        losses[alpha] = loss / n
        if alpha == 1e5:
            hidden_err = float(np.max(np.abs(hid / n - cond_mean)))
    # both large alphas saturate at the same correction, so allow an exact tie
    # there; the drop from the unguided loss must be real
    monotone = losses[0.0] > losses[1e2] and losses[1e5] <= losses[1e2] * (1 + 1e-9)
    dt = time.monotonic() - t0
    _check(3, bitwise and hidden_err < 0.05 and monotone and dt < 120.0,
           f"alpha=0 bitwise={bitwise}, cond-mean err {hidden_err:.4f} (tol 0.05), "
           f"masked loss {losses[0.0]:.3g} > {losses[1e2]:.3g} >= {losses[1e5]:.3g}, {dt:.0f}s")


# ----------------------------------------------------------------------------
# 4. view-plan conformance

def test_acceptance_04_view_plan_conformance():
    t0 = time.monotonic()
    ok, notes = True, []
    for input_yaw in (0.0, 222.25):
        plan = plan_views(input_yaw, step=7.5)
        rel = sorted(round((a - input_yaw) % 360.0, 6) for a in plan.anchor_pass.target_yaws)
        ok &= rel == sorted(x % 360.0 for x in (45, -45, 90, -90, 135, -135, 180))
        yaws = plan.covered_yaws
        ok &= len(yaws) == 48 and len(set(round(y % 360.0, 6) for y in yaws)) == 48
        grid = np.sort(np.array([y % 360.0 for y in yaws]))
        gaps = np.diff(np.append(grid, grid[0] + 360.0))
        ok &= bool(np.allclose(gaps, 7.5, atol=1e-9))
        for p in plan.passes:
            ok &= len(p.conditioning) + len(p.target_yaws) <= 8
        for p in plan.intermediate_passes:
            ok &= len(p.conditioning) == 3 and p.conditioning[0].kind == "input"
        ok &= format_plan(plan) == format_plan(plan_views(input_yaw, step=7.5))
        notes.append(f"yaw {input_yaw}: {len(yaws)} views")
    dt = time.monotonic() - t0
    _check(4, ok and dt < 1.0, "; ".join(notes) + f", gap==7.5, M+K<=8, {dt:.2f}s")


# ----------------------------------------------------------------------------
# 5. raymap invariance under global rigid motion

def _random_rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def test_acceptance_05_raymap_rigid_invariance():
    t0 = time.monotonic()
    intr = CameraIntrinsics.square(32)
    rm_cfg = RaymapConfig()
    worst = 0.0
    for s in range(100):
        rng = np.random.default_rng(np.random.SeedSequence([404, s]))
        ref = orbit_to_pose(OrbitSpec(float(rng.uniform(0, 360)), float(rng.uniform(-40, 40)),
                                      float(rng.uniform(2, 4))))
        tgt = orbit_to_pose(OrbitSpec(float(rng.uniform(0, 360)), float(rng.uniform(-40, 40)),
                                      float(rng.uniform(2, 4))))
        base = raymap_for_view(tgt, intr, ref, 32, 32, rm_cfg).channels
        r, t = _random_rotation(rng), rng.normal(scale=2.0, size=3)
        moved = raymap_for_view(transform_pose(tgt, r, t), intr,
                                transform_pose(ref, r, t), 32, 32, rm_cfg).channels
        worst = max(worst, float(np.max(np.abs(moved - base))))
    dt = time.monotonic() - t0
    _check(5, worst < 1e-5 and dt < 5.0,
           f"max abs change {worst:.2e} over 100 scenes (tol 1e-5), {dt:.1f}s")


# ----------------------------------------------------------------------------
# 6. vjp against central finite differences

def test_acceptance_06_vjp_matches_finite_differences():
    t0 = time.monotonic()
    lay = tiny_layout()
    den = build_denoiser(tiny_net_cfg(), lay, PrecondConfig(), seed=3, dtype="float64")
    # measurably nonzero network: perturb the zero-initialized output conv
    prng = np.random.default_rng(np.random.SeedSequence([55]))
    with torch.no_grad():
        for p in den.net.out.parameters():
            p.add_(torch.from_numpy(prng.normal(0, 0.05, size=tuple(p.shape))))
    rng = np.random.default_rng(np.random.SeedSequence([56]))
    intr = CameraIntrinsics.square(TINY_SIZE)
    ref = orbit_to_pose(OrbitSpec(0.0, 0.0, 3.0))
    poses = [ref, orbit_to_pose(OrbitSpec(45.0, 0.0, 3.0)), orbit_to_pose(OrbitSpec(180.0, 0.0, 3.0))]
    rms = [raymap_for_view(p, intr, ref, lay.size, lay.size, lay.raymap).channels for p in poses]
    sigma = 0.8

    def make_batch(x):
        frames = [ViewFrame(rng0_img, rng0_nrm, rms[0], ROLE_CONDITIONING)]
        for i in range(2):
            frames.append(ViewFrame(x[i, :lay.c_img], x[i, lay.c_img:], rms[i + 1], ROLE_TARGET))
        return FrameBatch(frames, [0.0, sigma, sigma])

    rng0_img = rng.random((lay.c_img, lay.size, lay.size))
    rng0_nrm = rng.random((lay.c_nrm, lay.size, lay.size))
    x = rng.standard_normal((2, lay.c_lat, lay.size, lay.size))
    cond = den.build_condition_sequence(rng.normal(size=den.net.cfg.id_dim))
    cot = rng.standard_normal(x.shape)
    g = den.vjp(make_batch(x), cond, cot)

    h = 1e-4 * (1.0 + float(np.sqrt(np.mean(x * x))))
    worst = 0.0
    for _ in range(10):
        v = rng.standard_normal(x.shape)
        v /= np.sqrt(np.sum(v * v))
        d_plus = den.forward(make_batch(x + h * v), cond).denoised
        d_minus = den.forward(make_batch(x - h * v), cond).denoised
        rhs = float(np.sum(cot * (d_plus - d_minus))) / (2.0 * h)
        lhs = float(np.sum(g * v))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-12))
    dt = time.monotonic() - t0
    _check(6, worst < 1e-3 and dt < 30.0,
           f"max relative error {worst:.2e} over 10 probes (tol 1e-3), {dt:.1f}s")


# ----------------------------------------------------------------------------
# 7. trainer statistics

def test_acceptance_07_trainer_statistics(tmp_path):
    t0 = time.monotonic()
    data_dir = tmp_path / "data"
    manifest = build_dataset(data_dir, DatasetConfig(n_identities=6, n_views=12,
                                                     size=TINY_SIZE, seed=13))
    infos: list[StepInfo] = []
    cfg = TrainConfig(steps_phase1=2000, steps_phase2=3000, batch_scenes=2, lr=1e-3,
                      ckpt_every=5000, seed=0)
    train(manifest, cfg, tmp_path / "run", net_cfg=tiny_net_cfg(), layout=tiny_layout(),
          hook=infos.append)

    drops = [d for i in infos for d in i.dropped]
    drop_rate = float(np.mean(drops))
    p2 = [m for i in infos if i.phase == 2 for m in i.ms]
    freqs = {m: p2.count(m) / len(p2) for m in (0, 1, 3)}
    noise_free = all(i.cond_noise_free for i in infos)
    ok = (abs(drop_rate - 0.15) <= 0.03
          and all(abs(freqs[m] - 1 / 3) <= 0.04 for m in (0, 1, 3))
          and noise_free and len(infos) == 5000)
    dt = time.monotonic() - t0
    _check(7, ok and dt < 600.0,
           f"dropout {drop_rate:.3f} (0.15±0.03), regime freqs "
           + "/".join(f"{freqs[m]:.3f}" for m in (0, 1, 3))
           + f" (1/3±0.04), cond noise-free={noise_free}, {dt:.0f}s")


# ----------------------------------------------------------------------------
# 8. end-to-end bar on the reference model

def test_acceptance_08_end_to_end_reference_model(tmp_path_factory):
    root = tmp_path_factory.mktemp("reference")
    # reference corpus: canonical white background; the per-view background
    # augmentation is exercised by its own contract tests, but here it would
    # decouple target backgrounds from the conditioning view and put a noise
    # floor above the PSNR bar
    manifest = build_dataset(root / "data",
                             DatasetConfig(augment_background=False))
    t0 = time.monotonic()
    ckpt = train(manifest, REF_TRAIN, root / "run",
                 scene_indices=list(range(150 - REF_HELDOUT)))
    train_min = (time.monotonic() - t0) / 60.0
    den, _, _ = load_denoiser(ckpt)
    ds = Dataset(manifest)
    res = evaluate_heldout(den, ds, list(range(150 - REF_HELDOUT, 150)),
                           scfg=REF_SCFG, gcfg=REF_GCFG, seed=0)
    ok = (train_min < 60.0 and res["psnr_gain_db"] >= 2.0
          and res["normal_angle_model_deg"] < res["normal_angle_const_baseline_deg"])
    _check(8, ok,
           f"train {train_min:.1f} min (<60); psnr {res['psnr_model']:.2f} vs copy "
           f"{res['psnr_copy_baseline']:.2f} dB (gain {res['psnr_gain_db']:+.2f}, need >=+2); "
           f"normals {res['normal_angle_model_deg']:.1f} vs constant "
           f"{res['normal_angle_const_baseline_deg']:.1f} deg")


# ----------------------------------------------------------------------------
# 9. byte-identical CLI reruns

def _digest(root) -> str:
    h = hashlib.sha256()
    for dirpath, _, files in sorted(os.walk(root)):
        for name in sorted(files):
            p = os.path.join(dirpath, name)
            h.update(os.path.relpath(p, root).encode())
            with open(p, "rb") as f:
                h.update(f.read())
    return h.hexdigest()


def test_acceptance_09_cli_rerun_determinism(tmp_path):
    data = tmp_path / "data"
    assert cli_main(["gen-data", "--out", str(data), "--identities", "2", "--views", "12",
                     "--size", str(TINY_SIZE), "--seed", "4"]) == 0
    ckpt = tmp_path / "net.ckpt"
    save_denoiser(ckpt, build_denoiser(tiny_net_cfg(), tiny_layout(), PrecondConfig(), seed=9))
    manifest = str(data / "manifest.json")

    runs = {
        "gen-data": ["gen-data", "--out", str(data), "--identities", "2", "--views", "12",
                     "--size", str(TINY_SIZE), "--seed", "4"],
        "dump-plan": ["dump-plan", "--input-yaw", "30", "--out", str(tmp_path / "plan")],
        "dump-schedule": ["dump-schedule", "--kind", "ddpm-table", "--steps", "50",
                          "--out", str(tmp_path / "sched")],
        "sample-uncond": ["sample-uncond", "--ckpt", str(ckpt), "--data", manifest,
                          "--out", str(tmp_path / "uncond"), "--num", "2", "--steps", "3",
                          "--seed", "1"],
        "interp-id": ["interp-id", "--ckpt", str(ckpt), "--data", manifest,
                      "--out", str(tmp_path / "interp"), "--id-a", "0", "--id-b", "1",
                      "--steps", "3", "--seed", "1"],
        "inpaint-normals": ["inpaint-normals", "--ckpt", str(ckpt), "--data", manifest,
                            "--out", str(tmp_path / "inp"), "--input", "0:0", "--steps", "4",
                            "--seed", "1"],
        "sample-views": ["sample-views", "--ckpt", str(ckpt), "--data", manifest,
                         "--out", str(tmp_path / "views"), "--input", "0:0", "--steps", "3",
                         "--guide-steps", "3", "--anchors-only", "--seed", "1"],
    }
    out_dirs = {"gen-data": data, "dump-plan": tmp_path / "plan",
                "dump-schedule": tmp_path / "sched", "sample-uncond": tmp_path / "uncond",
                "interp-id": tmp_path / "interp", "inpaint-normals": tmp_path / "inp",
                "sample-views": tmp_path / "views"}
    stable, detail = True, []
    for name, argv in runs.items():
        assert cli_main(argv) == 0, name
        first = _digest(out_dirs[name])
        assert cli_main(argv) == 0, name
        same = _digest(out_dirs[name]) == first
        stable &= same
        detail.append(f"{name}:{'=' if same else '!'}")
    _check(9, stable, "rerun digests " + " ".join(detail))
