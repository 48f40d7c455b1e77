"""Acceptance checks for the relay cascade, one test per criterion.

Each test appends a PASS/FAIL line (value, tolerance, runtime) that is
printed in the terminal summary. The trained toy cascade is built once per
session; expect a few minutes on one CPU core.
"""

import copy
import csv
import hashlib
import subprocess
import sys
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES
from relaydiff import recipes
from relaydiff.codec import upsample
from relaydiff.config import RunConfig
from relaydiff.denoisers import GaussianOracle, TinyDenoiser, TinyDenoiserConfig, TinyDenoiserNet, save_checkpoint
from relaydiff.eval import (
    algebra_checks,
    interior_minimum,
    marginal_moment_test,
    sr_quality_report,
    start_ablation,
    tiling_deviation,
    verify_distillation_identity,
    verify_oracle_trajectory,
)
from relaydiff.pipeline import generate, with_guidance
from relaydiff.samplers import TileConfig, Tiled, relay_sample
from relaydiff.schedules import RelayConfig, make_noise_schedule
from relaydiff.training import TrainBatch, base_loss, relay_loss

TRAIN_BUDGET = 30 * 60
SR_RATIO_MAX = 0.8
DISTILL_RATIO_MAX = 1.25
TILE_CONV_TOL = RunConfig().eval.tile_tolerance


def _report(number, name, value, tol, passed, seconds, note=""):
    status = "PASS" if passed else "FAIL"
    tol = tol if isinstance(tol, str) else f"{tol:g}"
    line = f"[{status}] {number:2d} {name}: {value:.4g} (tol {tol}, {seconds:.1f}s)"
    ACCEPTANCE_LINES.append(line + (f" {note}" if note else ""))
    print(line)
    return passed


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    """Trained base and SR nets plus distilled snapshots keyed by step count."""
    out = tmp_path_factory.mktemp("toy")
    cfg = RunConfig()
    ds = recipes.training_set(cfg)
    nets, seconds = {}, {}
    for stage, name in (("base", "base"), ("super_resolution", "sr")):
        start = time.perf_counter()
        nets[name], _ = recipes.train_stage(stage, cfg, ds=ds)
        seconds[name] = time.perf_counter() - start
        save_checkpoint(out / f"{name}.npz", nets[name])
    snaps = {"sr": {}, "base": {}}
    for stage, name in (("super_resolution", "sr"), ("base", "base")):
        keep = lambda r, net, k, name=name: snaps[name].update({k: copy.deepcopy(net)})
        recipes.distill_stage(stage, nets[name], cfg, ds=ds, on_round=keep)
    return dict(cfg=cfg, nets=nets, snaps=snaps, seconds=seconds, dir=out, test=recipes.held_out(cfg))


def test_criterion_01_oracle_trajectory():
    sched = make_noise_schedule("linear", 1000, 1.0)
    res = verify_oracle_trajectory(sched, RelayConfig(500), trials=100)
    ok = res.passed and res.runtime < 5.0
    assert _report(1, "oracle trajectory max deviation", res.value, 1e-9, ok, res.runtime)


def test_criterion_02_distillation_identity():
    sched = make_noise_schedule("linear", 1000, 1.0)
    res = verify_distillation_identity(sched, RelayConfig(500), cases=1000)
    assert _report(2, "student step vs two teacher steps", res.value, 1e-9, res.passed, res.runtime)


def test_criterion_03_marginal_monte_carlo():
    sched = make_noise_schedule("cosine", 1000, 0.1)
    relay = RelayConfig.with_eta(500, sched, 0.5)
    rep = marginal_moment_test(sched, relay, n_samples=100_000, steps=10)
    ok = rep.passed and rep.runtime < 120
    worst = max(abs(r["var"] / r["sigma2"] - 1) for r in rep.rows if r["sigma2"] > 0)
    note = f"{len(rep.rows)} steps, worst variance ratio error {worst:.3g}"
    assert _report(3, "marginal moment steps failing", len(rep.failures()), 0, ok, rep.runtime, note)


def test_criterion_04_algebra():
    sched = make_noise_schedule("cosine", 1000, 0.1)
    start = time.perf_counter()
    checks = algebra_checks(sched, RelayConfig(500), n=10_000, codec=recipes.codec_for(RunConfig()))
    worst = max(c.value for c in checks)
    ok = all(c.passed for c in checks)
    assert _report(4, "blur, coefficient, codec and guidance algebra", worst, 1e-12, ok, time.perf_counter() - start)


def _gradcheck(loss_of, net, n_params=12, h=1e-6, seed=0):
    params = [p for p in net.parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss_of(), params, allow_unused=True)
    # the guidance projection is idle until distillation switches it on
    params, grads = zip(*[(p, g) for p, g in zip(params, grads) if g is not None])
    r = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_params):
        k = int(r.integers(len(params)))
        flat, gflat = params[k].data.view(-1), grads[k].view(-1)
        i = int(r.integers(flat.numel()))
        old = float(flat[i])
        with torch.no_grad():
            flat[i] = old + h
            lp = float(loss_of())
            flat[i] = old - h
            lm = float(loss_of())
            flat[i] = old
        fd = (lp - lm) / (2 * h)
        an = float(gflat[i])
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst


def test_criterion_05_gradient_check():
    start = time.perf_counter()
    sched = make_noise_schedule("cosine", 1000, 1.0)
    relay = RelayConfig(500)
    r = np.random.default_rng(3)
    z0 = torch.as_tensor(r.standard_normal((4, 4, 6, 6)))
    zL = torch.as_tensor(r.standard_normal((4, 4, 6, 6)))
    eps = torch.as_tensor(r.standard_normal((4, 4, 6, 6)))
    cond = np.array([0, 1, 2, 4])
    worst = 0.0
    for stage in ("base", "super_resolution"):
        torch.manual_seed(1)
        net = TinyDenoiserNet(TinyDenoiserConfig(channels=4, hidden=8, blocks=2, emb_dim=8, stage=stage)).double()
        with torch.no_grad():
            net.conv_out.weight.normal_(0, 0.1)  # zero init would leave most gradients trivially zero
        den = TinyDenoiser(net).torch_call
        if stage == "base":
            t = np.array([1, 200, 640, 1000])
            loss_of = lambda: base_loss(den, TrainBatch(z0, None, cond), sched, None, t=t, eps=eps)
        else:
            t = np.array([0, 3, 250, 500])
            loss_of = lambda: relay_loss(den, TrainBatch(z0, zL, cond), sched, relay, None, t=t, eps=eps)
        worst = max(worst, _gradcheck(loss_of, net, n_params=12, seed=len(stage)))
    assert _report(5, "gradient relative error (both losses, 24 params)", worst, 1e-4, worst <= 1e-4, time.perf_counter() - start)


@pytest.mark.slow
def test_criterion_06_toy_cascade(toy):
    cfg, test = toy["cfg"], toy["test"]
    start = time.perf_counter()
    out = recipes.sr_from_low(toy["nets"]["sr"], test, cfg)
    rep = sr_quality_report(out, test.images, recipes.bilinear_baseline(test))
    train_s = sum(toy["seconds"].values())
    ok = len(test) >= 64 and rep.ratio <= SR_RATIO_MAX and train_s <= TRAIN_BUDGET
    note = f"n={len(test)}, train {train_s:.0f}s"
    assert _report(6, "relay SR / bilinear MSE", rep.ratio, SR_RATIO_MAX, ok, time.perf_counter() - start, note)


@pytest.mark.slow
def test_criterion_07_start_ablation(toy, tmp_path):
    cfg, test = toy["cfg"], toy["test"]
    codec = recipes.codec_for(cfg)
    sch = recipes.schedules(cfg)
    start = time.perf_counter()
    path = tmp_path / "ablation.csv"
    rows = start_ablation(
        with_guidance(TinyDenoiser(toy["nets"]["sr"]), cfg.sampler.w_sr),
        codec.encode(upsample(test.low)),
        test.images,
        codec,
        sch.sr,
        cond=test.labels,
        fractions=(0.2, 0.4, 0.5, 0.6, 0.8),
        steps=cfg.sampler.sr_steps,
        baseline=recipes.bilinear_baseline(test),
        csv_path=path,
    )
    table = list(csv.DictReader(open(path)))
    ok = interior_minimum(rows) and len(table) == 5
    best = min(rows, key=lambda row: row["mse"])
    note = " ".join(f"{row['fraction']}:{row['ratio_to_bilinear']:.3f}" for row in rows)
    assert _report(7, "best start fraction", best["fraction"], "interior of 0.2..0.8", ok, time.perf_counter() - start, note)


def test_criterion_08a_tiling_exact_pointwise():
    sched = make_noise_schedule("cosine", 1000, 0.1)
    relay = RelayConfig(500)
    r = np.random.default_rng(0)
    zL = r.standard_normal((4, 128, 128))
    eps = r.standard_normal(zL.shape)
    oracle = GaussianOracle(0.2, 0.5, "base", sched)  # 1x1 receptive field
    tiles = TileConfig(72, 72, 16, "gaussian")  # 2 x 2 tiles
    start = time.perf_counter()
    a = relay_sample(zL, oracle, None, sched, relay, steps=10, eps=eps)
    b = relay_sample(zL, Tiled(oracle, tiles), None, sched, relay, steps=10, eps=eps)
    dev = float(np.max(np.abs(a - b)))
    assert _report(8, "tiled vs untiled, pointwise denoiser", dev, 1e-9, dev <= 1e-9, time.perf_counter() - start)


@pytest.mark.slow
def test_criterion_08b_tiling_trained_conv(toy):
    # report-only threshold: deviation is printed, the test does not fail on it
    cfg, test = toy["cfg"], toy["test"]
    codec = recipes.codec_for(cfg)
    sch = recipes.schedules(cfg)
    # 8 x 8 mosaic of held-out low images -> 128 x 128 SR latent
    low = test.low[:64, 0].reshape(8, 8, 32, 32).transpose(0, 2, 1, 3).reshape(1, 256, 256)
    zL = codec.encode(upsample(low))
    eps = np.random.default_rng(0).standard_normal(zL.shape)
    den = with_guidance(TinyDenoiser(toy["nets"]["sr"]), 1.0)
    start = time.perf_counter()
    a = relay_sample(zL, den, 0, sch.sr, sch.relay, steps=cfg.sampler.sr_steps, eps=eps)
    b = relay_sample(zL, Tiled(den, TileConfig(72, 72, 16, "gaussian")), 0, sch.sr, sch.relay, steps=cfg.sampler.sr_steps, eps=eps)
    dev = tiling_deviation(codec.decode(b), codec.decode(a), margin=32)
    ok = dev["interior_mean_abs"] <= TILE_CONV_TOL
    _report(8, "tiled vs untiled, trained conv (interior mean abs)", dev["interior_mean_abs"], TILE_CONV_TOL, ok, time.perf_counter() - start, "report-only")


@pytest.mark.slow
@pytest.mark.parametrize("sr_steps,base_steps", [(2, 8), (1, 4)])
def test_criterion_09_distilled_cascade(toy, sr_steps, base_steps):
    cfg, test = toy["cfg"], toy["test"]
    start = time.perf_counter()
    teacher_steps = cfg.distill.sr_initial_steps
    teacher = sr_quality_report(recipes.sr_from_low(toy["nets"]["sr"], test, cfg, steps=teacher_steps), test.images)
    student_net = toy["snaps"]["sr"][sr_steps]
    student = sr_quality_report(recipes.sr_from_low(student_net, test, cfg, steps=sr_steps), test.images)
    ratio = student.mean_mse / teacher.mean_mse
    # the distilled pair must also run as a full cascade at this allocation
    pcfg = recipes.pipeline_config(cfg)
    pcfg = pcfg.__class__(**{**pcfg.__dict__, "base_steps": base_steps, "sr_steps": sr_steps})
    sch = recipes.schedules(cfg)
    dens = (TinyDenoiser(toy["snaps"]["base"][base_steps]), TinyDenoiser(student_net))
    images = generate(np.arange(4), pcfg, dens, recipes.codec_for(cfg), sch.base, sch.sr, sch.relay)
    ok = ratio <= DISTILL_RATIO_MAX and images.shape == (4, 1, 64, 64) and np.isfinite(images).all()
    name = f"distilled SR {base_steps}+{sr_steps} / teacher {teacher_steps}-step MSE"
    assert _report(9, name, ratio, DISTILL_RATIO_MAX, ok, time.perf_counter() - start)


def _sample_digest(run_dir, toy, seed):
    cmd = [
        sys.executable, "-m", "relaydiff.cli", "sample",
        "--deterministic", "--seed", str(seed), "-q",
        "--base-ckpt", str(toy["dir"] / "base.npz"),
        "--sr-ckpt", str(toy["dir"] / "sr.npz"),
        "--run-dir", str(run_dir),
    ]
    subprocess.run(cmd, check=True, capture_output=True)
    files = sorted(run_dir.glob("*.ppm"))
    h = hashlib.sha256()
    for f in files:
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return len(files), h.hexdigest()


@pytest.mark.slow
def test_criterion_10_determinism(toy, tmp_path):
    start = time.perf_counter()
    n1, d1 = _sample_digest(tmp_path / "a", toy, 7)
    n2, d2 = _sample_digest(tmp_path / "b", toy, 7)
    ok = n1 == n2 > 0 and d1 == d2
    assert _report(10, "byte-identical sample runs (images compared)", n1, 0, ok, time.perf_counter() - start)
