"""Command line entry point.

Every command reads an optional YAML/JSON config, applies ``--set
key.path=value`` overrides and writes its artifacts plus ``manifest.json``
into ``runs/<timestamp>-<hash>/`` (or ``--run-dir``).
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from datetime import datetime
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import recipes
from .codec import upsample, write_ppm
from .config import RunConfig, dump_config, load_config
from .denoisers import GaussianOracle, TinyDenoiser, load_checkpoint, save_checkpoint
from .errors import ConfigError
from .eval import (
    CheckResult,
    algebra_checks,
    interior_minimum,
    marginal_moment_test,
    sr_quality_report,
    start_ablation,
    tiling_deviation,
    verify_distillation_identity,
    verify_oracle_trajectory,
    write_error_heatmap,
)
from .pipeline import generate, iterative_super_resolve, with_guidance
from .prompt_expansion import expand_prompt
from .samplers import TileConfig, Tiled, relay_sample
from .schedules import RelayConfig
from .training import write_metrics_csv

log = logging.getLogger("relaydiff")

COMMANDS = ("train-base", "train-sr", "distill", "sample", "verify", "ablate-start", "tile-sample", "report")


class Run:
    """Run directory plus the manifest that is written when the command ends."""

    def __init__(self, command, cfg: RunConfig, args, run_dir=None):
        self.cfg = cfg
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        if run_dir is None:
            base = Path(cfg.runs_dir) / f"{stamp}-{cfg.digest()}"
            run_dir, k = base, 1
            while run_dir.exists():
                run_dir = Path(f"{base}-{k}")
                k += 1
        self.dir = Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest = {
            "command": command,
            "argv": sys.argv[1:],
            "created": stamp,
            "config_hash": cfg.digest(),
            "seed": cfg.seed,
            "deterministic": bool(args.deterministic),
            "workers": args.workers,
            "versions": {
                "relaydiff": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "torch": torch.__version__,
            },
            "timings": {},
            "artifacts": [],
            "results": {},
        }
        dump_config(cfg, self.dir / "config.yaml")

    def path(self, name) -> Path:
        self.manifest["artifacts"].append(name)
        return self.dir / name

    def time(self, key, seconds):
        self.manifest["timings"][key] = round(float(seconds), 4)

    def close(self, status):
        self.manifest["status"] = status
        self.manifest["config"] = self.cfg.to_dict()
        with open(self.dir / "manifest.json", "w") as fh:
            json.dump(self.manifest, fh, indent=2, default=str)


def _write_images(run: Run, prefix, images, labels=None):
    for i, img in enumerate(np.asarray(images)):
        tag = f"_c{int(labels[i])}" if labels is not None else ""
        write_ppm(run.path(f"{prefix}_{i:03d}{tag}.ppm"), img)


def _load(path, stage):
    if not path:
        raise ConfigError(f"--{'base' if stage == 'base' else 'sr'}-ckpt is required for this command")
    net, manifest = load_checkpoint(path, dtype=torch.float32)
    if net.config.stage != stage:
        raise ConfigError(f"{path} holds a {net.config.stage} model, expected {stage}")
    return net


def cmd_train(stage, run: Run, args):
    cfg = run.cfg
    start = time.perf_counter()
    name = "base" if stage == "base" else "sr"
    net, metrics = recipes.train_stage(stage, cfg, csv_path=run.path(f"{name}_loss.csv"), checkpoint_path=run.dir / f"{name}_diverged.npz")
    run.time("train", time.perf_counter() - start)
    save_checkpoint(run.path(f"{name}.npz"), net, {"config_hash": cfg.digest()})
    run.manifest["results"] = {"final_loss": metrics[-1]["loss"], "epochs": len(metrics)}
    print(f"{stage}: final loss {metrics[-1]['loss']:.5f} -> {run.dir / (name + '.npz')}")
    return 0


def cmd_distill(run: Run, args):
    cfg = run.cfg
    if not args.base_ckpt and not args.sr_ckpt:
        raise ConfigError("distill needs --base-ckpt and/or --sr-ckpt")
    for stage, path, name in (("base", args.base_ckpt, "base"), ("super_resolution", args.sr_ckpt, "sr")):
        if not path:
            continue
        start = time.perf_counter()
        net = _load(path, stage)
        student, history = recipes.distill_stage(stage, net, cfg, rounds=args.rounds)
        run.time(f"distill_{name}", time.perf_counter() - start)
        save_checkpoint(run.path(f"{name}_distilled.npz"), student, {"rounds": len(history)})
        rows = [{"round": r + 1, "iter": i, "loss": v} for r, h in enumerate(history) for i, v in enumerate(h)]
        write_metrics_csv(run.path(f"{name}_distill.csv"), rows, ("round", "iter", "loss"))
        run.manifest["results"][name] = {"rounds": len(history), "final_loss": float(np.mean(history[-1][-20:])) if history else None}
        print(f"{stage}: {len(history)} rounds -> {run.dir / (name + '_distilled.npz')}")
    return 0


def cmd_sample(run: Run, args):
    cfg = run.cfg
    sch = recipes.schedules(cfg)
    codec = recipes.codec_for(cfg)
    base = TinyDenoiser(_load(args.base_ckpt, "base"))
    sr = TinyDenoiser(_load(args.sr_ckpt, "super_resolution"))
    if args.prompt:
        run.manifest["results"]["prompt"] = args.prompt
        run.manifest["results"]["expanded_prompt"] = expand_prompt(args.prompt, cfg.expansion)
    cond = np.asarray(args.cond, dtype=np.int64)
    pcfg = recipes.pipeline_config(cfg)
    timings = {}
    images = generate(cond, pcfg, (base, sr), codec, sch.base, sch.sr, sch.relay, timings=timings, workers=args.workers)
    for k, v in timings.items():
        run.time(k, v)
    run.manifest["results"]["steps"] = {"base": pcfg.base_steps, "sr": pcfg.sr_steps, "hops": pcfg.hops}
    _write_images(run, "sample", images, cond)
    print(f"wrote {len(images)} images of size {images.shape[-1]} to {run.dir}")
    return 0


def cmd_verify(run: Run, args):
    cfg = run.cfg
    sch = recipes.schedules(cfg)
    ode = RelayConfig(cfg.schedule.T_r)
    quick = args.quick
    results = [
        verify_oracle_trajectory(sch.sr, ode, trials=10 if quick else 100),
        verify_distillation_identity(sch.sr, ode, cases=100 if quick else 1000),
    ]
    results += algebra_checks(sch.sr, ode, n=1000 if quick else 10_000, codec=recipes.codec_for(cfg))
    start = time.perf_counter()
    moments = marginal_moment_test(sch.sr, RelayConfig.with_eta(cfg.schedule.T_r, sch.sr, 0.5), n_samples=10_000 if quick else cfg.eval.marginal_samples)
    n_bad = len(moments.failures())
    results.append(CheckResult("marginal moments (failing steps)", n_bad, 0, moments.passed, time.perf_counter() - start))
    results.append(_tiling_exactness(sch))
    with open(run.path("verify.csv"), "w") as fh:
        fh.write("check,value,tolerance,passed,seconds\n")
        for r in results:
            fh.write(f"{r.name},{r.value:.6e},{r.tolerance:.1e},{r.passed},{r.runtime:.3f}\n")
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    run.manifest["results"] = {r.name: {"value": float(r.value), "passed": r.passed} for r in results}
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def _tiling_exactness(sch, size=128, tol=1e-9):
    rng = np.random.default_rng(0)
    zL = rng.standard_normal((4, size, size))
    # elementwise posterior mean: every output pixel depends on its input pixel only
    oracle = GaussianOracle(0.2, 0.5, "base", sch.sr)
    tiles = TileConfig(size // 2 + 8, size // 2 + 8, 16, "gaussian")
    eps = rng.standard_normal(zL.shape)
    start = time.perf_counter()
    a = relay_sample(zL, oracle, None, sch.sr, sch.relay, steps=10, eps=eps)
    b = relay_sample(zL, Tiled(oracle, tiles), None, sch.sr, sch.relay, steps=10, eps=eps)
    dev = float(np.max(np.abs(a - b)))
    return CheckResult("tiling exactness (pixelwise oracle)", dev, tol, dev <= tol, time.perf_counter() - start)


def cmd_ablate(run: Run, args):
    cfg = run.cfg
    sch = recipes.schedules(cfg)
    codec = recipes.codec_for(cfg)
    net = _load(args.sr_ckpt, "super_resolution")
    ds = recipes.held_out(cfg)
    den = with_guidance(TinyDenoiser(net), cfg.sampler.w_sr)
    start = time.perf_counter()
    rows = start_ablation(
        den,
        codec.encode(upsample(ds.low)),
        ds.images,
        codec,
        sch.sr,
        cond=ds.labels,
        fractions=cfg.eval.ablation_fractions,
        steps=cfg.sampler.sr_steps,
        seed=cfg.seed,
        baseline=recipes.bilinear_baseline(ds),
        csv_path=run.path("ablation.csv"),
        meta={"seed": cfg.seed, "config_hash": cfg.digest()},
    )
    run.time("ablation", time.perf_counter() - start)
    for r in rows:
        print(f"T_r={r['T_r']:4d}  mse={r['mse']:.3e}  ratio={r['ratio_to_bilinear']:.3f}")
    inner = interior_minimum(rows)
    print("best start is interior" if inner else "best start is at an end of the sweep")
    run.manifest["results"] = {"rows": rows, "interior_minimum": inner}
    return 0


def cmd_tile_sample(run: Run, args):
    cfg = run.cfg
    sch = recipes.schedules(cfg)
    codec = recipes.codec_for(cfg)
    net = _load(args.sr_ckpt, "super_resolution")
    ds = recipes.held_out(cfg).subset(np.arange(args.count))
    pcfg = recipes.pipeline_config(cfg)
    if pcfg.tiles is None:
        lat = pcfg.base_resolution * 2 // codec.factor
        pcfg = pcfg.__class__(**{**pcfg.__dict__, "tiles": TileConfig(lat, lat, max(1, lat // 4), "gaussian")})
    den = TinyDenoiser(net)
    start = time.perf_counter()
    tiled = iterative_super_resolve(ds.low, args.hops, pcfg, den, codec, sch.sr, ds.labels, relay=sch.relay, workers=args.workers)
    run.time("tiled", time.perf_counter() - start)
    _write_images(run, "tiled", tiled, ds.labels)
    untiled_cfg = pcfg.__class__(**{**pcfg.__dict__, "tiles": None, "memory_guard": 1 << 40})
    start = time.perf_counter()
    untiled = iterative_super_resolve(ds.low, args.hops, untiled_cfg, den, codec, sch.sr, ds.labels, relay=sch.relay)
    run.time("untiled", time.perf_counter() - start)
    margin = tiled.shape[-1] // 8
    dev = tiling_deviation(tiled, untiled, margin)
    run.manifest["results"] = dev
    ok = dev["interior_mean_abs"] <= cfg.eval.tile_tolerance
    print(f"output {tiled.shape[-2]}x{tiled.shape[-1]}; tiled vs untiled max {dev['max_abs']:.3e}, interior mean {dev['interior_mean_abs']:.3e} ({'within' if ok else 'above'} {cfg.eval.tile_tolerance:g})")
    return 0


def cmd_report(run: Run, args):
    cfg = run.cfg
    net = _load(args.sr_ckpt, "super_resolution")
    ds = recipes.held_out(cfg)
    start = time.perf_counter()
    out = recipes.sr_from_low(net, ds, cfg)
    run.time("super_resolution", time.perf_counter() - start)
    rep = sr_quality_report(out, ds.images, recipes.bilinear_baseline(ds), csv_path=run.path("report.csv"), meta={"seed": cfg.seed, "config_hash": cfg.digest()})
    write_error_heatmap(run.path("error_000.ppm"), out[0], ds.images[0])
    summary = rep.summary()
    run.manifest["results"] = summary
    print(f"SR mse {summary['mse']:.3e} +- {summary['mse_stderr']:.1e}, bilinear {summary['baseline_mse']:.3e}, ratio {summary['ratio']:.3f}, psnr {summary['psnr']:.2f} dB")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relaydiff", description="Desk-scale latent relay diffusion cascade.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON run config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config field by dotted path")
        p.add_argument("--seed", type=int)
        p.add_argument("--deterministic", action="store_true", help="single-threaded, deterministic kernels")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--run-dir", help="write here instead of runs/<timestamp>-<hash>/")
        p.add_argument("-q", "--quiet", action="store_true")
        if name in ("distill", "sample"):
            p.add_argument("--base-ckpt")
        if name in ("distill", "sample", "ablate-start", "tile-sample", "report"):
            p.add_argument("--sr-ckpt")
        if name == "distill":
            p.add_argument("--rounds", type=int)
        if name == "sample":
            p.add_argument("--cond", type=int, nargs="+", default=[0, 1, 2, 3])
            p.add_argument("--prompt")
        if name == "verify":
            p.add_argument("--quick", action="store_true", help="fewer trials and samples")
        if name == "tile-sample":
            p.add_argument("--hops", type=int, default=2)
            p.add_argument("--count", type=int, default=2)
    return parser


def _configure(args) -> RunConfig:
    cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg.seed = cfg.train.seed = cfg.distill.seed = args.seed
    if args.workers < 1:
        raise ConfigError("--workers must be at least 1")
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _configure(args)
    except (ConfigError, OSError) as exc:
        print(f"relaydiff: error: {exc}", file=sys.stderr)
        return 2
    if args.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
        args.workers = 1
    run = Run(args.command, cfg, args, args.run_dir)
    handlers = {
        "train-base": lambda: cmd_train("base", run, args),
        "train-sr": lambda: cmd_train("super_resolution", run, args),
        "distill": lambda: cmd_distill(run, args),
        "sample": lambda: cmd_sample(run, args),
        "verify": lambda: cmd_verify(run, args),
        "ablate-start": lambda: cmd_ablate(run, args),
        "tile-sample": lambda: cmd_tile_sample(run, args),
        "report": lambda: cmd_report(run, args),
    }
    start = time.perf_counter()
    try:
        code = handlers[args.command]()
    except ConfigError as exc:
        run.close("usage-error")
        print(f"relaydiff: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any runtime failure with exit code 1
        run.close("failed")
        print(f"relaydiff: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    run.time("total", time.perf_counter() - start)
    run.close("ok" if code == 0 else "check-failed")
    return code


if __name__ == "__main__":
    sys.exit(main())
