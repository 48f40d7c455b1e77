"""Train, evaluate and distill the toy cascade end to end.

    python3 scripts/toy_cascade.py --out runs/toy [--set train.epochs=32 ...]

Prints the super-resolution quality against bilinear upsampling, the relay
start sweep and the distilled step allocations, and keeps the checkpoints.
"""

import argparse
import copy
import json
import time
from pathlib import Path

import numpy as np
import torch

from relaydiff import recipes
from relaydiff.config import load_config
from relaydiff.denoisers import TinyDenoiser, save_checkpoint
from relaydiff.eval import interior_minimum, sr_quality_report, start_ablation
from relaydiff.pipeline import with_guidance
from relaydiff.codec import upsample


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--skip-distill", action="store_true")
    args = ap.parse_args()
    torch.set_num_threads(1)
    cfg = load_config(args.config, args.overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}

    ds = recipes.training_set(cfg)
    test = recipes.held_out(cfg)
    nets = {}
    for stage, name in (("base", "base"), ("super_resolution", "sr")):
        t0 = time.perf_counter()
        nets[name], metrics = recipes.train_stage(stage, cfg, csv_path=out / f"{name}_loss.csv", ds=ds)
        save_checkpoint(out / f"{name}.npz", nets[name])
        summary[f"train_{name}_seconds"] = time.perf_counter() - t0
        print(f"{stage}: loss {metrics[-1]['loss']:.4g} in {summary[f'train_{name}_seconds']:.0f}s", flush=True)

    bilinear = recipes.bilinear_baseline(test)
    sr = recipes.sr_from_low(nets["sr"], test, cfg)
    rep = sr_quality_report(sr, test.images, bilinear)
    summary["sr"] = rep.summary()
    print(f"SR/bilinear MSE ratio {rep.ratio:.3f}", flush=True)

    codec = recipes.codec_for(cfg)
    sch = recipes.schedules(cfg)
    rows = start_ablation(
        with_guidance(TinyDenoiser(nets["sr"]), cfg.sampler.w_sr),
        codec.encode(upsample(test.low)),
        test.images,
        codec,
        sch.sr,
        cond=test.labels,
        steps=cfg.sampler.sr_steps,
        seed=cfg.seed,
        baseline=bilinear,
        csv_path=out / "ablation.csv",
    )
    summary["ablation"] = rows
    summary["ablation_interior_minimum"] = interior_minimum(rows)
    for r in rows:
        print(f"  start {r['T_r']}: ratio {r['ratio_to_bilinear']:.3f}")

    if not args.skip_distill:
        steps0 = cfg.distill.sr_initial_steps
        teacher = recipes.sr_from_low(nets["sr"], test, cfg, steps=steps0)
        teacher_mse = sr_quality_report(teacher, test.images).mean_mse
        snaps = {}
        t0 = time.perf_counter()
        recipes.distill_stage("super_resolution", nets["sr"], cfg, on_round=lambda r, net, k: snaps.update({k: copy.deepcopy(net)}))
        summary["distill_sr_seconds"] = time.perf_counter() - t0
        for k, net in sorted(snaps.items(), reverse=True):
            mse = sr_quality_report(recipes.sr_from_low(net, test, cfg, steps=k), test.images).mean_mse
            summary[f"distill_sr_ratio_{k}"] = mse / teacher_mse
            print(f"distilled SR {k} steps / teacher {steps0} steps: {mse / teacher_mse:.3f}", flush=True)
        t0 = time.perf_counter()
        _, hist = recipes.distill_stage("base", nets["base"], cfg)
        summary["distill_base_seconds"] = time.perf_counter() - t0
        print(f"base distillation final round loss {np.mean(hist[-1][-20:]):.3g}", flush=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=float))


if __name__ == "__main__":
    main()
