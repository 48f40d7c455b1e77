"""Toy cascade recipes shared by the command line, tests and scripts.

Builds schedules, latent training sets and networks from a
:class:`~relaydiff.config.RunConfig`, trains and distills each stage, and
produces held-out super-resolution outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .codec import PatchCodec, upsample
from .config import RunConfig
from .data import NUM_CLASSES, ToyDataset, make_dataset
from .denoisers import TinyDenoiser, TinyDenoiserConfig, TinyDenoiserNet
from .errors import ConfigError
from .pipeline import PipelineConfig, with_guidance
from .samplers import TileConfig, relay_sample
from .schedules import NoiseSchedule, RelayConfig, make_noise_schedule
from .training import (
    DistillConfig,
    OptimizerConfig,
    TrainBatch,
    base_loss,
    progressive_distill,
    relay_loss,
    train_loop,
)


@dataclass
class Schedules:
    base: NoiseSchedule
    sr: NoiseSchedule
    relay: RelayConfig


def schedules(cfg: RunConfig) -> Schedules:
    s = cfg.schedule
    base = make_noise_schedule(s.rule, s.T, s.sigma_max)
    sr = base if s.sr_sigma_max is None else make_noise_schedule(s.rule, s.T, s.sr_sigma_max)
    return Schedules(base, sr, relay_config(s.delta_rule, s.T_r, sr))


def relay_config(rule: str, T_r: int, sched: NoiseSchedule) -> RelayConfig:
    if rule == "zero":
        return RelayConfig(T_r).validate(sched)
    if rule.startswith("eta:"):
        return RelayConfig.with_eta(T_r, sched, float(rule[4:]))
    raise ConfigError(f"unknown delta rule {rule!r}; use 'zero' or 'eta:<value>'")


def codec_for(cfg: RunConfig) -> PatchCodec:
    return PatchCodec(cfg.model.codec_factor)


def pipeline_config(cfg: RunConfig, seed: Optional[int] = None) -> PipelineConfig:
    tile = cfg.sampler.tile
    tiles = TileConfig(tile.h, tile.w, tile.overlap, tile.blend) if tile.h > 0 and tile.w > 0 else None
    p = cfg.pipeline
    return PipelineConfig(
        base_resolution=p.base_resolution,
        sr_factor=p.sr_factor,
        hops=p.hops,
        base_steps=cfg.sampler.base_steps,
        sr_steps=cfg.sampler.sr_steps,
        w_base=cfg.sampler.w_base,
        w_sr=cfg.sampler.w_sr,
        T_r=cfg.schedule.T_r,
        tiles=tiles,
        seed=cfg.seed if seed is None else seed,
        memory_guard=p.memory_guard,
    )


def training_set(cfg: RunConfig) -> ToyDataset:
    return make_dataset(cfg.train.n_train, seed=cfg.train.data_seed, size=2 * cfg.pipeline.base_resolution)


def held_out(cfg: RunConfig) -> ToyDataset:
    return make_dataset(cfg.eval.n_test, seed=cfg.eval.test_seed, size=2 * cfg.pipeline.base_resolution)


def stage_batch(stage: str, ds: ToyDataset, codec: PatchCodec) -> TrainBatch:
    """Latent training pairs: low-resolution images for the base stage,
    (high-resolution, upsampled low-resolution) pairs for super-resolution."""
    if stage == "base":
        return TrainBatch(codec.encode(ds.low), None, ds.labels)
    if stage == "super_resolution":
        return TrainBatch(codec.encode(ds.images), codec.encode(upsample(ds.low)), ds.labels)
    raise ConfigError(f"unknown stage {stage!r}")


def new_net(stage: str, cfg: RunConfig, codec: PatchCodec, seed: Optional[int] = None) -> TinyDenoiserNet:
    torch.manual_seed(cfg.train.seed if seed is None else seed)
    m = cfg.model
    return TinyDenoiserNet(
        TinyDenoiserConfig(
            channels=codec.latent_channels,
            hidden=m.hidden,
            blocks=m.blocks,
            emb_dim=m.emb_dim,
            num_classes=NUM_CLASSES,
            T=cfg.schedule.T,
            stage=stage,
        )
    )


def train_stage(stage: str, cfg: RunConfig, csv_path=None, checkpoint_path=None, ds: Optional[ToyDataset] = None):
    """Train one stage from scratch. Returns ``(net, metrics)``."""
    codec = codec_for(cfg)
    sch = schedules(cfg)
    batch = stage_batch(stage, training_set(cfg) if ds is None else ds, codec)
    net = new_net(stage, cfg, codec)
    t = cfg.train
    opt = OptimizerConfig(
        lr=t.lr,
        epochs=t.epochs,
        batch_size=t.batch_size,
        seed=t.seed,
        cond_dropout=t.cond_dropout,
        lr_schedule=t.lr_schedule,
        csv_path=csv_path,
        checkpoint_path=checkpoint_path,
    )
    if stage == "base":
        loss = lambda den, b, rng: base_loss(den, b, sch.base, rng)
    else:
        loss = lambda den, b, rng: relay_loss(den, b, sch.sr, sch.relay, rng)
    return train_loop(loss, net, batch, opt)


def distill_stage(stage: str, net: TinyDenoiserNet, cfg: RunConfig, rounds: Optional[int] = None, ds: Optional[ToyDataset] = None, on_round=None):
    """Progressively distill a trained stage. Returns ``(student, history)``."""
    d = cfg.distill
    codec = codec_for(cfg)
    sch = schedules(cfg)
    batch = stage_batch(stage, training_set(cfg) if ds is None else ds, codec)
    is_sr = stage == "super_resolution"
    dcfg = DistillConfig(
        stage=stage,
        initial_steps=d.sr_initial_steps if is_sr else d.base_initial_steps,
        iters_per_round=d.iters_per_round,
        batch_size=d.batch_size,
        lr=d.lr,
        w_range=(d.w_min, d.w_max),
        cond_dropout=cfg.train.cond_dropout,
        seed=d.seed,
    )
    rounds = (d.sr_rounds if is_sr else d.base_rounds) if rounds is None else rounds
    torch.manual_seed(d.seed)
    if is_sr:
        return progressive_distill(net, rounds, batch, dcfg, sch.sr, sch.relay, on_round)
    return progressive_distill(net, rounds, batch, dcfg, sch.base, on_round=on_round)


def sr_from_low(net_or_denoiser, ds: ToyDataset, cfg: RunConfig, steps: Optional[int] = None, w: Optional[float] = None, seed: Optional[int] = None, relay: Optional[RelayConfig] = None):
    """Super-resolve the exact low-resolution versions of ``ds``; returns images."""
    codec = codec_for(cfg)
    sch = schedules(cfg)
    den = TinyDenoiser(net_or_denoiser) if isinstance(net_or_denoiser, TinyDenoiserNet) else net_or_denoiser
    den = with_guidance(den, cfg.sampler.w_sr if w is None else w)
    zL = codec.encode(upsample(ds.low))
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    steps = cfg.sampler.sr_steps if steps is None else steps
    z = relay_sample(zL, den, ds.labels, sch.sr, sch.relay if relay is None else relay, rng=rng, steps=steps)
    return codec.decode(z)


def bilinear_baseline(ds: ToyDataset):
    return upsample(ds.low)
