"""Two-stage cascade: base generation at low resolution followed by relay
super-resolution, plus repeated super-resolution hops."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .codec import PatchCodec, upsample
from .errors import ConfigError, RelayDiffError, ResourceError, StageError
from .samplers import Guided, TileConfig, Tiled, base_sample, relay_sample
from .schedules import NoiseSchedule, RelayConfig


@dataclass(frozen=True)
class PipelineConfig:
    base_resolution: int = 32
    sr_factor: int = 2
    hops: int = 1
    base_steps: int = 50
    sr_steps: int = 10
    w_base: float = 3.0
    w_sr: float = 1.0
    T_r: int = 500
    tiles: Optional[TileConfig] = None
    seed: int = 0
    memory_guard: int = 1 << 16

    def validate(self, codec: PatchCodec, sched: NoiseSchedule):
        if self.sr_factor != 2:
            raise ConfigError("only 2x super-resolution hops are supported")
        if self.hops < 0:
            raise ConfigError("hops must be nonnegative")
        if self.base_resolution % codec.factor:
            raise ConfigError(f"base resolution {self.base_resolution} not divisible by codec factor {codec.factor}")
        if not 0 < self.T_r <= sched.T:
            raise ConfigError(f"T_r must lie in (0, {sched.T}], got {self.T_r}")
        return self


def with_guidance(denoiser, w: float):
    """Apply guidance strength ``w`` in whichever way the denoiser supports.

    Distilled networks take ``w`` as an input; others are wrapped in
    classifier-free guidance, which is skipped entirely for ``w == 1``.
    """
    if getattr(denoiser, "guidance_embedded", False):
        return lambda z, t, cond=None, w_=None: denoiser(z, t, cond, w)
    if w == 1:
        return denoiser
    return Guided(denoiser, w)


def _sr_denoiser(denoiser, z_shape, cfg: PipelineConfig, workers: int):
    size = int(np.prod(z_shape[-3:]))
    if cfg.tiles is not None and (z_shape[-2] > cfg.tiles.tile_height or z_shape[-1] > cfg.tiles.tile_width):
        return Tiled(denoiser, cfg.tiles, workers)
    if size > cfg.memory_guard:
        raise ResourceError(
            f"latent of {size} elements exceeds the memory guard of {cfg.memory_guard}; enable tiling"
        )
    return denoiser


def super_resolve(image, cfg: PipelineConfig, denoiser, codec: PatchCodec, sched: NoiseSchedule, cond=None, rng=None, relay=None, workers: int = 1):
    """One hop: upsample, encode, relay-sample, decode."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    relay = RelayConfig(cfg.T_r) if relay is None else relay
    zL = codec.encode(upsample(image, cfg.sr_factor))
    den = _sr_denoiser(with_guidance(denoiser, cfg.w_sr), zL.shape, cfg, workers)
    z = relay_sample(zL, den, cond, sched, relay, rng=rng, steps=cfg.sr_steps)
    return codec.decode(z)


def iterative_super_resolve(image, hops: int, cfg: PipelineConfig, denoiser, codec: PatchCodec, sched: NoiseSchedule, cond=None, rng=None, relay=None, workers: int = 1):
    """Apply ``hops`` super-resolution hops, doubling the resolution each time.

    The same SR weights serve every hop. Latents above the tile size are
    denoised tile by tile; without tiles, latents larger than
    ``cfg.memory_guard`` elements are refused.
    """
    if hops < 1:
        raise ConfigError("hops must be at least 1")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    img = image
    for hop in range(hops):
        try:
            img = super_resolve(img, cfg, denoiser, codec, sched, cond, rng, relay, workers)
        except ResourceError:
            raise
        except RelayDiffError as exc:
            raise StageError(f"super_resolution[{hop + 1}]", exc) from exc
    return img


def generate(cond, cfg: PipelineConfig, denoisers, codec: PatchCodec, sched: NoiseSchedule, sr_sched: Optional[NoiseSchedule] = None, relay=None, timings: Optional[dict] = None, workers: int = 1):
    """Class-conditional cascade sample.

    ``denoisers`` is a ``(base, sr)`` pair. ``cond`` is a class id or an
    array of ids (one image each). Returns images of shape ``(1, H, W)``
    or ``(N, 1, H, W)`` with ``H = base_resolution * 2**hops``. Wall time per
    stage is written into ``timings`` when given.
    """
    base_den, sr_den = denoisers
    sr_sched = sched if sr_sched is None else sr_sched
    cfg.validate(codec, sched)
    rng = np.random.default_rng(cfg.seed)
    batched = np.ndim(cond) > 0
    n = len(cond) if batched else 1
    shape = (n,) + codec.latent_shape((codec.channels, cfg.base_resolution, cfg.base_resolution))
    timings = {} if timings is None else timings

    start = time.perf_counter()
    noise = float(sched.sigma[-1]) * rng.standard_normal(shape)
    try:
        z = base_sample(noise, with_guidance(base_den, cfg.w_base), cond, sched, steps=cfg.base_steps)
    except RelayDiffError as exc:
        raise StageError("base", exc) from exc
    img = codec.decode(z)
    timings["base"] = time.perf_counter() - start

    if cfg.hops:
        start = time.perf_counter()
        img = iterative_super_resolve(img, cfg.hops, cfg, sr_den, codec, sr_sched, cond, rng, relay, workers)
        timings["super_resolution"] = time.perf_counter() - start
    return img if batched else img[0]
