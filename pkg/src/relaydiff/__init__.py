"""Desk-scale latent relay diffusion: schedules, samplers, training,
distillation and a two-stage cascade on a procedural toy dataset."""

__version__ = "0.1.0"

from .codec import PatchCodec, downsample, upsample
from .config import RunConfig, load_config
from .denoisers import FixedOracle, GaussianOracle, TinyDenoiser, TinyDenoiserConfig, TinyDenoiserNet
from .pipeline import PipelineConfig, generate, iterative_super_resolve
from .samplers import TileConfig, base_sample, cfg_denoise, relay_coefficients, relay_sample, tiled_denoise
from .schedules import NoiseSchedule, RelayConfig, blur_transition, make_noise_schedule

__all__ = [
    "PatchCodec",
    "downsample",
    "upsample",
    "RunConfig",
    "load_config",
    "FixedOracle",
    "GaussianOracle",
    "TinyDenoiser",
    "TinyDenoiserConfig",
    "TinyDenoiserNet",
    "PipelineConfig",
    "generate",
    "iterative_super_resolve",
    "TileConfig",
    "base_sample",
    "cfg_denoise",
    "relay_coefficients",
    "relay_sample",
    "tiled_denoise",
    "NoiseSchedule",
    "RelayConfig",
    "blur_transition",
    "make_noise_schedule",
]
