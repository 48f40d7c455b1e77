"""Relay and base-stage samplers, classifier-free guidance and tiled denoising.

A denoiser is any callable ``denoiser(z, t, cond=None, w=None)`` returning a
prediction of the clean latent with the same shape as ``z``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from .errors import ConfigError, DomainError, NumericalError, RangeError
from .schedules import NoiseSchedule, RelayConfig


class RelayCoefficients(NamedTuple):
    a: float
    b: float
    c: float
    delta: float


def relay_coefficients(t: int, sched: NoiseSchedule, relay: RelayConfig, s: Optional[int] = None) -> RelayCoefficients:
    """Coefficients of the relay step from ``t`` down to ``s`` (default ``t-1``).

    For the unit step these are ``a = sqrt(sigma[t-1]^2 - delta[t]^2) / sigma[t]``,
    ``b = 1/t`` and ``c = (t-1)/t - a``. A strided step ``t -> s`` uses
    ``b = (t-s)/t``, ``c = s/t - a`` and scales the profile's noise by
    ``sigma[s] / sigma[t-1]`` so that a profile of the form
    ``delta[t] = eta * sigma[t-1]`` keeps the same ratio ``eta``.
    """
    t = int(t)
    if t < 1 or t > relay.T_r:
        raise RangeError(f"relay step t must lie in [1, T_r={relay.T_r}], got {t}")
    s = t - 1 if s is None else int(s)
    if not 0 <= s < t:
        raise RangeError(f"target step s must lie in [0, {t}), got {s}")
    d_unit = float(relay.delta[t])
    sig_prev = float(sched.sigma[t - 1])
    if d_unit > sig_prev * (1 + 1e-12):
        raise DomainError(f"delta[{t}]={d_unit} exceeds sigma[{t - 1}]={sig_prev}")
    d_unit = min(d_unit, sig_prev)
    sig_s, sig_t = float(sched.sigma[s]), float(sched.sigma[t])
    if s == t - 1:
        delta = d_unit
    else:
        delta = 0.0 if d_unit == 0.0 else d_unit * sig_s / sig_prev
    a = math.sqrt(max(sig_s * sig_s - delta * delta, 0.0)) / sig_t
    b = (t - s) / t
    c = s / t - a
    return RelayCoefficients(a, b, c, delta)


def relay_step(z_t, z0_pred, anchor, t: int, s: int, coef: RelayCoefficients, noise=None):
    """One relay update ``t -> s``. Returns ``(z_s, anchor_s)``.

    ``anchor`` is the running blur anchor at ``t``; it moves a fraction
    ``(t-s)/t`` of the way towards the prediction.
    """
    anchor_s = anchor + ((t - s) / t) * (z0_pred - anchor)
    z_s = coef.a * z_t + coef.b * z0_pred + coef.c * anchor
    if coef.delta > 0.0:
        if noise is None:
            raise ValueError("stochastic relay step needs a noise sample")
        z_s = z_s + coef.delta * noise
    return z_s, anchor_s


def strided_timesteps(start: int, steps: int) -> np.ndarray:
    """Evenly spaced integer grid from ``start`` down to 0 with ``steps`` intervals."""
    if steps < 0:
        raise RangeError(f"steps must be nonnegative, got {steps}")
    if steps > start:
        raise RangeError(f"cannot take {steps} steps over {start} schedule steps")
    if steps == 0:
        return np.array([start], dtype=np.int64)
    grid = np.round(np.linspace(start, 0, steps + 1)).astype(np.int64)
    assert np.all(np.diff(grid) < 0)
    return grid


def _check_finite(x, step):
    arr = x.detach().cpu().numpy() if hasattr(x, "detach") else np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise NumericalError("denoiser produced non-finite values", step=step)


def _call(denoiser, z, t, cond, w):
    if w is None:
        return denoiser(z, t, cond)
    return denoiser(z, t, cond, w)


def relay_sample(
    zL,
    denoiser,
    cond,
    sched: NoiseSchedule,
    relay: RelayConfig,
    rng: Optional[np.random.Generator] = None,
    steps: Optional[int] = None,
    w=None,
    eps=None,
    callback: Optional[Callable] = None,
):
    """Latent relay sampler.

    Starts from ``zL + sigma[T_r] * eps`` with the blur anchor at ``zL`` and
    walks the grid ``T_r -> ... -> 0``. ``steps`` defaults to ``T_r`` unit
    steps; ``steps=0`` returns ``zL`` unchanged. ``callback(t, z, anchor)`` is
    invoked for the start state and after every step.
    """
    relay.validate(sched)
    steps = relay.T_r if steps is None else steps
    if steps == 0:
        return zL * 1.0
    rng = np.random.default_rng() if rng is None else rng
    if eps is None:
        eps = rng.standard_normal(np.shape(zL))
    grid = strided_timesteps(relay.T_r, steps)
    z = zL + float(sched.sigma[relay.T_r]) * eps
    anchor = zL * 1.0
    if callback is not None:
        callback(relay.T_r, z, anchor)
    for t, s in zip(grid[:-1], grid[1:]):
        t, s = int(t), int(s)
        z0_pred = _call(denoiser, z, t, cond, w)
        _check_finite(z0_pred, t)
        coef = relay_coefficients(t, sched, relay, s)
        noise = rng.standard_normal(np.shape(z)) if coef.delta > 0 else None
        z, anchor = relay_step(z, z0_pred, anchor, t, s, coef, noise)
        if callback is not None:
            callback(s, z, anchor)
    return z


def base_step(z_t, z0_pred, t: int, s: int, sched: NoiseSchedule):
    """Deterministic x0-prediction step ``t -> s`` on a sigma schedule."""
    ratio = float(sched.sigma[s]) / float(sched.sigma[t])
    return z0_pred + ratio * (z_t - z0_pred)


def base_sample(noise, denoiser, cond, sched: NoiseSchedule, steps: int = 50, w=None, callback=None):
    """Deterministic sampler for the base stage starting at ``z_T = noise``."""
    if steps < 1 or steps > sched.T:
        raise RangeError(f"steps must lie in [1, T={sched.T}], got {steps}")
    grid = strided_timesteps(sched.T, steps)
    z = noise
    if callback is not None:
        callback(sched.T, z, None)
    for t, s in zip(grid[:-1], grid[1:]):
        t, s = int(t), int(s)
        z0_pred = _call(denoiser, z, t, cond, w)
        _check_finite(z0_pred, t)
        z = base_step(z, z0_pred, t, s, sched)
        if callback is not None:
            callback(s, z, z0_pred)
    return z


def cfg_denoise(denoiser, z, t, cond, w: float):
    """Classifier-free guidance ``D_u + w (D_c - D_u)``.

    Written as ``(1 - w) D_u + w D_c`` so that ``w = 0`` and ``w = 1`` return
    the unconditional and conditional predictions exactly.
    """
    d_cond = denoiser(z, t, cond)
    if cond is None or w == 1:
        return d_cond
    d_uncond = denoiser(z, t, None)
    return (1.0 - w) * d_uncond + w * d_cond


class Guided:
    """Wrap a conditional denoiser so that every call applies guidance ``w``."""

    def __init__(self, denoiser, w: float):
        self.denoiser = denoiser
        self.w = float(w)
        self.stage = getattr(denoiser, "stage", None)

    def __call__(self, z, t, cond=None, w=None):
        return cfg_denoise(self.denoiser, z, t, cond, self.w if w is None else w)


BLEND_MODES = ("uniform", "gaussian")


@dataclass(frozen=True)
class TileConfig:
    tile_height: int
    tile_width: int
    overlap: int
    blend: str = "gaussian"

    def __post_init__(self):
        if min(self.tile_height, self.tile_width) < 1 or self.overlap < 0:
            raise ConfigError("tile sizes must be positive and overlap nonnegative")
        if self.overlap >= min(self.tile_height, self.tile_width):
            raise ConfigError("overlap must be smaller than both tile dimensions")
        if self.blend not in BLEND_MODES:
            raise ConfigError(f"unknown blend {self.blend!r}; expected one of {BLEND_MODES}")


def tile_starts(size: int, tile: int, overlap: int) -> list:
    if tile >= size:
        return [0]
    stride = tile - overlap
    starts = list(range(0, size - tile + 1, stride))
    if starts[-1] != size - tile:
        starts.append(size - tile)
    return starts


def _blend_weights(h: int, w: int, blend: str) -> np.ndarray:
    if blend == "uniform":
        return np.ones((h, w))

    def axis(n):
        x = (np.arange(n) - (n - 1) / 2) / n
        return np.exp(-x * x / (2 * 0.01))

    return np.outer(axis(h), axis(w))


def tiled_denoise(denoiser, z, t, cond, tiles: TileConfig, w=None, workers: int = 1):
    """Run ``denoiser`` on overlapping spatial blocks and blend the predictions.

    Each pixel's prediction is a normalized weighted mean of the block
    predictions covering it. The reduction runs in a fixed tile order, so the
    result does not depend on ``workers``.
    """
    H, W = z.shape[-2:]
    if tiles.tile_height >= H and tiles.tile_width >= W:
        return _call(denoiser, z, t, cond, w)
    th, tw = min(tiles.tile_height, H), min(tiles.tile_width, W)
    boxes = [(y, x) for y in tile_starts(H, th, tiles.overlap) for x in tile_starts(W, tw, tiles.overlap)]
    weight = _blend_weights(th, tw, tiles.blend)

    def run(box):
        y, x = box
        return _call(denoiser, z[..., y : y + th, x : x + tw], t, cond, w)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(run, boxes))
    else:
        preds = [run(b) for b in boxes]

    is_torch = hasattr(z, "detach")
    if is_torch:
        import torch

        acc = torch.zeros_like(z)
        wt = torch.as_tensor(weight, dtype=z.dtype, device=z.device)
        norm = torch.zeros((H, W), dtype=z.dtype, device=z.device)
    else:
        acc = np.zeros(np.shape(z))
        wt = weight
        norm = np.zeros((H, W))
    for (y, x), pred in zip(boxes, preds):
        acc[..., y : y + th, x : x + tw] += wt * pred
        norm[y : y + th, x : x + tw] += wt
    return acc / norm


class Tiled:
    """Drop-in denoiser that evaluates ``denoiser`` tile by tile."""

    def __init__(self, denoiser, tiles: TileConfig, workers: int = 1):
        self.denoiser = denoiser
        self.tiles = tiles
        self.workers = workers
        self.stage = getattr(denoiser, "stage", None)

    def __call__(self, z, t, cond=None, w=None):
        return tiled_denoise(self.denoiser, z, t, cond, self.tiles, w=w, workers=self.workers)
