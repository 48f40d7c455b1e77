"""Noise schedules, the linear blurring transition and forward sampling.

States are plain arrays (numpy or torch) of shape ``(C, H, W)`` or batched
``(N, C, H, W)``. Step indices ``t`` may be a Python int or, for batched
states, a length-``N`` integer array giving one step per item.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, DomainError, RangeError

SCHEDULE_RULES = ("linear", "cosine")
COSINE_ANGLE = 0.99 * np.pi / 2


@dataclass(frozen=True)
class NoiseSchedule:
    """Discretized noise scales ``sigma[0..T]`` with ``sigma[0] == 0``."""

    T: int
    sigma: np.ndarray
    rule: str = "linear"
    sigma_max: float = 1.0

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if sigma.shape != (self.T + 1,):
            raise ConfigError(f"sigma must have length T+1={self.T + 1}, got {sigma.shape}")
        if sigma[0] != 0.0:
            raise ConfigError("sigma[0] must be exactly 0")
        if np.any(np.diff(sigma) <= 0):
            raise ConfigError("sigma must be strictly increasing")
        sigma.setflags(write=False)
        object.__setattr__(self, "sigma", sigma)

    def __getitem__(self, t):
        return self.sigma[t]


def make_noise_schedule(rule: str = "linear", T: int = 1000, sigma_max: float = 1.0) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T!r}")
    if not sigma_max > 0:
        raise ConfigError(f"sigma_max must be positive, got {sigma_max!r}")
    u = np.arange(T + 1, dtype=np.float64) / T
    if rule == "linear":
        sigma = sigma_max * u
    elif rule == "cosine":
        # noise scale of the cosine variance-preserving schedule, tan(pi/2 u),
        # truncated at COSINE_ANGLE and rescaled so that sigma_T = sigma_max
        sigma = sigma_max * np.tan(COSINE_ANGLE * u) / np.tan(COSINE_ANGLE)
        sigma[-1] = sigma_max
    else:
        raise ConfigError(f"unknown schedule rule {rule!r}; expected one of {SCHEDULE_RULES}")
    return NoiseSchedule(T=int(T), sigma=sigma, rule=rule, sigma_max=float(sigma_max))


@dataclass(frozen=True)
class RelayConfig:
    """Relay start step ``T_r`` and the stochasticity profile ``delta``.

    ``delta[t]`` is the noise scale injected by the unit step ``t -> t-1``;
    ``delta[0]`` is unused and kept at 0. The default profile is all zeros,
    which makes the relay sampler an ODE sampler.
    """

    T_r: int
    delta: np.ndarray = field(default=None)

    def __post_init__(self):
        if not isinstance(self.T_r, (int, np.integer)) or self.T_r < 1:
            raise ConfigError(f"T_r must be a positive integer, got {self.T_r!r}")
        delta = np.zeros(self.T_r + 1) if self.delta is None else np.asarray(self.delta, dtype=np.float64)
        if delta.shape != (self.T_r + 1,):
            raise ConfigError(f"delta must have length T_r+1={self.T_r + 1}, got {delta.shape}")
        if np.any(delta < 0):
            raise ConfigError("delta must be nonnegative")
        delta.setflags(write=False)
        object.__setattr__(self, "T_r", int(self.T_r))
        object.__setattr__(self, "delta", delta)

    def validate(self, sched: NoiseSchedule):
        if self.T_r > sched.T:
            raise ConfigError(f"T_r={self.T_r} exceeds schedule length T={sched.T}")
        bad = np.nonzero(self.delta[1:] > sched.sigma[: self.T_r] * (1 + 1e-12))[0]
        if bad.size:
            t = int(bad[0]) + 1
            raise DomainError(f"delta[{t}]={self.delta[t]} exceeds sigma[{t - 1}]={sched.sigma[t - 1]}")
        return self

    @classmethod
    def with_eta(cls, T_r: int, sched: NoiseSchedule, eta: float) -> "RelayConfig":
        """Profile ``delta[t] = eta * sigma[t-1]`` for ``0 <= eta <= 1``."""
        if not 0.0 <= eta <= 1.0:
            raise DomainError(f"eta must lie in [0, 1], got {eta}")
        delta = np.zeros(T_r + 1)
        delta[1:] = eta * sched.sigma[:T_r]
        return cls(T_r, delta).validate(sched)


def _shape(x):
    return tuple(x.shape)


def _check_same_shape(a, b, what="arrays"):
    if _shape(a) != _shape(b):
        raise DimensionError(f"{what} shape mismatch: {_shape(a)} vs {_shape(b)}")


def per_item(values, t, like):
    """Look up ``values[t]`` and shape it to broadcast against ``like``.

    Scalar ``t`` gives a Python float. Array ``t`` gives one coefficient per
    leading item, as a numpy or torch array matching ``like``.
    """
    if np.ndim(t) == 0:
        return float(values[int(t)])
    idx = np.asarray(t.detach().cpu() if hasattr(t, "detach") else t, dtype=np.int64)
    coef = np.asarray(values)[idx].reshape((-1,) + (1,) * (len(_shape(like)) - 1))
    if hasattr(like, "detach"):
        import torch

        return torch.as_tensor(coef, dtype=like.dtype, device=like.device)
    return coef


def blur_transition(z0, zL, t, T_r: int):
    """Linear interpolation from ``z0`` (t = 0) to ``zL`` (t = T_r)."""
    _check_same_shape(z0, zL, "z0/zL")
    tt = np.asarray(t.detach().cpu() if hasattr(t, "detach") else t)
    if np.any(tt < 0) or np.any(tt > T_r):
        raise RangeError(f"t must lie in [0, T_r={T_r}], got {t}")
    if tt.ndim == 0:
        t = int(tt)
        if t == 0:
            return z0 * 1.0
        if t == T_r:
            return zL * 1.0
        return ((T_r - t) / T_r) * z0 + (t / T_r) * zL
    frac = per_item(np.arange(T_r + 1) / T_r, tt, z0)
    return (1.0 - frac) * z0 + frac * zL


def forward_base_sample(z0, t, eps, sched: NoiseSchedule):
    """``z0 + sigma_t * eps``."""
    _check_same_shape(z0, eps, "z0/eps")
    return z0 + per_item(sched.sigma, t, z0) * eps


def forward_relay_sample(z0, zL, t, eps, sched: NoiseSchedule, relay: RelayConfig):
    """Blurred anchor plus noise: ``blur_transition(z0, zL, t) + sigma_t * eps``."""
    _check_same_shape(z0, eps, "z0/eps")
    return blur_transition(z0, zL, t, relay.T_r) + per_item(sched.sigma, t, z0) * eps
