"""Denoisers: analytic oracles and a tiny trainable convolutional network.

Every denoiser is called as ``denoiser(z_t, t, cond=None, w=None)`` and
returns a prediction of the clean latent with the shape of ``z_t``. ``cond``
is a class id (or ``None`` for the unconditional mode).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DegeneratePriorError, DimensionError, ProtocolError
from .schedules import NoiseSchedule, RelayConfig, per_item

STAGES = ("base", "super_resolution")


class FixedOracle:
    """Ignores its inputs and always predicts ``z0``."""

    def __init__(self, z0, stage: str = "super_resolution"):
        self.z0 = z0
        self.stage = stage

    def __call__(self, z_t, t, cond=None, w=None):
        if np.shape(z_t) == np.shape(self.z0):
            return self.z0 * 1.0
        return np.broadcast_to(self.z0, np.shape(z_t)).copy()


def oracle_fixed(z0, stage: str = "super_resolution") -> FixedOracle:
    return FixedOracle(z0, stage)


class GaussianOracle:
    """Posterior mean ``E[z0 | z_t]`` for elementwise Gaussian data ``N(mu, var)``.

    Base stage: ``z_t = z0 + sigma_t eps``.
    Super-resolution stage: ``z_t = alpha_t z0 + beta_t zL + sigma_t eps`` with
    ``alpha_t = (T_r - t) / T_r``, ``beta_t = t / T_r`` and ``zL`` known.
    The prediction acts elementwise, so its receptive field is a single pixel.
    """

    def __init__(self, mu, var, stage: str, sched: NoiseSchedule, relay: Optional[RelayConfig] = None, zL=None):
        var = np.asarray(var, dtype=np.float64)
        if np.any(var <= 0):
            raise DegeneratePriorError("prior variance must be positive elementwise")
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        if stage == "super_resolution" and (relay is None or zL is None):
            raise ConfigError("super-resolution oracle needs the relay config and zL")
        self.mu = np.asarray(mu, dtype=np.float64)
        self.var = var
        self.stage = stage
        self.sched = sched
        self.relay = relay
        self.zL = None if zL is None else np.asarray(zL, dtype=np.float64)

    def _coefs(self, t, like):
        sig = per_item(self.sched.sigma, t, like)
        if self.stage == "base":
            return 1.0, 0.0, sig
        T_r = self.relay.T_r
        beta = per_item(np.arange(T_r + 1) / T_r, t, like)
        return 1.0 - beta, beta, sig

    def __call__(self, z_t, t, cond=None, w=None):
        z_t = np.asarray(z_t, dtype=np.float64)
        alpha, beta, sig = self._coefs(t, z_t)
        y = z_t if self.stage == "base" else z_t - beta * self.zL
        gain = alpha * self.var / (alpha * alpha * self.var + sig * sig)
        return self.mu + gain * (y - alpha * self.mu)


def oracle_gaussian(mu, var, stage, sched, relay=None, zL=None) -> GaussianOracle:
    return GaussianOracle(mu, var, stage, sched, relay, zL)


@dataclass(frozen=True)
class TinyDenoiserConfig:
    channels: int = 4
    hidden: int = 32
    blocks: int = 3
    emb_dim: int = 32
    num_classes: int = 4
    T: int = 1000
    w_features: int = 8
    stage: str = "super_resolution"


def _sinusoid(x: torch.Tensor, dim: int, max_period: float) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=x.dtype, device=x.device) / half)
    args = x[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class _Block(nn.Module):
    def __init__(self, hidden, emb_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.emb = nn.Linear(emb_dim, hidden)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1)

    def forward(self, h, emb):
        r = self.conv1(nn.functional.silu(h)) + self.emb(emb)[:, :, None, None]
        return h + self.conv2(nn.functional.silu(r))


class TinyDenoiserNet(nn.Module):
    """Small residual conv net predicting the clean latent.

    Step, class and guidance-strength embeddings are summed and injected as
    per-channel biases. The guidance pathway is a bias-free projection that
    is only used once ``use_w`` is switched on (distillation).
    """

    def __init__(self, config: TinyDenoiserConfig = TinyDenoiserConfig()):
        super().__init__()
        c = config
        self.config = c
        self.time_mlp = nn.Sequential(nn.Linear(c.emb_dim, c.emb_dim), nn.SiLU(), nn.Linear(c.emb_dim, c.emb_dim))
        self.cond_emb = nn.Embedding(c.num_classes + 1, c.emb_dim)  # last row = unconditional
        self.w_proj = nn.Linear(c.w_features, c.emb_dim, bias=False)
        self.conv_in = nn.Conv2d(c.channels, c.hidden, 3, padding=1)
        self.blocks = nn.ModuleList([_Block(c.hidden, c.emb_dim) for _ in range(c.blocks)])
        self.conv_out = nn.Conv2d(c.hidden, c.channels, 3, padding=1)
        self.skip = nn.Parameter(torch.ones(()))
        self.register_buffer("use_w", torch.zeros((), dtype=torch.bool))
        nn.init.zeros_(self.w_proj.weight)

    @property
    def null_class(self) -> int:
        return self.config.num_classes

    def embed(self, t, cond, w):
        n = t.shape[0]
        c = self.config
        emb = self.time_mlp(_sinusoid(t.to(self.skip.dtype) * (1000.0 / c.T), c.emb_dim, 10000.0))
        emb = emb + self.cond_emb(cond)
        if bool(self.use_w):
            w = torch.ones(n, dtype=self.skip.dtype, device=t.device) if w is None else w
            emb = emb + self.w_proj(_sinusoid(w.to(self.skip.dtype), c.w_features, 100.0))
        return emb

    def forward(self, z, t, cond, w=None):
        if z.shape[1] != self.config.channels:
            raise DimensionError(f"expected {self.config.channels} latent channels, got {z.shape[1]}")
        emb = self.embed(t, cond, w)
        h = self.conv_in(z)
        for block in self.blocks:
            h = block(h, emb)
        return self.skip * z + self.conv_out(nn.functional.silu(h))


def _batched(value, n, dtype, device, default=None):
    if value is None:
        value = default
    if value is None:
        return None
    if hasattr(value, "detach"):
        out = value.to(device=device)
    else:
        out = torch.as_tensor(np.array(value), device=device)
    out = out.to(dtype) if dtype is not None else out
    return out.expand(n).clone() if out.ndim == 0 else out


class TinyDenoiser:
    """Numpy-facing wrapper around :class:`TinyDenoiserNet` for inference."""

    def __init__(self, net: TinyDenoiserNet):
        self.net = net
        self.stage = net.config.stage

    @property
    def dtype(self):
        return self.net.skip.dtype

    @property
    def guidance_embedded(self) -> bool:
        """True once the network takes the guidance strength as an input."""
        return bool(self.net.use_w)

    def torch_call(self, z, t, cond=None, w=None):
        """Batched torch call; ``cond=None`` selects the unconditional row."""
        n = z.shape[0]
        t = _batched(t, n, torch.long, z.device)
        if cond is None:
            cond = self.net.null_class
        cond = _batched(cond, n, torch.long, z.device)
        w = _batched(w, n, z.dtype, z.device)
        return self.net(z, t, cond, w)

    def __call__(self, z_t, t, cond=None, w=None):
        squeeze = np.ndim(z_t) == 3
        z = torch.as_tensor(np.asarray(z_t), dtype=self.dtype)
        if squeeze:
            z = z[None]
        with torch.no_grad():
            out = self.torch_call(z, t, cond, w).double().numpy()
        return out[0] if squeeze else out


def tiny_denoiser_forward(params: TinyDenoiserNet, z_t, t, cond=None, w=None):
    return TinyDenoiser(params)(z_t, t, cond, w)


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


CHECKPOINT_SCHEMA = "relaydiff.tiny-denoiser"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, net: TinyDenoiserNet, extra: Optional[dict] = None):
    """Store parameters as ``.npz`` with a JSON manifest of schema, config and shapes."""
    state = {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    manifest = {
        "schema": CHECKPOINT_SCHEMA,
        "version": CHECKPOINT_VERSION,
        "config": asdict(net.config),
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "dtypes": {k: str(v.dtype) for k, v in state.items()},
        "extra": extra or {},
    }
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, __manifest__=np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8), **state)
    return path


def load_checkpoint(path, dtype=torch.float32):
    """Returns ``(net, manifest)``; validates schema and every parameter shape."""
    with np.load(path, allow_pickle=False) as data:
        if "__manifest__" not in data:
            raise ProtocolError(f"{path}: missing manifest")
        manifest = json.loads(bytes(data["__manifest__"]).decode())
        if manifest.get("schema") != CHECKPOINT_SCHEMA or manifest.get("version") != CHECKPOINT_VERSION:
            raise ProtocolError(f"{path}: unsupported checkpoint schema {manifest.get('schema')!r}")
        net = TinyDenoiserNet(TinyDenoiserConfig(**manifest["config"])).to(dtype)
        expected = {k: list(v.shape) for k, v in net.state_dict().items()}
        if expected != manifest["shapes"]:
            raise ProtocolError(f"{path}: shape manifest does not match architecture")
        state = {}
        for k, shape in expected.items():
            arr = data[k]
            if list(arr.shape) != shape:
                raise ProtocolError(f"{path}: tensor {k} has shape {list(arr.shape)}, manifest says {shape}")
            state[k] = torch.as_tensor(arr)
    net.load_state_dict(state)
    return net, manifest
