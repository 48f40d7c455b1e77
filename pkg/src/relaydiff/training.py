"""Losses and optimization loops: base diffusion, relay super-resolution and
progressive relay distillation.

Loss functions accept numpy or torch batches; noise and step indices are
drawn from a ``numpy.random.Generator`` so a fixed seed reproduces a run
bit for bit in single-threaded mode.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .denoisers import TinyDenoiser, TinyDenoiserNet, save_checkpoint
from .errors import BatchError, ConfigError, DivergenceError, RangeError
from .samplers import base_step, relay_coefficients, relay_step, strided_timesteps
from .schedules import NoiseSchedule, RelayConfig, blur_transition, forward_base_sample, forward_relay_sample

log = logging.getLogger(__name__)


@dataclass
class TrainBatch:
    z0: object
    zL: object = None
    cond: object = None

    def __post_init__(self):
        if len(self.z0) == 0:
            raise BatchError("empty batch")
        if self.zL is not None and np.shape(self.zL) != np.shape(self.z0):
            raise BatchError(f"zL shape {np.shape(self.zL)} does not match z0 shape {np.shape(self.z0)}")
        if self.cond is not None and np.ndim(self.cond) and len(self.cond) != len(self.z0):
            raise BatchError("cond ids and z0 items have different lengths")

    def __len__(self):
        return len(self.z0)

    def take(self, idx):
        pick = lambda x: None if x is None or np.ndim(x) == 0 else x[idx]
        return TrainBatch(self.z0[idx], pick(self.zL), pick(self.cond) if self.cond is not None else None)


def _like(x, ref):
    if hasattr(ref, "detach"):
        return torch.as_tensor(x, dtype=ref.dtype, device=ref.device)
    return x


def _sq_err(pred, target):
    diff = (pred - target) ** 2
    if hasattr(diff, "detach"):
        return diff.flatten(1).sum(1).mean()
    return float(np.mean(np.sum(diff.reshape(len(diff), -1), axis=1)))


def base_loss(denoiser, batch: TrainBatch, sched: NoiseSchedule, rng: np.random.Generator, t=None, eps=None):
    """Mean over the batch of ``||D(z0 + sigma_t eps, t, c) - z0||^2``, ``t ~ U{1..T}``."""
    z0 = batch.z0
    n = len(z0)
    t = rng.integers(1, sched.T + 1, size=n) if t is None else np.broadcast_to(t, (n,))
    eps = _like(rng.standard_normal(np.shape(z0)), z0) if eps is None else eps
    z_t = forward_base_sample(z0, t, eps, sched)
    return _sq_err(denoiser(z_t, t, batch.cond), z0)


def relay_loss(denoiser, batch: TrainBatch, sched: NoiseSchedule, relay: RelayConfig, rng: np.random.Generator, t=None, eps=None):
    """Mean of ``||D(blur(z0, zL, t) + sigma_t eps, t, c) - z0||^2``, ``t ~ U{0..T_r}``."""
    if batch.zL is None:
        raise BatchError("relay loss needs the low-resolution partner zL of every item")
    z0 = batch.z0
    n = len(z0)
    t = rng.integers(0, relay.T_r + 1, size=n) if t is None else np.broadcast_to(t, (n,))
    eps = _like(rng.standard_normal(np.shape(z0)), z0) if eps is None else eps
    z_t = forward_relay_sample(z0, batch.zL, t, eps, sched, relay)
    return _sq_err(denoiser(z_t, t, batch.cond), z0)


def _steps(t, mid, end):
    mid = t - 1 if mid is None else mid
    end = t - 2 if end is None else end
    if not 0 <= end < mid < t:
        raise RangeError(f"need 0 <= end < mid < t, got t={t}, mid={mid}, end={end}")
    return mid, end


def distill_pair_target(teacher, z_t, anchor, t: int, cond, w, sched: NoiseSchedule, relay: RelayConfig, mid=None, end=None, return_anchor=False):
    """Two deterministic teacher relay steps ``t -> mid -> end`` (default ``t-1``, ``t-2``).

    ``anchor`` is the blur anchor at ``t``. The teacher is called as
    ``teacher(z, t, cond, w)``.
    """
    if t < 2:
        raise RangeError(f"two teacher steps need t >= 2, got {t}")
    mid, end = _steps(t, mid, end)
    ode = RelayConfig(relay.T_r)
    z, a = z_t, anchor
    for cur, nxt in ((t, mid), (mid, end)):
        pred = teacher(z, cur, cond, w)
        z, a = relay_step(z, pred, a, cur, nxt, relay_coefficients(cur, sched, ode, nxt))
    return (z, a) if return_anchor else z


def student_step(student, z_t, anchor, t: int, cond, w, sched: NoiseSchedule, relay: RelayConfig, end=None, return_anchor=False):
    """One student relay step ``t -> end`` (default ``t-2``).

    ``(sigma_end / sigma_t) z_t + ((t - end) / t) z0_pred + (end / t - sigma_end / sigma_t) anchor``
    """
    if t < 2:
        raise RangeError(f"a student step needs t >= 2, got {t}")
    end = t - 2 if end is None else end
    if not 0 <= end < t:
        raise RangeError(f"need 0 <= end < t, got t={t}, end={end}")
    coef = relay_coefficients(t, sched, RelayConfig(relay.T_r), end)
    pred = student(z_t, t, cond, w)
    z, a = relay_step(z_t, pred, anchor, t, end, coef)
    return (z, a) if return_anchor else z


def base_distill_pair_target(teacher, z_t, t: int, cond, w, sched: NoiseSchedule, mid=None, end=None):
    """Two deterministic base-sampler teacher steps ``t -> mid -> end``."""
    if t < 2:
        raise RangeError(f"two teacher steps need t >= 2, got {t}")
    mid, end = _steps(t, mid, end)
    z = z_t
    for cur, nxt in ((t, mid), (mid, end)):
        z = base_step(z, teacher(z, cur, cond, w), cur, nxt, sched)
    return z


def base_student_step(student, z_t, t: int, cond, w, sched: NoiseSchedule, end=None):
    end = t - 2 if end is None else end
    return base_step(z_t, student(z_t, t, cond, w), t, end, sched)


@dataclass
class OptimizerConfig:
    lr: float = 2e-3
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    cond_dropout: float = 0.1
    grad_clip: Optional[float] = None
    lr_schedule: str = "constant"  # or "cosine" (anneal to 0 over all steps)
    csv_path: Optional[str] = None
    checkpoint_path: Optional[str] = None


def _torch_batch(batch: TrainBatch, dtype) -> TrainBatch:
    conv = lambda x: None if x is None else torch.as_tensor(np.asarray(x), dtype=dtype)
    cond = None if batch.cond is None else np.asarray(batch.cond, dtype=np.int64)
    return TrainBatch(conv(batch.z0), conv(batch.zL), cond)


def train_loop(loss_fn: Callable, params: TinyDenoiserNet, dataset: TrainBatch, optimizer_config: OptimizerConfig = OptimizerConfig()):
    """Seeded mini-batch Adam over ``dataset``.

    ``loss_fn(denoiser, batch, rng)`` receives the network's batched torch call.
    Condition ids are replaced by the unconditional id with probability
    ``cond_dropout``. Returns ``(params, metrics)`` where ``metrics`` holds one
    ``{"epoch", "loss", "wall_time"}`` row per epoch, also written to
    ``csv_path`` when given. A non-finite loss restores the last finite state,
    writes it to ``checkpoint_path`` and raises :class:`DivergenceError`.
    """
    cfg = optimizer_config
    if len(dataset) == 0:
        raise BatchError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    model = TinyDenoiser(params)
    data = _torch_batch(dataset, model.dtype)
    opt = torch.optim.Adam(params.parameters(), lr=cfg.lr, betas=tuple(cfg.betas))
    if cfg.lr_schedule not in ("constant", "cosine"):
        raise ConfigError(f"unknown lr schedule {cfg.lr_schedule!r}")
    total_steps = cfg.epochs * math.ceil(len(dataset) / cfg.batch_size)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(opt, total_steps) if cfg.lr_schedule == "cosine" else None
    metrics = []
    start = time.perf_counter()
    last_good = copy.deepcopy(params.state_dict())
    n = len(data)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            batch = data.take(order[lo : lo + cfg.batch_size])
            if batch.cond is not None and cfg.cond_dropout > 0:
                cond = batch.cond.copy()
                cond[rng.random(len(cond)) < cfg.cond_dropout] = params.null_class
                batch.cond = cond
            loss = loss_fn(model.torch_call, batch, rng)
            value = float(loss.detach()) if hasattr(loss, "detach") else float(loss)
            if not math.isfinite(value):
                params.load_state_dict(last_good)
                if cfg.checkpoint_path:
                    save_checkpoint(cfg.checkpoint_path, params, {"diverged_at_step": step})
                raise DivergenceError("non-finite training loss", step=step, state=last_good, checkpoint_path=cfg.checkpoint_path)
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params.parameters(), cfg.grad_clip)
            opt.step()
            if scheduler is not None:
                scheduler.step()
            last_good = copy.deepcopy(params.state_dict())
            total += value * len(batch)
            count += len(batch)
            step += 1
        row = {"epoch": epoch, "loss": total / count, "wall_time": time.perf_counter() - start}
        metrics.append(row)
        log.info("epoch %d loss %.5f (%.1fs)", epoch, row["loss"], row["wall_time"])
    if cfg.csv_path:
        write_metrics_csv(cfg.csv_path, metrics)
    return params, metrics


def write_metrics_csv(path, rows, fields=("epoch", "loss", "wall_time")):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


@dataclass
class DistillConfig:
    stage: str = "super_resolution"
    initial_steps: int = 8
    iters_per_round: int = 300
    batch_size: int = 16
    lr: float = 1e-4
    w_range: tuple = (1.0, 4.0)
    cond_dropout: float = 0.1
    seed: int = 0


class _Teacher:
    """Frozen teacher: guided by ``w`` before it has a w-embedding, direct after."""

    def __init__(self, net: TinyDenoiserNet):
        self.model = TinyDenoiser(net)
        self.direct = bool(net.use_w)

    def __call__(self, z, t, cond, w):
        with torch.no_grad():
            if self.direct:
                return self.model.torch_call(z, t, cond, w)
            if cond is None:
                return self.model.torch_call(z, t, None)
            d_c = self.model.torch_call(z, t, cond)
            d_u = self.model.torch_call(z, t, None)
            w = w[:, None, None, None]
            return (1.0 - w) * d_u + w * d_c


def progressive_distill(
    teacher_params: TinyDenoiserNet,
    rounds: int,
    data: TrainBatch,
    config: DistillConfig,
    sched: NoiseSchedule,
    relay: Optional[RelayConfig] = None,
    on_round: Optional[Callable] = None,
):
    """Halve the sampling steps ``rounds`` times by two-step matching.

    Round ``r`` trains a student on the grid of ``initial_steps / 2**r``
    steps to reproduce two steps of the round's teacher (the previous
    student). The w-embedding is switched on in round 1, where the teacher is
    the guided original model; later teachers condition on ``w`` directly.
    ``on_round(round, student_params, steps)`` is called after each round.
    Returns ``(student_params, history)`` with one loss list per round.
    """
    if rounds < 0:
        raise RangeError("rounds must be nonnegative")
    if config.initial_steps < 1 or rounds > int(math.log2(config.initial_steps)):
        raise RangeError(f"{rounds} rounds exceed log2 of {config.initial_steps} initial steps")
    if config.initial_steps % (2**rounds):
        raise RangeError("initial steps must be divisible by 2**rounds")
    is_sr = config.stage == "super_resolution"
    if is_sr and (relay is None or data.zL is None):
        raise ConfigError("relay distillation needs a relay config and zL partners")
    rng = np.random.default_rng(config.seed)
    teacher_net = teacher_params
    history = []
    start_T = relay.T_r if is_sr else sched.T
    for r in range(1, rounds + 1):
        teacher = _Teacher(teacher_net)
        student_net = copy.deepcopy(teacher_net)
        if r == 1:
            student_net.use_w.fill_(True)
        student = TinyDenoiser(student_net)
        data_t = _torch_batch(data, student.dtype)
        teacher_grid = strided_timesteps(start_T, config.initial_steps // 2 ** (r - 1))
        opt = torch.optim.Adam(student_net.parameters(), lr=config.lr)
        losses = []
        for _ in range(config.iters_per_round):
            idx = rng.integers(0, len(data_t), size=config.batch_size)
            batch = data_t.take(idx)
            cond = batch.cond
            if cond is not None:
                cond = cond.copy()
                cond[rng.random(len(cond)) < config.cond_dropout] = student_net.null_class
            w = torch.as_tensor(rng.uniform(*config.w_range, size=len(batch)), dtype=student.dtype)
            i = 2 * int(rng.integers(0, (len(teacher_grid) - 1) // 2))
            t, mid, end = (int(x) for x in teacher_grid[i : i + 3])
            eps = torch.as_tensor(rng.standard_normal(tuple(batch.z0.shape)), dtype=student.dtype)
            if is_sr:
                z_t = forward_relay_sample(batch.z0, batch.zL, t, eps, sched, relay)
                anchor = blur_transition(batch.z0, batch.zL, t, relay.T_r)
                target = distill_pair_target(teacher, z_t, anchor, t, cond, w, sched, relay, mid, end)
                pred = student_step(student.torch_call, z_t, anchor, t, cond, w, sched, relay, end)
            else:
                z_t = forward_base_sample(batch.z0, t, eps, sched)
                target = base_distill_pair_target(teacher, z_t, t, cond, w, sched, mid, end)
                pred = base_student_step(student.torch_call, z_t, t, cond, w, sched, end)
            loss = ((pred - target) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        log.info("distill round %d: %d steps, final loss %.3e", r, (len(teacher_grid) - 1) // 2, np.mean(losses[-20:]))
        history.append(losses)
        teacher_net = student_net
        if on_round is not None:
            on_round(r, student_net, (len(teacher_grid) - 1) // 2)
    return teacher_net, history
