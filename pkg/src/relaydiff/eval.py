"""Verification and measurement harness.

Numerical checks of the relay sampler (trajectory identity, two-step
distillation identity, marginal moments), exact moment recursions for
Gaussian data, super-resolution quality metrics and the relay start sweep.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .codec import PatchCodec, write_ppm
from .denoisers import FixedOracle, GaussianOracle
from .errors import BatchError, DimensionError, DomainError, RangeError
from .samplers import (
    cfg_denoise,
    relay_coefficients,
    relay_sample,
    strided_timesteps,
)
from .schedules import NoiseSchedule, RelayConfig, blur_transition
from .training import distill_pair_target, student_step

PSNR_CAP = 99.0


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool
    runtime: float = 0.0
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3e} (tol {self.tolerance:.0e}, {self.runtime:.2f}s)"


def verify_oracle_trajectory(sched: NoiseSchedule, relay: RelayConfig, trials: int = 100, shape=(4, 8, 8), seed: int = 0, steps=None, tol: float = 1e-9) -> CheckResult:
    """Run the relay sampler with a fixed-``z0`` oracle and compare every
    state against ``blur(z0, zL, t) + sigma_t * eps``."""
    if trials < 1:
        raise RangeError("need at least one trial")
    if np.any(relay.delta > 0):
        raise DomainError("the trajectory identity only holds for the deterministic sampler")
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(trials):
        z0, zL, eps = (rng.standard_normal(shape) for _ in range(3))
        dev = []

        def record(t, z, anchor):
            dev.append(np.max(np.abs(z - (blur_transition(z0, zL, t, relay.T_r) + sched.sigma[t] * eps))))

        relay_sample(zL, FixedOracle(z0), None, sched, relay, eps=eps, steps=steps, callback=record)
        worst = max(worst, max(dev))
    return CheckResult("oracle trajectory", worst, tol, worst <= tol, time.perf_counter() - start)


def verify_distillation_identity(sched: NoiseSchedule, relay: RelayConfig, cases: int = 1000, shape=(4, 4, 4), seed: int = 0, tol: float = 1e-9) -> CheckResult:
    """With an exact oracle, one student step equals two teacher steps."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(cases):
        z0, zL, eps = (rng.standard_normal(shape) for _ in range(3))
        t = int(rng.integers(2, relay.T_r + 1))
        z_t = blur_transition(z0, zL, t, relay.T_r) + sched.sigma[t] * eps
        anchor = blur_transition(z0, zL, t, relay.T_r)
        oracle = FixedOracle(z0)
        target = distill_pair_target(oracle, z_t, anchor, t, None, None, sched, relay)
        pred = student_step(oracle, z_t, anchor, t, None, None, sched, relay)
        worst = max(worst, float(np.max(np.abs(pred - target))))
    return CheckResult("distillation identity", worst, tol, worst <= tol, time.perf_counter() - start)


def algebra_checks(sched: NoiseSchedule, relay: RelayConfig, n: int = 10_000, seed: int = 0, tol: float = 1e-12, codec: Optional[PatchCodec] = None) -> list:
    """Blur recurrence, coefficient sums, codec round trip and guidance endpoints."""
    rng = np.random.default_rng(seed)
    codec = PatchCodec(2) if codec is None else codec
    T_r = relay.T_r
    out = []

    start = time.perf_counter()
    z0, zL = rng.standard_normal((2, n))
    t = rng.integers(1, T_r + 1, size=n)
    direct = blur_transition(z0, zL, t - 1, T_r)
    recur = blur_transition(z0, zL, t, T_r) + (z0 - zL) / T_r
    err = float(np.max(np.abs(direct - recur)))
    out.append(CheckResult("blur recurrence", err, tol, err <= tol, time.perf_counter() - start))

    start = time.perf_counter()
    err = 0.0
    for tt in rng.integers(1, T_r + 1, size=n):
        s = int(rng.integers(0, tt))
        a, b, c, _ = relay_coefficients(int(tt), sched, relay, s)
        err = max(err, abs(a + b + c - 1.0))
    out.append(CheckResult("coefficient sum", err, tol, err <= tol, time.perf_counter() - start))

    start = time.perf_counter()
    h = 2 * codec.factor
    x = rng.random((n, codec.channels, h, h))
    err = float(np.max(np.abs(codec.decode(codec.encode(x)) - x)))
    out.append(CheckResult("codec round trip", err, tol, err <= tol, time.perf_counter() - start))

    start = time.perf_counter()
    cond_out, uncond_out = rng.standard_normal((2, n))
    toy = lambda z, t, cond=None: cond_out if cond is not None else uncond_out
    err = max(
        float(np.max(np.abs(cfg_denoise(toy, None, 1, 0, 0.0) - uncond_out))),
        float(np.max(np.abs(cfg_denoise(toy, None, 1, 0, 1.0) - cond_out))),
    )
    out.append(CheckResult("guidance endpoints", err, tol, err <= tol, time.perf_counter() - start))
    return out


@dataclass
class MomentReport:
    rows: list  # one dict per visited step
    passed: bool
    runtime: float

    def failures(self):
        return [r for r in self.rows if not r["passed"]]


def chi2_band(var_hat: float, var: float, n: int, level: float = 0.99):
    """Is the sample variance of ``n`` draws consistent with ``var``?"""
    lo, hi = stats.chi2.ppf([(1 - level) / 2, (1 + level) / 2], n - 1)
    x = (n - 1) * var_hat / var
    return bool(lo <= x <= hi), (lo * var / (n - 1), hi * var / (n - 1))


def marginal_moment_test(sched: NoiseSchedule, relay: RelayConfig, n_samples: int = 100_000, steps: Optional[int] = 10, mu: float = 0.3, var: float = 0.2, zL: float = -0.4, seed: int = 0, n_sigma: float = 3.0) -> MomentReport:
    """Monte Carlo check of the relay marginals on scalar latents.

    Each trajectory draws ``z0 ~ N(mu, var)`` and runs the stochastic relay
    sampler with the exact prediction ``z0``. At every visited step the
    residual ``z_t - blur(z0, zL, t)`` must have mean 0 within ``n_sigma``
    standard errors and a variance inside the 99% chi-square band of
    ``sigma_t^2``.
    """
    if n_samples < 10_000:
        raise RangeError(f"need at least 10^4 samples, got {n_samples}")
    relay.validate(sched)
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    z0 = mu + np.sqrt(var) * rng.standard_normal(n_samples)
    zl = np.full(n_samples, float(zL))
    rows = []

    def record(t, z, anchor):
        resid = z - blur_transition(z0, zl, t, relay.T_r)
        sig2 = float(sched.sigma[t]) ** 2
        m = float(resid.mean())
        v = float(resid.var(ddof=1))
        if sig2 == 0.0:
            ok_mean = ok_var = bool(np.max(np.abs(resid)) <= 1e-12)
            band = (0.0, 0.0)
        else:
            se = np.sqrt(sig2 / n_samples)
            ok_mean = abs(m) <= n_sigma * se
            ok_var, band = chi2_band(v, sig2, n_samples)
        rows.append(dict(t=int(t), mean=m, var=v, sigma2=sig2, var_lo=band[0], var_hi=band[1], passed=bool(ok_mean and ok_var)))

    relay_sample(zl, FixedOracle(z0), None, sched, relay, rng=rng, steps=steps, callback=record)
    return MomentReport(rows, all(r["passed"] for r in rows), time.perf_counter() - start)


def relay_moments(sched: NoiseSchedule, relay: RelayConfig, mu: float, var: float, zL: float, steps: Optional[int] = None):
    """Exact mean and variance of the relay sampler's output on scalar
    Gaussian data when every prediction is the posterior mean.

    The state ``(z0, z, anchor)`` stays jointly Gaussian because each step is
    affine in it, so its first two moments follow a closed recursion.
    """
    relay.validate(sched)
    T_r = relay.T_r
    oracle = GaussianOracle(mu, var, "super_resolution", sched, relay, zL)
    sig = float(sched.sigma[T_r])
    m = np.array([mu, zL, zL])
    cov = np.diag([var, sig * sig, 0.0])
    grid = strided_timesteps(T_r, T_r if steps is None else steps)
    for t, s in zip(grid[:-1], grid[1:]):
        t, s = int(t), int(s)
        # prediction = p0 + p1 * z
        p0 = float(oracle(np.array(0.0), t))
        p1 = float(oracle(np.array(1.0), t)) - p0
        a, b, c, delta = relay_coefficients(t, sched, relay, s)
        f = (t - s) / t
        A = np.array([[1, 0, 0], [0, a + b * p1, c], [0, f * p1, 1 - f]], dtype=float)
        const = np.array([0.0, b * p0, f * p0])
        m = A @ m + const
        cov = A @ cov @ A.T
        cov[1, 1] += delta * delta
    return float(m[1]), float(cov[1, 1])


def base_moments(sched: NoiseSchedule, mu: float, var: float, steps: int, start_var: Optional[float] = None):
    """Exact output mean/variance of the deterministic base sampler with the
    posterior-mean oracle for ``N(mu, var)`` data.

    The start state has mean ``mu`` and variance ``start_var`` (default: the
    exact marginal ``var + sigma_T^2``).
    """
    T = sched.T
    v = var + float(sched.sigma[T]) ** 2 if start_var is None else start_var
    m = mu
    oracle = GaussianOracle(mu, var, "base", sched)
    grid = strided_timesteps(T, steps)
    for t, s in zip(grid[:-1], grid[1:]):
        t, s = int(t), int(s)
        p0 = float(oracle(np.array(0.0), t))
        p1 = float(oracle(np.array(1.0), t)) - p0
        r = float(sched.sigma[s]) / float(sched.sigma[t])
        # z_s = pred + r (z - pred) = (1 - r) (p0 + p1 z) + r z
        gain = (1 - r) * p1 + r
        m = (1 - r) * p0 + gain * m
        v = gain * gain * v
    return m, v


def mse(a, b, axis=None):
    return np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2, axis=axis)


def psnr(err):
    """PSNR in dB for images in [0, 1], capped at ``PSNR_CAP``."""
    err = np.asarray(err, dtype=np.float64)
    with np.errstate(divide="ignore"):
        val = np.where(err > 0, -10.0 * np.log10(np.maximum(err, 1e-300)), PSNR_CAP)
    return np.minimum(val, PSNR_CAP)


@dataclass
class SRReport:
    mse: np.ndarray
    psnr: np.ndarray
    baseline_mse: Optional[np.ndarray] = None

    @property
    def mean_mse(self) -> float:
        return float(self.mse.mean())

    @property
    def stderr_mse(self) -> float:
        return float(self.mse.std(ddof=1) / np.sqrt(len(self.mse))) if len(self.mse) > 1 else 0.0

    @property
    def ratio(self) -> Optional[float]:
        if self.baseline_mse is None:
            return None
        return self.mean_mse / float(self.baseline_mse.mean())

    def summary(self) -> dict:
        out = dict(n=len(self.mse), mse=self.mean_mse, mse_stderr=self.stderr_mse, psnr=float(self.psnr.mean()))
        if self.baseline_mse is not None:
            out.update(baseline_mse=float(self.baseline_mse.mean()), ratio=self.ratio)
        return out


def sr_quality_report(outputs, truth, baseline=None, csv_path=None, meta: Optional[dict] = None) -> SRReport:
    """Per-pair MSE and PSNR of ``outputs`` against ``truth`` (both ``(N, C, H, W)``).

    ``baseline`` (e.g. bilinear upsampling of the low-resolution inputs) is
    scored alongside. ``meta`` entries (seed, config hash) are repeated on
    every CSV row.
    """
    outputs, truth = np.asarray(outputs), np.asarray(truth)
    if len(outputs) != len(truth):
        raise BatchError(f"{len(outputs)} outputs vs {len(truth)} ground-truth images")
    if outputs.shape != truth.shape:
        raise DimensionError(f"output shape {outputs.shape} does not match ground truth {truth.shape}")
    axes = tuple(range(1, outputs.ndim))
    err = mse(outputs, truth, axis=axes)
    base = None if baseline is None else mse(baseline, truth, axis=axes)
    report = SRReport(err, psnr(err), base)
    if csv_path:
        meta = meta or {}
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["item", "mse", "psnr"] + (["baseline_mse"] if base is not None else []) + list(meta))
            for i in range(len(err)):
                row = [i, f"{err[i]:.8g}", f"{report.psnr[i]:.4f}"]
                if base is not None:
                    row.append(f"{base[i]:.8g}")
                writer.writerow(row + list(meta.values()))
    return report


def write_error_heatmap(path, output, truth, scale: Optional[float] = None):
    """Absolute error of one ``(C, H, W)`` image pair as a grey PPM."""
    diff = np.abs(np.asarray(output) - np.asarray(truth)).mean(axis=0, keepdims=True)
    scale = float(diff.max()) if scale is None else scale
    write_ppm(path, diff / scale if scale > 0 else diff)


ABLATION_FRACTIONS = (0.2, 0.4, 0.5, 0.6, 0.8)


def start_ablation(denoiser, zL, truth, codec: PatchCodec, sched: NoiseSchedule, cond=None, fractions=ABLATION_FRACTIONS, steps: int = 10, w=None, seed: int = 0, baseline=None, csv_path=None, meta: Optional[dict] = None) -> list:
    """Sample super-resolution from several relay start points with one model.

    Each start ``T_r = round(fraction * T)`` uses ``steps`` evenly spaced
    steps and the same start noise. Returns one row per start point with the
    mean MSE (and its ratio to ``baseline`` when given).
    """
    eps = np.random.default_rng(seed).standard_normal(np.shape(zL))
    base_err = None if baseline is None else float(mse(baseline, truth))
    rows = []
    for frac in fractions:
        T_r = int(round(frac * sched.T))
        start = time.perf_counter()
        out = relay_sample(zL, denoiser, cond, sched, RelayConfig(T_r), steps=steps, w=w, eps=eps)
        rep = sr_quality_report(codec.decode(out), truth)
        row = dict(T_r=T_r, fraction=frac, steps=steps, mse=rep.mean_mse, mse_stderr=rep.stderr_mse, psnr=float(rep.psnr.mean()))
        if base_err is not None:
            row["ratio_to_bilinear"] = rep.mean_mse / base_err
        row["seconds"] = time.perf_counter() - start
        row.update(meta or {})
        rows.append(row)
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return rows


def interior_minimum(rows, key="mse") -> bool:
    """True when neither end of the sweep holds the best value."""
    vals = [r[key] for r in rows]
    best = int(np.argmin(vals))
    return 0 < best < len(vals) - 1


def tiling_deviation(tiled, untiled, margin: int = 0) -> dict:
    """Max and interior mean absolute difference between two sampling results."""
    diff = np.abs(np.asarray(tiled) - np.asarray(untiled))
    inner = diff[..., margin : diff.shape[-2] - margin, margin : diff.shape[-1] - margin] if margin else diff
    return dict(max_abs=float(diff.max()), interior_mean_abs=float(inner.mean()))
