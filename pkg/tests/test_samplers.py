import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from relaydiff.denoisers import FixedOracle, GaussianOracle
from relaydiff.errors import ConfigError, DomainError, NumericalError, RangeError
from relaydiff.eval import base_moments, chi2_band
from relaydiff.samplers import (
    Guided,
    TileConfig,
    Tiled,
    base_sample,
    cfg_denoise,
    relay_coefficients,
    relay_sample,
    relay_step,
    strided_timesteps,
    tile_starts,
    tiled_denoise,
)
from relaydiff.schedules import RelayConfig, blur_transition, make_noise_schedule


def test_unit_coefficients(sched, relay):
    a, b, c, d = relay_coefficients(200, sched, relay)
    assert a == pytest.approx(sched.sigma[199] / sched.sigma[200])
    assert b == pytest.approx(1 / 200)
    assert c == pytest.approx(199 / 200 - a)
    assert d == 0.0


def test_single_step_relay_coefficients(sched):
    assert tuple(relay_coefficients(1, sched, RelayConfig(1)))[:3] == (0.0, 1.0, 0.0)


def test_coefficient_errors(sched, relay):
    with pytest.raises(RangeError):
        relay_coefficients(0, sched, relay)
    with pytest.raises(RangeError):
        relay_coefficients(501, sched, relay)
    with pytest.raises(RangeError):
        relay_coefficients(10, sched, relay, 10)
    delta = np.zeros(501)
    delta[10] = 2 * sched.sigma[9]
    with pytest.raises(DomainError):
        relay_coefficients(10, sched, RelayConfig(500, delta))


@settings(max_examples=200, deadline=None)
@given(t=st.integers(1, 500), frac=st.floats(0, 0.999), eta=st.floats(0, 1))
def test_coefficients_sum_to_one(t, frac, eta):
    sched = make_noise_schedule("cosine", 1000, 2.0)
    relay = RelayConfig.with_eta(500, sched, eta)
    s = int(frac * t)
    a, b, c, d = relay_coefficients(t, sched, relay, s)
    assert abs(a + b + c - 1) <= 1e-12
    assert a * a * sched.sigma[t] ** 2 + d * d == pytest.approx(sched.sigma[s] ** 2, abs=1e-14)


def test_maximal_delta_zeroes_a(sched):
    relay = RelayConfig.with_eta(100, sched, 1.0)
    a, b, c, d = relay_coefficients(40, sched, relay)
    assert a == 0.0 and d == sched.sigma[39]


def test_relay_step_keeps_constants(sched, relay):
    k = 0.37
    coef = relay_coefficients(300, sched, relay, 240)
    z, anchor = relay_step(np.full(5, k), np.full(5, k), np.full(5, k), 300, 240, coef)
    np.testing.assert_allclose(z, k, atol=1e-15)
    np.testing.assert_allclose(anchor, k, atol=1e-15)


def test_stochastic_step_needs_noise(sched):
    relay = RelayConfig.with_eta(10, sched, 0.5)
    with pytest.raises(ValueError):
        relay_step(np.ones(2), np.ones(2), np.ones(2), 5, 4, relay_coefficients(5, sched, relay))


def test_strided_grid():
    g = strided_timesteps(500, 10)
    assert g[0] == 500 and g[-1] == 0 and len(g) == 11
    assert np.all(np.diff(g) == -50)
    assert list(strided_timesteps(7, 0)) == [7]
    assert list(strided_timesteps(3, 3)) == [3, 2, 1, 0]
    with pytest.raises(RangeError):
        strided_timesteps(5, 6)


@pytest.mark.parametrize("steps", [None, 10, 7])
def test_oracle_trajectory_identity(rng, sched, relay, steps):
    z0, zL, eps = rng.standard_normal((3, 2, 6, 6))
    seen = []

    def check(t, z, anchor):
        z0t = blur_transition(z0, zL, t, relay.T_r)
        seen.append(t)
        assert np.max(np.abs(z - (z0t + sched.sigma[t] * eps))) <= 1e-9
        assert np.max(np.abs(anchor - z0t)) <= 1e-9

    out = relay_sample(zL, FixedOracle(z0), None, sched, relay, eps=eps, steps=steps, callback=check)
    assert seen[0] == 500 and seen[-1] == 0
    np.testing.assert_allclose(out, z0, atol=1e-9)


def test_noise_direction_preserved(rng, sched, relay):
    z0, zL, eps = rng.standard_normal((3, 8))
    dirs = []

    def record(t, z, anchor):
        if t > 0:
            dirs.append((z - blur_transition(z0, zL, t, relay.T_r)) / sched.sigma[t])

    relay_sample(zL, FixedOracle(z0), None, sched, relay, eps=eps, callback=record)
    np.testing.assert_allclose(np.array(dirs), np.broadcast_to(eps, (len(dirs), 8)), atol=1e-9)


def test_zero_steps_returns_input(rng, sched, relay):
    zL = rng.standard_normal((2, 3, 3))
    np.testing.assert_array_equal(relay_sample(zL, FixedOracle(zL * 0), None, sched, relay, steps=0), zL)


def test_single_step_relay_recovers_z0(rng, sched):
    z0, zL = rng.standard_normal((2, 4, 4))
    out = relay_sample(zL, FixedOracle(z0), None, sched, RelayConfig(1), rng=rng)
    np.testing.assert_array_equal(out, z0)


def test_non_finite_prediction_reports_step(rng, sched, relay):
    calls = []

    def bad(z, t, cond=None):
        calls.append(t)
        return z * np.nan if t == 300 else z

    with pytest.raises(NumericalError) as info:
        relay_sample(np.zeros(3), bad, None, sched, relay, rng=rng, steps=10)
    assert info.value.step == 300


def test_single_stochastic_transition_moments(sched):
    # from an exact state, one step t -> t-1 has mean a z_t + b z0 + c z0^t and variance delta^2
    relay = RelayConfig.with_eta(500, sched, 0.7)
    n = 200_000
    r = np.random.default_rng(5)
    z0, zL = 0.4, -1.1
    t = 321
    coef = relay_coefficients(t, sched, relay)
    z0t = blur_transition(np.array(z0), np.array(zL), t, 500)
    z_t = z0t + sched.sigma[t] * r.standard_normal(n)
    z_s, _ = relay_step(z_t, np.full(n, z0), np.full(n, float(z0t)), t, t - 1, coef, r.standard_normal(n))
    resid = z_s - (coef.a * z_t + coef.b * z0 + coef.c * z0t)
    assert abs(resid.mean()) <= 3 * coef.delta / math.sqrt(n)
    assert chi2_band(resid.var(ddof=1), coef.delta**2, n)[0]


def test_base_sample_fixed_oracle(rng, sched):
    z0 = rng.standard_normal((2, 3, 3))
    noise = sched.sigma[-1] * rng.standard_normal(z0.shape)
    one = base_sample(noise, FixedOracle(z0), None, sched, steps=1)
    full = base_sample(noise, FixedOracle(z0), None, sched, steps=1000)
    np.testing.assert_array_equal(one, z0)
    np.testing.assert_allclose(full, one, atol=1e-12)
    with pytest.raises(RangeError):
        base_sample(noise, FixedOracle(z0), None, sched, steps=1001)


def test_base_sampler_monte_carlo_matches_recursion():
    sched = make_noise_schedule("cosine", 1000, 10.0)
    mu, var, n = 0.7, 0.09, 100_000
    oracle = GaussianOracle(mu, var, "base", sched)
    r = np.random.default_rng(11)
    start = mu + math.sqrt(var + sched.sigma[-1] ** 2) * r.standard_normal(n)
    out = base_sample(start, oracle, None, sched, steps=50)
    m, v = base_moments(sched, mu, var, 50)
    assert abs(out.mean() - m) <= 3 * math.sqrt(v / n)
    assert chi2_band(out.var(ddof=1), v, n)[0]


def test_base_recursion_converges_to_data():
    sched = make_noise_schedule("cosine", 1000, 10.0)
    m, v = base_moments(sched, 0.7, 0.09, 1000)
    assert m == pytest.approx(0.7, abs=1e-12)
    assert v == pytest.approx(0.09, rel=1e-2)
    # coarse grids under-disperse: the deterministic sampler shrinks towards the mean
    assert base_moments(sched, 0.7, 0.09, 10)[1] < v


def _toy_denoiser(z, t, cond=None):
    return np.tanh(z) + (0.0 if cond is None else 0.5 * (cond + 1))


def test_cfg_endpoints_and_linearity(rng):
    z = rng.standard_normal(7)
    d_c, d_u = _toy_denoiser(z, 1, 2), _toy_denoiser(z, 1)
    np.testing.assert_array_equal(cfg_denoise(_toy_denoiser, z, 1, 2, 0.0), d_u)
    np.testing.assert_array_equal(cfg_denoise(_toy_denoiser, z, 1, 2, 1.0), d_c)
    w1, w2, w3 = 1.5, 4.0, 7.5
    g1, g2, g3 = (cfg_denoise(_toy_denoiser, z, 1, 2, w) for w in (w1, w2, w3))
    np.testing.assert_allclose((g3 - g2) / (w3 - w2), (g2 - g1) / (w2 - w1), atol=1e-12)
    np.testing.assert_allclose(Guided(_toy_denoiser, 3.0)(z, 1, 2), d_u + 3.0 * (d_c - d_u), atol=1e-12)
    np.testing.assert_array_equal(cfg_denoise(_toy_denoiser, z, 1, None, 5.0), d_u)


def test_tile_starts_cover():
    assert tile_starts(128, 72, 16) == [0, 56]
    assert tile_starts(10, 20, 2) == [0]
    starts = tile_starts(100, 30, 7)
    assert starts[-1] == 70 and all(b - a <= 23 for a, b in zip(starts, starts[1:]))


def test_tile_config_validation():
    with pytest.raises(ConfigError):
        TileConfig(8, 8, 8)
    with pytest.raises(ConfigError):
        TileConfig(0, 8, 1)
    with pytest.raises(ConfigError):
        TileConfig(8, 8, 1, "median")


@pytest.mark.parametrize("blend", ["uniform", "gaussian"])
def test_tiling_exact_for_pointwise_denoiser(rng, blend, sched):
    z = rng.standard_normal((4, 128, 128))
    oracle = GaussianOracle(0.1, 0.3, "base", sched)
    tiles = TileConfig(72, 72, 16, blend)
    np.testing.assert_allclose(tiled_denoise(oracle, z, 400, None, tiles), oracle(z, 400), atol=1e-12)


def test_tiling_independent_of_workers(rng):
    z = rng.standard_normal((2, 40, 40))
    den = lambda x, t, cond=None: x + np.roll(x, 1, axis=-1)
    tiles = TileConfig(16, 16, 4)
    a = tiled_denoise(den, z, 1, None, tiles, workers=1)
    b = tiled_denoise(den, z, 1, None, tiles, workers=4)
    assert np.array_equal(a, b)


def test_tiling_single_tile_falls_back(rng):
    z = rng.standard_normal((2, 8, 8))
    den = lambda x, t, cond=None: 2 * x
    assert np.array_equal(Tiled(den, TileConfig(8, 8, 2))(z, 1), 2 * z)


def test_tiling_torch_inputs(sched):
    z = torch.randn(1, 4, 32, 32, dtype=torch.float64)
    oracle = lambda x, t, cond=None: 0.5 * x
    out = tiled_denoise(oracle, z, 1, None, TileConfig(20, 20, 8))
    assert isinstance(out, torch.Tensor)
    torch.testing.assert_close(out, 0.5 * z)
