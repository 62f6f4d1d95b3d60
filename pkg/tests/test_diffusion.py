"""Noise schedule, denoiser, and guided sampling tests."""

import numpy as np
import pytest

from defsr.diffusion import (
    GaussianPriorDenoiser,
    OracleDenoiser,
    SamplerConfig,
    ZeroDenoiser,
    build_schedule,
    forward_diffuse,
    guided_reverse_step,
    sample,
    strided_steps,
)
from defsr.linop import build_downsampler
from defsr.rng import make_rng


@pytest.fixture(scope="module")
def schedule():
    return build_schedule()


# ---- schedule ----

def test_schedule_endpoints(schedule):
    assert schedule.T == 1000
    assert schedule.beta(1) == 1e-6
    assert schedule.beta(1000) == 1e-2
    assert np.all(np.diff(schedule.betas) > 0)
    assert np.all((schedule.betas > 0) & (schedule.betas < 1))


def test_alpha_bar_strictly_decreasing(schedule):
    assert schedule.alpha_bar(0) == 1.0
    assert np.all(np.diff(schedule.alpha_bars) < 0)
    # beta sum is about 5.0, so the terminal signal level is tiny
    assert schedule.alpha_bar(1000) < 0.01


def test_schedule_rejects_bad_args():
    with pytest.raises(ValueError):
        build_schedule(T=0)
    with pytest.raises(ValueError):
        build_schedule(beta_start=0.2, beta_end=0.1)
    s = build_schedule(T=10)
    with pytest.raises(ValueError):
        s.beta(11)
    with pytest.raises(ValueError):
        s.alpha_bar(-1)


def test_forward_diffuse_formula(schedule):
    rng = make_rng(0)
    x0 = rng.random((4, 4, 3))
    noise = rng.standard_normal((4, 4, 3))
    for t in (1, 500, 1000):
        ab = schedule.alpha_bar(t)
        expect = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * noise
        np.testing.assert_array_equal(forward_diffuse(x0, t, noise, schedule), expect)


def test_forward_diffuse_limits(schedule):
    rng = make_rng(1)
    x0 = rng.random((4, 4, 3))
    noise = rng.standard_normal((4, 4, 3))
    assert np.max(np.abs(forward_diffuse(x0, 1, noise, schedule) - x0)) < 2e-3
    x_T = forward_diffuse(x0, 1000, noise, schedule)
    assert np.max(np.abs(x_T - noise)) < 0.15


def test_strided_steps_contract():
    seq = strided_steps(1000, 50)
    assert len(seq) == 50
    assert seq[0] == 1000 and seq[-1] == 1
    assert all(a > b for a, b in zip(seq, seq[1:]))
    assert strided_steps(1000, 1000) == list(range(1000, 0, -1))
    with pytest.raises(ValueError):
        strided_steps(1000, 0)
    with pytest.raises(ValueError):
        strided_steps(1000, 1001)


# ---- guided step ----

def test_oracle_estimate_is_fixed_point(schedule):
    rng = make_rng(2)
    x_star = rng.random((8, 8, 3))
    A = build_downsampler("average", 2, (8, 8))
    y = A.apply(x_star)
    D = OracleDenoiser(x_star)
    # the rectified estimate equals the target, so every step mean mixes
    # x_star with the iterate and the chain contracts onto x_star
    x_t = rng.standard_normal((8, 8, 3))
    out = guided_reverse_step(x_t, 1, y, A, D, schedule, rng, t_prev=0)
    np.testing.assert_allclose(out, x_star, atol=1e-12)


def test_zero_denoiser_final_step_returns_pinv(schedule):
    rng = make_rng(3)
    A = build_downsampler("bicubic", 4, (16, 16))
    y = rng.random((4, 4, 3))
    out = guided_reverse_step(rng.standard_normal((16, 16, 3)), 1, y, A, ZeroDenoiser(), schedule, rng, t_prev=0)
    np.testing.assert_allclose(out, A.pinv_apply(y), atol=1e-12)


def test_step_consistency_every_step(schedule):
    rng = make_rng(4)
    x_star = rng.random((8, 8, 3))
    A = build_downsampler("average", 2, (8, 8))
    y = A.apply(x_star)
    D = GaussianPriorDenoiser(mu=np.full((8, 8, 3), 0.5), sigma0=0.3)
    x = rng.standard_normal((8, 8, 3))
    for t in (1000, 700, 300, 5):
        x0_est = D.estimate(x, t, schedule)
        rectified = A.pinv_apply(y) + x0_est - A.pinv_apply(A.apply(x0_est))
        assert np.max(np.abs(A.apply(rectified) - y)) < 1e-10
        x = guided_reverse_step(x, t, y, A, D, schedule, rng)


def test_identity_operator_forces_observation(schedule):
    rng = make_rng(5)
    A = build_downsampler("identity", 1, (6, 6))
    y = rng.random((6, 6, 3))
    out = guided_reverse_step(rng.standard_normal((6, 6, 3)), 1, y, A, ZeroDenoiser(), schedule, rng, t_prev=0)
    np.testing.assert_allclose(out, y, atol=1e-12)


def test_step_argument_validation(schedule):
    rng = make_rng(6)
    A = build_downsampler("average", 2, (8, 8))
    x = np.zeros((8, 8, 3))
    y = np.zeros((4, 4, 3))
    with pytest.raises(ValueError):
        guided_reverse_step(x, 5, y, A, ZeroDenoiser(), schedule, rng, t_prev=7)
    with pytest.raises(ValueError):
        guided_reverse_step(x, 5, np.zeros((8, 8, 3)), A, ZeroDenoiser(), schedule, rng)
    with pytest.raises(ValueError):
        guided_reverse_step(np.zeros((4, 4, 3)), 5, y, A, ZeroDenoiser(), schedule, rng)


# ---- full sampler ----

def test_sample_oracle_recovers_target(schedule):
    rng = make_rng(7)
    x_star = rng.random((8, 8, 3)) * 0.8 + 0.1
    A = build_downsampler("average", 2, (8, 8))
    y = A.apply(x_star)
    cfg = SamplerConfig(schedule=schedule, steps_used=50, seed=11)
    out = sample(y, A, OracleDenoiser(x_star), cfg)
    np.testing.assert_allclose(out, x_star, atol=1e-6)


def test_sample_zero_denoiser_gives_pinv(schedule):
    rng = make_rng(8)
    A = build_downsampler("bicubic", 4, (16, 16))
    y = A.apply(rng.random((16, 16, 3)))
    cfg = SamplerConfig(schedule=schedule, steps_used=50, seed=3)
    out = sample(y, A, ZeroDenoiser(), cfg, clamp=False)
    np.testing.assert_allclose(out, A.pinv_apply(y), atol=1e-6)


def test_sample_deterministic_per_seed(schedule):
    rng = make_rng(9)
    A = build_downsampler("average", 2, (8, 8))
    y = A.apply(rng.random((8, 8, 3)))
    D = GaussianPriorDenoiser(mu=np.full((8, 8, 3), 0.5), sigma0=0.2)
    cfg = SamplerConfig(schedule=schedule, steps_used=25, seed=42)
    a = sample(y, A, D, cfg, clamp=False)
    b = sample(y, A, D, cfg, clamp=False)
    assert a.tobytes() == b.tobytes()
    c = sample(y, A, D, SamplerConfig(schedule=schedule, steps_used=25, seed=43), clamp=False)
    assert np.max(np.abs(a - c)) > 1e-6


def test_sample_consistency_unclamped(schedule):
    rng = make_rng(10)
    for kind, scale, hw in (("average", 2, 8), ("bicubic", 4, 16)):
        A = build_downsampler(kind, scale, (hw, hw))
        y = A.apply(rng.random((hw, hw, 3)))
        D = GaussianPriorDenoiser(mu=np.full((hw, hw, 3), 0.5), sigma0=0.25)
        out = sample(y, A, D, SamplerConfig(schedule=schedule, steps_used=50, seed=1), clamp=False)
        assert np.max(np.abs(A.apply(out) - y)) < 1e-8


def test_gaussian_prior_posterior_mean_against_monte_carlo(schedule):
    # importance-sampled posterior mean oracle on a 4x4 image: draw x0
    # from the prior, weight by the forward likelihood, and require the
    # analytic formula to land within three standard errors
    rng = make_rng(11)
    mu = rng.random((4, 4, 1))
    sigma0 = 0.3
    x_star = rng.random((4, 4, 1))
    t = 500
    ab = schedule.alpha_bar(t)
    x_t = forward_diffuse(x_star, t, rng.standard_normal((4, 4, 1)), schedule)

    D = GaussianPriorDenoiser(mu=mu, sigma0=sigma0)
    analytic = D.estimate(x_t, t, schedule)

    n = 400_000
    draws = mu.reshape(-1)[None, :] + sigma0 * rng.standard_normal((n, 16))
    resid = x_t.reshape(-1)[None, :] - np.sqrt(ab) * draws
    logw = -0.5 * resid**2 / (1.0 - ab)
    logw -= logw.max(axis=0, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=0, keepdims=True)
    mc_mean = (w * draws).sum(axis=0)
    mc_var = (w * (draws - mc_mean[None, :]) ** 2).sum(axis=0)
    ess = 1.0 / (w**2).sum(axis=0)
    se = np.sqrt(mc_var / ess)
    err = np.abs(analytic.reshape(-1) - mc_mean)
    assert np.all(err < 3.0 * se + 1e-9), f"max err {err.max()}, 3se {3 * se.min()}"


def test_monotone_refinement_median(schedule):
    # with an oracle denoiser the distance to the target shrinks as t
    # falls; checked on the median trajectory over 32 seeded chains
    rng = make_rng(12)
    x_star = rng.random((8, 8, 3))
    A = build_downsampler("average", 2, (8, 8))
    y = A.apply(x_star)
    D = OracleDenoiser(x_star)
    seq = strided_steps(schedule.T, 25)
    dists = []
    for seed in range(32):
        chain_rng = make_rng(1000 + seed)
        x = chain_rng.standard_normal((8, 8, 3))
        row = [np.linalg.norm(x - x_star)]
        for i, t in enumerate(seq):
            t_prev = seq[i + 1] if i + 1 < len(seq) else 0
            x = guided_reverse_step(x, t, y, A, D, schedule, chain_rng, t_prev=t_prev)
            row.append(np.linalg.norm(x - x_star))
        dists.append(row)
    med = np.median(np.array(dists), axis=0)
    assert np.all(np.diff(med) <= 1e-9), f"median distance not monotone: {med}"
