import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cogesture.errors import NumericalError, ShapeError, ValidationError
from cogesture.diffusion import (
    cfg_mix,
    ddpm_step,
    estimate_z0,
    guided_noise,
    make_schedule,
    predict_z0,
    q_sample,
    q_step,
    sample,
)

# 2-D Gaussian data used by the oracle denoiser
MU = np.array([1.0, -2.0])
SIGMA = np.array([[1.0, 0.5], [0.5, 2.0]])


def gaussian_oracle(schedule):
    """Exact E[eps | z_n] for z_0 ~ N(MU, SIGMA)."""
    ab = schedule.alpha_bars

    def fn(z, n, _conditions, _style):
        cov = ab[n] * SIGMA + (1 - ab[n]) * np.eye(2)
        return np.sqrt(1 - ab[n]) * (z - np.sqrt(ab[n]) * MU) @ np.linalg.inv(cov).T

    return fn


def test_default_schedule():
    s = make_schedule()
    assert s.N == 1000
    assert s.alpha_bars[-1] < 1e-3
    # independent product
    ab = 1.0
    for b in np.linspace(1e-4, 0.02, 1000):
        ab *= 1 - b
    assert s.alpha_bars[-1] == pytest.approx(ab, rel=1e-12)


def test_single_step_schedule():
    s = make_schedule(1, beta_start=0.5, beta_end=0.5)
    assert s.alpha_bars[1] == 0.5


@pytest.mark.parametrize("kw", [dict(N=0), dict(beta_start=0.0), dict(beta_start=0.5, beta_end=0.1),
                                dict(kind="sigmoid"), dict(variance="learned")])
def test_bad_schedules(kw):
    with pytest.raises(ValidationError):
        make_schedule(**kw)


def test_cosine_schedule_monotone():
    s = make_schedule(100, kind="cosine")
    assert np.all(np.diff(s.alpha_bars) < 0) and s.alpha_bars[-1] < 1e-3


def test_q_sample_zero_noise_and_limits(rng):
    s = make_schedule(50)
    z0 = rng.standard_normal((3, 4))
    out = q_sample(z0, 10, np.zeros_like(z0), s)
    np.testing.assert_allclose(out, np.sqrt(s.alpha_bars[10]) * z0)
    assert np.array_equal(q_sample(z0, 0, rng.standard_normal((3, 4)), s), z0)
    with pytest.raises(ShapeError):
        q_sample(z0, 1, np.zeros((3, 5)), s)
    with pytest.raises(ValidationError):
        q_sample(z0, 51, np.zeros_like(z0), s)


def test_q_sample_per_batch_steps_torch():
    s = make_schedule(10)
    z0 = torch.ones(3, 2, 2, dtype=torch.float64)
    out = q_sample(z0, torch.tensor([1, 5, 10]), torch.zeros_like(z0), s)
    for b, n in enumerate([1, 5, 10]):
        torch.testing.assert_close(out[b], torch.full((2, 2), np.sqrt(s.alpha_bars[n]), dtype=torch.float64))


@pytest.mark.parametrize("frac", ["1", "half", "N"])
def test_q_sample_monte_carlo_moments(frac):
    s = make_schedule()
    n = {"1": 1, "half": s.N // 2, "N": s.N}[frac]
    rng = np.random.default_rng(11)
    z0 = np.array([0.7, -1.3, 2.0])
    draws = q_sample(np.broadcast_to(z0, (100_000, 3)), n, rng.standard_normal((100_000, 3)), s)
    mean_t = np.sqrt(s.alpha_bars[n]) * z0
    var_t = 1 - s.alpha_bars[n]
    # mean error measured against the marginal's own scale
    scale = np.maximum(np.abs(mean_t), np.sqrt(var_t))
    assert np.all(np.abs(draws.mean(0) - mean_t) < 0.02 * scale)
    assert np.all(np.abs(draws.var(0) / var_t - 1) < 0.02)


def test_q_step_chain_matches_marginal_variance():
    s = make_schedule(20, beta_start=0.01, beta_end=0.2)
    rng = np.random.default_rng(0)
    z = np.zeros(200_000)
    for n in range(1, 21):
        z = q_step(z, n, rng.standard_normal(z.shape), s)
    assert z.var() == pytest.approx(1 - s.alpha_bars[20], rel=0.02)


def test_ddpm_step_contracts(rng):
    s = make_schedule(1, beta_start=0.3, beta_end=0.3)
    z0 = rng.standard_normal((4, 3))
    eps = rng.standard_normal((4, 3))
    z1 = q_sample(z0, 1, eps, s)
    np.testing.assert_allclose(ddpm_step(z1, 1, eps, s), z0, atol=1e-12)
    # n = 1 adds no noise even when given a generator
    assert np.array_equal(ddpm_step(z1, 1, eps, s, rng=np.random.default_rng(0)), ddpm_step(z1, 1, eps, s))
    s = make_schedule(10)
    z = rng.standard_normal(5)
    out = ddpm_step(z, 4, np.zeros(5), s, noise=np.zeros(5))
    np.testing.assert_allclose(out, z / np.sqrt(1 - s.betas[3]))
    with pytest.raises(ValidationError):
        ddpm_step(z, 4, np.zeros(5), s)
    with pytest.raises(ValidationError):
        ddpm_step(z, 11, np.zeros(5), s, noise=np.zeros(5))


def test_posterior_variance_convention():
    s = make_schedule(10, variance="posterior")
    ab = s.alpha_bars
    assert s.sigma(5) == pytest.approx(np.sqrt(s.betas[4] * (1 - ab[4]) / (1 - ab[5])))
    assert s.sigma(1) == pytest.approx(np.sqrt(s.betas[0]))


def test_predict_z0_inverts_q_sample(rng):
    s = make_schedule(100)
    z0, eps = rng.standard_normal((2, 6)), rng.standard_normal((2, 6))
    np.testing.assert_allclose(predict_z0(q_sample(z0, 37, eps, s), 37, eps, s), z0, atol=1e-10)
    zn = rng.standard_normal(3)
    assert np.array_equal(predict_z0(zn, 0, rng.standard_normal(3), s), zn)


def test_cfg_mix_endpoints():
    a, b = np.array([1.5, -2.0]), np.array([0.25, 4.0])
    assert cfg_mix(a, b, 1) is a
    assert cfg_mix(a, b, 0) is b
    assert cfg_mix(1.0, 0.0, 2) == 2.0


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-1e3, 1e3)), arrays(np.float64, 4, elements=st.floats(-1e3, 1e3)),
       st.floats(-5, 5))
def test_cfg_mix_is_affine(c, u, s):
    np.testing.assert_allclose(cfg_mix(c, u, s), u + s * (c - u), rtol=1e-9, atol=1e-6)


def test_guided_noise_call_counts():
    calls = []

    def den(z, n, cond, style):
        calls.append(style)
        return z * (2.0 if style is not None else 1.0)

    z = np.ones(2)
    eps, c = guided_noise(den, z, 3, {"style": "x"}, 1.5)
    assert c == 2 and np.allclose(eps, 1.5 * 2 + (1 - 1.5) * 1)
    assert guided_noise(den, z, 3, {"style": "x"}, 1)[1] == 1
    assert guided_noise(den, z, 3, {}, 1.5)[1] == 1 and calls[-1] is None


def test_sampling_reproducible_and_unconditional_calls():
    s = make_schedule(30, beta_start=1e-3, beta_end=0.2)
    oracle = gaussian_oracle(s)
    stats = {}
    a = sample(oracle, {}, 1.5, np.random.default_rng(5), s, (7, 2), stats=stats)
    b = sample(oracle, {}, 1.5, np.random.default_rng(5), s, (7, 2))
    assert np.array_equal(a, b)
    assert stats["calls"] == 30
    stats = {}
    sample(lambda z, n, c, st_: oracle(z, n, c, st_), {"style": 1}, 1.5, np.random.default_rng(5), s, (7, 2),
           stats=stats)
    assert stats["calls"] == 60


def test_gaussian_oracle_sampling_matches_target():
    s = make_schedule()
    x = sample(gaussian_oracle(s), {}, 1.0, np.random.default_rng(0), s, (10_000, 2))
    assert np.all(np.abs(x.mean(0) - MU) < 0.05 * np.abs(MU))
    cov = np.cov(x.T)
    assert np.linalg.norm(cov - SIGMA) / np.linalg.norm(SIGMA) < 0.05


def test_prefix_is_fed_but_not_returned():
    s = make_schedule(5, beta_start=0.01, beta_end=0.1)
    seen = []

    def den(z, n, c, st_):
        seen.append(z.copy())
        return np.zeros_like(z)

    prefix = np.full((2, 3), 7.0)
    out = sample(den, {}, 1.0, np.random.default_rng(0), s, (4, 3), prefix=prefix)
    assert out.shape == (4, 3)
    assert all(v.shape == (6, 3) and np.array_equal(v[:2], prefix) for v in seen)


def test_sampling_raises_on_non_finite():
    s = make_schedule(5)
    with pytest.raises(NumericalError) as exc:
        sample(lambda z, n, c, st_: np.full_like(z, np.nan), {}, 1.0, np.random.default_rng(0), s, (2, 2))
    assert exc.value.step == 5


def test_faithful_estimate_matches_fast_on_gaussian():
    s = make_schedule(100, beta_start=1e-3, beta_end=0.1)
    oracle = gaussian_oracle(s)
    n = 50
    zn = np.broadcast_to(np.array([0.3, -0.4]), (10_000, 2)).copy()
    eps = oracle(zn, n, None, None)
    fast = estimate_z0(zn, n, eps, s)
    faithful = estimate_z0(zn, n, eps, s, mode="faithful", denoiser=oracle, k=s.N, rng=np.random.default_rng(1))
    np.testing.assert_allclose(faithful.mean(0), fast[0], rtol=0.05)
    with pytest.raises(ValidationError):
        estimate_z0(zn, n, eps, s, mode="faithful")
    with pytest.raises(ValidationError):
        estimate_z0(zn, n, eps, s, mode="slow")
