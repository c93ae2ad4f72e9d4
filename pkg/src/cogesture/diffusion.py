"""Noise schedules, forward noising, DDPM reverse steps and guided sampling.

Step indices follow the usual 1-based convention: ``n = 1..N``, and
``alpha_bar(0) = 1``. Functions accept numpy arrays or torch tensors; the
step index may be a Python int or a per-batch integer array/tensor.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import NumericalError, ShapeError, ValidationError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # beta_n stored at index n-1
    variance: str = "beta"  # "beta" (sigma^2 = beta_n) or "posterior"

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or len(b) < 1 or np.any(b <= 0) or np.any(b >= 1):
            raise ValidationError("betas must be a non-empty vector in (0, 1)")
        if self.variance not in ("beta", "posterior"):
            raise ValidationError(f"unknown variance convention {self.variance!r}")
        object.__setattr__(self, "betas", b)

    @property
    def N(self):
        return len(self.betas)

    @property
    def alphas(self):
        return 1.0 - self.betas

    @property
    def alpha_bars(self):
        """``alpha_bar`` for n = 0..N (index 0 is the convention value 1)."""
        return np.concatenate([[1.0], np.cumprod(self.alphas)])

    def sigma(self, n):
        if self.variance == "beta" or n <= 1:
            return math.sqrt(self.betas[n - 1])
        ab = self.alpha_bars
        return math.sqrt(self.betas[n - 1] * (1 - ab[n - 1]) / (1 - ab[n]))


def make_schedule(N=1000, kind="linear", beta_start=1e-4, beta_end=0.02, variance="beta"):
    if not isinstance(N, (int, np.integer)) or N < 1:
        raise ValidationError("N must be a positive integer")
    if kind == "linear":
        if not (0 < beta_start <= beta_end < 1):
            raise ValidationError("need 0 < beta_start <= beta_end < 1")
        betas = np.linspace(beta_start, beta_end, N) if N > 1 else np.array([beta_start])
    elif kind == "cosine":
        s = 0.008
        t = np.arange(N + 1) / N
        f = np.cos((t + s) / (1 + s) * np.pi / 2) ** 2
        betas = np.clip(1 - f[1:] / f[:-1], 1e-8, 0.999)
    else:
        raise ValidationError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(betas, variance)


def _coef(values, n, like):
    """Gather ``values[n]`` and shape it to broadcast against ``like`` (batch-first)."""
    if torch.is_tensor(like):
        v = torch.as_tensor(values, dtype=like.dtype)[torch.as_tensor(n, dtype=torch.long)]
        return v.reshape(v.shape + (1,) * (like.dim() - v.dim()))
    v = np.asarray(values)[np.asarray(n)]
    return v.reshape(v.shape + (1,) * (np.ndim(like) - np.ndim(v)))


def _check_steps(n, N, low=1):
    arr = n.detach().cpu().numpy() if torch.is_tensor(n) else np.asarray(n)
    if np.any(arr < low) or np.any(arr > N):
        raise ValidationError(f"step index must lie in [{low}, {N}]")


def q_sample(z0, n, eps, schedule):
    """Closed-form forward marginal ``sqrt(ab_n) z0 + sqrt(1 - ab_n) eps``."""
    if tuple(z0.shape) != tuple(eps.shape):
        raise ShapeError(f"z0 shape {tuple(z0.shape)} != noise shape {tuple(eps.shape)}")
    _check_steps(n, schedule.N, low=0)
    ab = _coef(schedule.alpha_bars, n, z0)
    sqrt = torch.sqrt if torch.is_tensor(z0) else np.sqrt
    return sqrt(ab) * z0 + sqrt(1 - ab) * eps


def q_step(z_prev, n, eps, schedule):
    """One Markov noising step ``q(Z_n | Z_{n-1})``."""
    b = schedule.betas[n - 1]
    return math.sqrt(1 - b) * z_prev + math.sqrt(b) * eps


def predict_z0(z_n, n, eps_hat, schedule):
    """Closed-form inversion ``(Z_n - sqrt(1 - ab_n) eps) / sqrt(ab_n)``."""
    ab = _coef(schedule.alpha_bars, n, z_n)
    sqrt = torch.sqrt if torch.is_tensor(z_n) else np.sqrt
    return (z_n - sqrt(1 - ab) * eps_hat) / sqrt(ab)


def ddpm_step(z_n, n, eps_hat, schedule, rng=None, noise=None):
    """Reverse step ``Z_n -> Z_{n-1}``; no noise is added at ``n = 1``.

    ``noise`` overrides the standard normal draw from ``rng``.
    """
    if not 1 <= n <= schedule.N:
        raise ValidationError(f"step index must lie in [1, {schedule.N}]")
    beta = schedule.betas[n - 1]
    ab = schedule.alpha_bars[n]
    mu = (z_n - (beta / math.sqrt(1 - ab)) * eps_hat) / math.sqrt(1 - beta)
    if n == 1:
        return mu
    if noise is None:
        if rng is None:
            raise ValidationError("ddpm_step needs an rng or explicit noise for n > 1")
        noise = rng.standard_normal(np.shape(z_n))
        if torch.is_tensor(z_n):
            noise = torch.as_tensor(noise, dtype=z_n.dtype)
    return mu + schedule.sigma(n) * noise


def cfg_mix(eps_cond, eps_uncond, s):
    """``s * cond + (1 - s) * uncond``; exact at ``s`` in {0, 1}."""
    if s == 1:
        return eps_cond
    if s == 0:
        return eps_uncond
    return s * eps_cond + (1 - s) * eps_uncond


def guided_noise(denoiser, z, n, conditions, s):
    """Noise estimate with classifier-free guidance.

    ``denoiser(z, n, conditions, style)`` is called with ``style=None`` for
    the unconditional branch. Returns ``(eps, calls)``.
    """
    style = conditions.get("style") if conditions else None
    if style is None:
        return denoiser(z, n, conditions, None), 1
    cond = denoiser(z, n, conditions, style)
    if s == 1:
        return cond, 1
    return cfg_mix(cond, denoiser(z, n, conditions, None), s), 2


def sample(denoiser, conditions, s, rng, schedule, shape, prefix=None, callback=None, stats=None):
    """Ancestral DDPM sampling from ``Z_N ~ N(0, I)`` down to ``Z_0``.

    ``prefix`` (``(..., L_p, C)``) holds previously generated clean latents; it
    is concatenated in front of the noisy sequence at every step and never
    re-noised, and only the new positions are returned. If ``stats`` is a
    dict it receives the number of denoiser calls.
    """
    z = rng.standard_normal(shape)
    n_prefix = 0 if prefix is None else np.shape(prefix)[-2]
    calls = 0
    for n in range(schedule.N, 0, -1):
        inp = z if prefix is None else np.concatenate([np.broadcast_to(prefix, shape[:-2] + np.shape(prefix)[-2:]), z], axis=-2)
        eps, c = guided_noise(denoiser, inp, n, conditions, s)
        calls += c
        eps = np.asarray(eps)[..., n_prefix:, :]
        z = ddpm_step(z, n, eps, schedule, rng)
        if not np.all(np.isfinite(z)):
            raise NumericalError("non-finite latents during sampling", step=n)
        if callback is not None:
            callback(n, z)
    if stats is not None:
        stats["calls"] = calls
    return z


def estimate_z0(z_n, n, eps_hat, schedule, mode="fast", denoiser=None, conditions=None, s=1.0, k=None, rng=None):
    """Estimate the clean latents behind ``Z_n``.

    ``fast`` uses the closed form. ``faithful`` takes ``k`` reverse steps
    with ``denoiser`` (``eps_hat`` is used for the first one) and finishes
    with the closed form from wherever it stopped.
    """
    if mode == "fast":
        return predict_z0(z_n, n, eps_hat, schedule)
    if mode != "faithful":
        raise ValidationError(f"unknown estimate mode {mode!r}")
    if denoiser is None or rng is None:
        raise ValidationError("faithful mode needs a denoiser and an rng")
    k = schedule.N if k is None else int(k)
    z, step, eps = z_n, n, eps_hat
    for _ in range(min(k, n)):
        z = ddpm_step(z, step, eps, schedule, rng)
        step -= 1
        if step == 0:
            return z
        eps, _ = guided_noise(denoiser, z, step, conditions, s)
    return predict_z0(z, step, eps, schedule)
