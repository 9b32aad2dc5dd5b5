"""Noise schedule, forward noising, epsilon-prediction loss and reverse samplers.

Denoisers are callables ``denoiser(x_t, t, cond) -> eps_hat`` where ``x_t`` is a
batched tensor and ``t`` a long tensor of per-sample timesteps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    beta_start: float = float("nan")
    beta_end: float = float("nan")
    variance: str = "posterior"

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a non-empty 1-D array")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("beta must lie in (0, 1)")
        if self.variance not in ("posterior", "beta"):
            raise ValueError(f"unknown variance mode {self.variance!r}")
        object.__setattr__(self, "beta", beta)

    @property
    def T(self):
        return self.beta.size

    @property
    def alpha(self):
        return 1.0 - self.beta

    @property
    def alpha_bar(self):
        return np.cumprod(self.alpha)

    @property
    def alpha_bar_prev(self):
        return np.concatenate([[1.0], self.alpha_bar[:-1]])

    @property
    def posterior_variance(self):
        """beta_tilde; zero at t = 0."""
        return self.beta * (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar)

    def sigma(self):
        if self.variance == "beta":
            var = self.beta.copy()
            var[0] = 0.0
            return np.sqrt(var)
        return np.sqrt(self.posterior_variance)

    def to_dict(self):
        return {
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "variance": self.variance,
        }

    @classmethod
    def from_dict(cls, d):
        return make_linear_schedule(d["T"], d["beta_start"], d["beta_end"], d.get("variance", "posterior"))


def make_linear_schedule(T=1000, beta_start=1e-4, beta_end=0.02, variance="posterior"):
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    return NoiseSchedule(beta, float(beta_start), float(beta_end), variance)


def randn(shape, generator=None, dtype=torch.float32, device=None):
    """Standard normal draw; ``generator`` may be a list with one stream per batch row."""
    if isinstance(generator, (list, tuple)):
        if len(generator) != shape[0]:
            raise ValueError(f"{len(generator)} generators for batch of {shape[0]}")
        return torch.stack([torch.randn(tuple(shape[1:]), generator=g, dtype=dtype, device=device)
                            for g in generator])
    return torch.randn(tuple(shape), generator=generator, dtype=dtype, device=device)


def _check_t(t, sched):
    tt = torch.as_tensor(t)
    if torch.any(tt < 0) or torch.any(tt >= sched.T):
        raise IndexError(f"timestep out of range [0, {sched.T})")
    return tt.long()


def _gather(values, t, like):
    """Pick schedule values at ``t`` and reshape to broadcast against ``like``."""
    v = torch.as_tensor(values, dtype=like.dtype, device=like.device)[t]
    if v.ndim == 0:
        return v
    return v.reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """Closed-form forward noising ``sqrt(ab) x0 + sqrt(1 - ab) eps``."""
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    if not torch.is_tensor(x0):
        if np.any(np.asarray(t) < 0) or np.any(np.asarray(t) >= sched.T):
            raise IndexError(f"timestep out of range [0, {sched.T})")
        ab = sched.alpha_bar[t]
        ab = np.reshape(ab, np.shape(ab) + (1,) * (np.ndim(x0) - np.ndim(ab))) if np.ndim(ab) else ab
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    t = _check_t(t, sched)
    ab = _gather(sched.alpha_bar, t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def training_loss(denoiser, x0, cond, sched: NoiseSchedule, generator=None, norm="l2"):
    """Monte-Carlo epsilon-prediction loss for a batch ``x0`` of shape (B, ...)."""
    b = x0.shape[0]
    t = torch.randint(0, sched.T, (b,), generator=generator, device=x0.device)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype, device=x0.device)
    x_t = q_sample(x0, t, eps, sched)
    resid = eps - denoiser(x_t, t, cond)
    if norm == "l2":
        return resid.pow(2).mean()
    if norm == "l1":
        return resid.abs().mean()
    raise ValueError(f"unknown norm {norm!r}")


def predict_x0(x_t, t, eps_hat, sched: NoiseSchedule):
    ab = _gather(sched.alpha_bar, t, x_t)
    return (x_t - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt()


def _clip(x0, clip_range):
    return x0 if clip_range is None else x0.clamp(*clip_range)


def p_sample_step(denoiser, x_t, t, cond, sched: NoiseSchedule, generator=None, clip_range=None):
    """One ancestral step from ``t`` to ``t - 1``; no noise is injected at ``t == 0``.

    With ``clip_range`` the x0 estimate is clamped and the posterior mean is
    formed from it, which keeps short chains from amplifying denoiser error.
    """
    t_int = int(t)
    if not 0 <= t_int < sched.T:
        raise IndexError(f"timestep {t_int} out of range [0, {sched.T})")
    tt = torch.full((x_t.shape[0],), t_int, dtype=torch.long, device=x_t.device)
    eps_hat = denoiser(x_t, tt, cond)
    beta = float(sched.beta[t_int])
    alpha = float(sched.alpha[t_int])
    ab = float(sched.alpha_bar[t_int])
    if clip_range is None:
        mean = (x_t - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(alpha)
    else:
        ab_prev = float(sched.alpha_bar_prev[t_int])
        x0 = _clip((x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab), clip_range)
        mean = (np.sqrt(ab_prev) * beta / (1.0 - ab)) * x0 \
            + (np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)) * x_t
    if t_int == 0:
        return mean
    sigma = float(sched.sigma()[t_int])
    return mean + sigma * randn(x_t.shape, generator, x_t.dtype, x_t.device)


def ddim_step(denoiser, x_t, t, t_prev, cond, sched: NoiseSchedule, clip_range=None):
    """Deterministic (eta = 0) jump from ``t`` to ``t_prev`` (``-1`` means the clean state)."""
    tt = torch.full((x_t.shape[0],), int(t), dtype=torch.long, device=x_t.device)
    eps_hat = denoiser(x_t, tt, cond)
    ab = float(sched.alpha_bar[t])
    x0 = (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    if t_prev < 0:
        return _clip(x0, clip_range)
    if clip_range is not None:
        x0 = _clip(x0, clip_range)
        eps_hat = (x_t - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
    ab_prev = float(sched.alpha_bar[t_prev])
    return np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps_hat


def timestep_ladder(T, stride=1):
    if int(stride) != stride or stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride}")
    if T % stride:
        raise ValueError(f"stride {stride} does not divide T={T}")
    return list(range(0, T, int(stride)))[::-1]


@torch.no_grad()
def sample(denoiser, shape, cond, sched: NoiseSchedule, generator=None, stride=1,
           dtype=torch.float32, callback=None, clip_range=None):
    """Run the reverse chain from pure noise down to t = 0.

    ``stride == 1`` is ancestral sampling; larger strides take deterministic
    DDIM jumps over a subsampled ladder. ``callback(t, x)`` sees every state.
    """
    ladder = timestep_ladder(sched.T, stride)
    x = randn(tuple(shape), generator, dtype)
    for k, t in enumerate(ladder):
        if stride == 1:
            x = p_sample_step(denoiser, x, t, cond, sched, generator, clip_range)
        else:
            t_prev = ladder[k + 1] if k + 1 < len(ladder) else -1
            x = ddim_step(denoiser, x, t, t_prev, cond, sched, clip_range)
        if callback is not None:
            callback(t, x)
    return x


__all__ = [
    "NoiseSchedule",
    "make_linear_schedule",
    "q_sample",
    "training_loss",
    "predict_x0",
    "p_sample_step",
    "ddim_step",
    "timestep_ladder",
    "sample",
]
