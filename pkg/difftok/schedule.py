"""Closed-form diffusion mathematics.

Public timesteps follow the convention t = 0 for clean data and t = T for the
prior. The internal tables are 0-based: index i holds the values after i + 1
noising steps, so `alpha_bars[t - 1]` is the cumulative product at timestep t.
"""
import math
from dataclasses import dataclass
from typing import Union

import torch

from difftok.errors import ScheduleError, ShapeError

TimestepLike = Union[int, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    def alpha_bar(self, t: TimestepLike, allow_zero: bool = True) -> torch.Tensor:
        """ᾱ_t in float64 for public timesteps; ᾱ_0 = 1."""
        t = check_timestep(t, self.T, allow_zero=allow_zero)
        padded = torch.cat([self.alpha_bars.new_ones(1), self.alpha_bars])
        return padded[t]


def cosine_profile(u: torch.Tensor, s: float = 0.008) -> torch.Tensor:
    """Squared-cosine ᾱ(u) normalised so that ᾱ(0) = 1."""
    u = u.to(torch.float64)
    num = torch.cos((u + s) / (1 + s) * math.pi / 2) ** 2
    den = math.cos(s / (1 + s) * math.pi / 2) ** 2
    return num / den


def cosine_schedule(T: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    if not isinstance(T, int) or isinstance(T, bool) or T < 1:
        raise ScheduleError(f'T must be a positive integer, got {T!r}')

    profile = cosine_profile(torch.arange(T + 1, dtype=torch.float64) / T, s)
    profile[0] = 1.0
    # clip only engages at the terminal step, where the profile reaches 0
    alphas = (profile[1:] / profile[:-1]).clamp(min=1.0 - max_beta, max=1.0)
    betas = 1.0 - alphas
    alpha_bars = torch.cumprod(alphas, dim=0)

    if not (betas > 0).all():
        raise ScheduleError('cosine profile produced a non-positive beta; T is too large for float64')
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def check_timestep(t: TimestepLike, T: int, allow_zero: bool = False) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    low = 0 if allow_zero else 1
    if t.numel() and (t.min() < low or t.max() > T):
        raise ScheduleError(f'timestep out of range [{low}, {T}]', t=t.tolist())
    return t


def per_sample(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Per-sample coefficients (B,) or scalar, shaped to broadcast against `like`."""
    coef = coef.to(device=like.device, dtype=like.dtype)
    if coef.dim() == 0:
        return coef
    return coef.reshape(-1, *([1] * (like.dim() - 1)))


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f'{what} shape mismatch', left=tuple(a.shape), right=tuple(b.shape))


def q_sample(v0: torch.Tensor, t: TimestepLike, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """V_t = sqrt(ᾱ_t)·V_0 + sqrt(1 − ᾱ_t)·ε."""
    _check_same_shape(v0, eps, 'noise')
    ab = sched.alpha_bar(check_timestep(t, sched.T))
    return per_sample(ab.sqrt(), v0) * v0 + per_sample((1.0 - ab).sqrt(), v0) * eps


def snr_weight(t: TimestepLike, sched: NoiseSchedule) -> torch.Tensor:
    """ᾱ_t / (1 − ᾱ_t), strictly decreasing in t."""
    ab = sched.alpha_bar(check_timestep(t, sched.T))
    return ab / (1.0 - ab)


def eps_from_x0(v_t: torch.Tensor, v0_hat: torch.Tensor, t: TimestepLike, sched: NoiseSchedule) -> torch.Tensor:
    _check_same_shape(v_t, v0_hat, 'prediction')
    ab = sched.alpha_bar(check_timestep(t, sched.T))
    return (v_t - per_sample(ab.sqrt(), v_t) * v0_hat) / per_sample((1.0 - ab).sqrt(), v_t)


def schedule_from_config(model_cfg, schedule_cfg) -> NoiseSchedule:
    return cosine_schedule(model_cfg.timesteps, s=schedule_cfg.cosine_offset, max_beta=schedule_cfg.max_beta)
