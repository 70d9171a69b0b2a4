"""Deterministic DDIM decoding over a reduced time grid."""
import logging
from typing import Callable, Optional

import torch

from difftok.decorators import count_calls
from difftok.errors import ScheduleError
from difftok.models import Latent, TimeGrid, VideoTensor
from difftok.networks import Tokenizer, VideoLike, as_latent_tensor, denoise, encode
from difftok.record_utils import fields
from difftok.schedule import NoiseSchedule, per_sample, eps_from_x0
from difftok.streaming import stream_decode_denoise, stream_encode

logger = logging.getLogger(__name__)

# (v_t, z, t) -> predicted clean clip
Denoiser = Callable[[torch.Tensor, torch.Tensor, int], torch.Tensor]


def make_time_grid(N: int, T: int) -> TimeGrid:
    """τ_i = floor(i·T/N + 1/2) for i = 0..N, computed in integers."""
    if N < 1 or N > T:
        raise ScheduleError(f'step count must lie in [1, {T}], got {N}', steps=N, T=T)
    taus = sorted({(2 * i * T + N) // (2 * N) for i in range(N + 1)} | {0, T})
    return TimeGrid(tuple(taus))


def network_denoiser(net: Tokenizer, streaming: bool = False) -> Denoiser:
    """The tokenizer's denoiser as a call-counted (v_t, z, t) callable."""
    fn = stream_decode_denoise if streaming else denoise

    def predict(v_t, z, t):
        return fn(v_t, z, t, net)

    return count_calls(predict)


def ddim_step(v_tau: torch.Tensor, z, tau_n: int, tau_prev: int, denoiser: Denoiser,
              sched: NoiseSchedule) -> torch.Tensor:
    if not 0 <= tau_prev < tau_n <= sched.T:
        raise ScheduleError(f'DDIM step needs 0 <= tau_prev < tau_n <= {sched.T}',
                            tau_n=tau_n, tau_prev=tau_prev)
    x0 = denoiser(v_tau, z, tau_n)
    if tau_prev == 0:
        return x0
    eps = eps_from_x0(v_tau, x0, tau_n, sched)
    ab_prev = sched.alpha_bar(tau_prev)
    return per_sample(ab_prev.sqrt(), x0) * x0 + per_sample((1.0 - ab_prev).sqrt(), x0) * eps


def initial_noise(shape, seed: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """V_T drawn on CPU so that a seed gives the same noise on every device."""
    generator = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=generator, dtype=torch.float32).to(device=device, dtype=dtype)


def run_ddim(v_T: torch.Tensor, z, grid: TimeGrid, denoiser: Denoiser, sched: NoiseSchedule) -> torch.Tensor:
    if grid.T != sched.T:
        raise ScheduleError(f'time grid ends at {grid.T} but the schedule has T={sched.T}')
    v = v_T
    for tau_n, tau_prev in grid.descending_pairs():
        v = ddim_step(v, z, tau_n, tau_prev, denoiser, sched)
    return v


def decode(z, steps: int, seed: int, net: Tokenizer, sched: NoiseSchedule,
           streaming: bool = False, denoiser: Optional[Denoiser] = None) -> torch.Tensor:
    """Latent -> clip in model layout, starting from seeded V_T ~ N(0, I)."""
    z = as_latent_tensor(z).to(device=net.device, dtype=net.dtype)
    denoiser = denoiser or network_denoiser(net, streaming)
    grid = make_time_grid(steps, sched.T)
    v_T = initial_noise(Latent(z).pixel_shape, seed, device=net.device, dtype=net.dtype)

    with torch.no_grad():
        out = run_ddim(v_T, z, grid, denoiser, sched)

    logger.info('decoded', extra=fields(steps=steps, seed=seed, streaming=streaming,
                                        denoiser_calls=getattr(denoiser, 'calls', None)))
    return out


def reconstruct(v0: VideoLike, steps: int, seed: int, net: Tokenizer, sched: NoiseSchedule,
                streaming: bool = False, denoiser: Optional[Denoiser] = None) -> VideoTensor:
    """Encode to the posterior mean, then DDIM-decode from seeded noise."""
    with torch.no_grad():
        post = stream_encode(v0, net) if streaming else encode(v0, net)
    out = decode(post.mean, steps, seed, net, sched, streaming=streaming, denoiser=denoiser)
    fps = v0.fps if isinstance(v0, VideoTensor) else None
    return VideoTensor.from_model(out, fps=fps)

