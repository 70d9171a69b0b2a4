"""Chunk-by-chunk encoding and denoising with per-layer feature caches.

A clip of 1 + 4k frames is cut into chunks of (1, 4, 4, ...) frames; its latent
into single frames. Each call owns one fresh CacheState, so streaming the chunks
in order gives the whole-clip result up to float accumulation order.
"""
import logging
from typing import List, Optional, Tuple

import torch

from difftok.errors import ChunkingError
from difftok.feature_cache import CacheState
from difftok.layers import CausalConv3d, TemporalDownsample
from difftok.models import TEMPORAL_FACTOR, Chunk, LatentPosterior, VideoTensor
from difftok.networks import Tokenizer, VideoLike, as_latent_tensor, as_model_input, check_pair
from difftok.record_utils import fields
from difftok.schedule import check_timestep

logger = logging.getLogger(__name__)


def _chunk_bounds(frames: int, size: int) -> List[Tuple[int, int]]:
    if frames < 1 or (frames - 1) % size:
        raise ChunkingError(f'{frames} frames cannot be split into chunks of (1, {size}, {size}, ...)',
                            frames=frames)
    bounds = [(0, 1)]
    for start in range(1, frames, size):
        bounds.append((start, start + size))
    return bounds


def chunk_video(v: VideoLike, size: int = TEMPORAL_FACTOR) -> List[Chunk]:
    """Lossless partition of a clip into chunks of 1, then `size` frames."""
    x = v.to_model() if isinstance(v, VideoTensor) else v
    return [Chunk(x[:, :, a:b], i) for i, (a, b) in enumerate(_chunk_bounds(x.shape[2], size))]


def chunk_latent(z: torch.Tensor) -> List[Chunk]:
    return [Chunk(z[:, :, i:i + 1], i) for i in range(z.shape[2])]


def causal_conv_step(features: torch.Tensor, cache: CacheState,
                     layer: CausalConv3d) -> Tuple[torch.Tensor, CacheState]:
    return layer(features, cache), cache


def temporal_down_step(features: torch.Tensor, cache: CacheState,
                       layer: TemporalDownsample) -> Tuple[torch.Tensor, CacheState]:
    return layer(features, cache), cache


def _fresh(cache: Optional[CacheState]) -> CacheState:
    if cache is None:
        return CacheState()
    cache.reset()
    return cache


def stream_encode(v: VideoLike, net: Tokenizer, cache: Optional[CacheState] = None) -> LatentPosterior:
    x = as_model_input(v, net)
    cache = _fresh(cache)

    means, logvars = [], []
    for chunk in chunk_video(x):
        mean, logvar = net.encoder(chunk.frames, cache)
        means.append(mean)
        logvars.append(logvar)
        cache.chunks_seen += 1

    logger.debug('stream encoded', extra=fields(chunks=cache.chunks_seen, layers=len(cache.manifest),
                                                peak_elements=cache.peak_elements))
    return LatentPosterior(torch.cat(means, dim=2), torch.cat(logvars, dim=2))


def stream_decode_denoise(v_t: VideoLike, z, t, net: Tokenizer,
                          cache: Optional[CacheState] = None) -> torch.Tensor:
    """Chunked counterpart of networks.denoise; adapter and denoiser share one cache."""
    x = as_model_input(v_t, net)
    z = as_latent_tensor(z).to(device=net.device, dtype=net.dtype)
    check_pair(x, z)
    t = check_timestep(t, net.cfg.timesteps).to(net.device).expand(x.shape[0])
    cache = _fresh(cache)

    outputs = []
    for frames, latent in zip(chunk_video(x), chunk_latent(z)):
        cond = net.adapter(latent.frames, cache)
        outputs.append(net.denoiser(frames.frames, t, cond, cache))
        cache.chunks_seen += 1

    logger.debug('stream denoised', extra=fields(chunks=cache.chunks_seen, layers=len(cache.manifest),
                                                 peak_elements=cache.peak_elements))
    return torch.cat(outputs, dim=2)
