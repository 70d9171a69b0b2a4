"""Encoder, Condition Adapter and conditional denoiser.

Both networks share one stage layout. Stage i runs at:

    stage 0: (1+F,   H,   W)
    stage 1: (1+F,   H/2, W/2)   after a spatial-only downsample
    stage 2: (1+F/2, H/4, W/4)   after a spatial and temporal downsample
    stage 3: (1+F/4, H/8, W/8)   after a spatial and temporal downsample

The encoder ends at stage 3, which is the latent grid. The denoiser mirrors it
back up with skip connections, and the adapter climbs from the latent grid to
produce one map for the input of every denoiser stage.
"""
import logging
from typing import Dict, List, Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from difftok.config import ModelConfig
from difftok.errors import ShapeError
from difftok.feature_cache import CacheState
from difftok.layers import (CausalConv3d, Downsample, FrameGroupNorm, ResBlock3d, SpatialAttention,
                            TemporalUpsample, Upsample, assign_layer_ids, timestep_embedding)
from difftok.models import Latent, LatentPosterior, VideoTensor, check_video_dims, pixel_grid
from difftok.record_utils import fields
from difftok.schedule import check_timestep

logger = logging.getLogger(__name__)

VideoLike = Union[VideoTensor, torch.Tensor]


def _temporal_down(stage: int) -> bool:
    return stage in (1, 2)


class CausalEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        channels = cfg.stage_channels
        groups = cfg.norm_groups

        self.conv_in = CausalConv3d(3, cfg.base_channels)
        self.stages = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        prev = cfg.base_channels
        for i, ch in enumerate(channels):
            blocks = nn.ModuleList()
            for _ in range(cfg.num_res_blocks):
                blocks.append(ResBlock3d(prev, ch, groups))
                prev = ch
            self.stages.append(blocks)
            if i < len(channels) - 1:
                self.downsamples.append(Downsample(ch, temporal=_temporal_down(i)))
        self.norm_out = FrameGroupNorm(groups, prev)
        self.conv_out = CausalConv3d(prev, 2 * cfg.latent_dim)
        assign_layer_ids(self)

    def forward(self, x: torch.Tensor, cache: Optional[CacheState] = None):
        h = self.conv_in(x, cache)
        for i, blocks in enumerate(self.stages):
            for block in blocks:
                h = block(h, cache=cache)
            if i < len(self.downsamples):
                h = self.downsamples[i](h, cache)
        h = self.conv_out(F.silu(self.norm_out(h)), cache)
        mean, logvar = h.chunk(2, dim=1)
        return mean, logvar


class ConditionAdapter(nn.Module):
    """Four chained sub-modules, one causal conv each, from the latent grid upwards.

    Sub-module 3 reads z at stage-3 resolution; every later sub-module upsamples the
    previous map (no parameters) before its conv. Map i matches the input of
    denoiser stage i.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        channels = cfg.stage_channels
        # input channels of denoiser stage i
        self.stage_inputs = (cfg.base_channels, *channels[:-1])
        self.injection_count = cfg.injection_count

        self.blocks = nn.ModuleList()
        self.temporal = nn.ModuleList()
        prev = cfg.latent_dim
        for i in reversed(range(ModelConfig.NUM_STAGES)):
            self.blocks.append(CausalConv3d(prev, self.stage_inputs[i]))
            prev = self.stage_inputs[i]
        for i in reversed(range(ModelConfig.NUM_STAGES - 1)):
            # going from stage i+1 to stage i undoes the downsample after stage i
            self.temporal.append(TemporalUpsample() if _temporal_down(i) else nn.Identity())
        assign_layer_ids(self)

    def forward(self, z: torch.Tensor, cache: Optional[CacheState] = None) -> List[torch.Tensor]:
        maps = []
        h = self.blocks[0](z, cache)
        maps.append(h)
        for temporal, block in zip(self.temporal, self.blocks[1:]):
            h = F.silu(h)
            h = temporal(h, cache) if isinstance(temporal, TemporalUpsample) else h
            h = F.interpolate(h, scale_factor=(1, 2, 2), mode='nearest')
            h = block(h, cache)
            maps.append(h)
        maps.reverse()
        return maps[:self.injection_count]


class ConditionalDenoiser(nn.Module):
    """3D U-Net predicting the clean clip from (V_t, condition maps, t)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        channels = cfg.stage_channels
        groups = cfg.norm_groups
        c0 = cfg.base_channels
        temb = 4 * c0
        self.embed_dim = c0

        self.time_mlp = nn.Sequential(nn.Linear(c0, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = CausalConv3d(3, c0)

        self.down = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        prev = c0
        for i, ch in enumerate(channels):
            blocks = nn.ModuleList()
            for _ in range(cfg.num_res_blocks):
                blocks.append(ResBlock3d(prev, ch, groups, temb))
                prev = ch
            self.down.append(blocks)
            if i < len(channels) - 1:
                self.downsamples.append(Downsample(ch, temporal=_temporal_down(i)))

        self.mid_block1 = ResBlock3d(prev, prev, groups, temb)
        self.mid_attn = SpatialAttention(prev, groups)
        self.mid_block2 = ResBlock3d(prev, prev, groups, temb)

        self.up = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(len(channels))):
            ch = channels[i]
            blocks = nn.ModuleList([ResBlock3d(prev + ch, ch, groups, temb)])
            for _ in range(cfg.num_res_blocks - 1):
                blocks.append(ResBlock3d(ch, ch, groups, temb))
            self.up.append(blocks)
            prev = ch
            if i > 0:
                self.upsamples.append(Upsample(ch, channels[i - 1], temporal=_temporal_down(i - 1)))
                prev = channels[i - 1]

        self.norm_out = FrameGroupNorm(groups, prev)
        self.conv_out = CausalConv3d(prev, 3)
        assign_layer_ids(self)

    def forward(self, v_t: torch.Tensor, t: torch.Tensor, cond: List[torch.Tensor],
                cache: Optional[CacheState] = None) -> torch.Tensor:
        dtype = self.conv_in.conv.weight.dtype
        temb = self.time_mlp(timestep_embedding(t, self.embed_dim).to(dtype))

        h = self.conv_in(v_t, cache)
        skips = []
        for i, blocks in enumerate(self.down):
            if i < len(cond):
                if cond[i].shape != h.shape:
                    raise ShapeError(f'condition map {i} does not match denoiser stage input',
                                     stage=i, cond=tuple(cond[i].shape), stage_input=tuple(h.shape))
                h = h + cond[i]
            for block in blocks:
                h = block(h, temb, cache)
            skips.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h, cache)

        h = self.mid_block1(h, temb, cache)
        h = self.mid_attn(h)
        h = self.mid_block2(h, temb, cache)

        for j, blocks in enumerate(self.up):
            h = torch.cat([h, skips.pop()], dim=1)
            for block in blocks:
                h = block(h, temb, cache)
            if j < len(self.upsamples):
                h = self.upsamples[j](h, cache)

        return self.conv_out(F.silu(self.norm_out(h)), cache)


class Tokenizer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = CausalEncoder(cfg)
        self.adapter = ConditionAdapter(cfg)
        self.denoiser = ConditionalDenoiser(cfg)
        assign_layer_ids(self)

    @property
    def device(self) -> torch.device:
        return self.encoder.conv_in.conv.weight.device

    @property
    def dtype(self) -> torch.dtype:
        return self.encoder.conv_in.conv.weight.dtype

    def parameter_report(self) -> Dict[str, int]:
        def count(module):
            return sum(p.numel() for p in module.parameters())

        encoder = count(self.encoder)
        decoder = count(self.adapter) + count(self.denoiser)
        return {'encoder_params': encoder, 'decoder_params': decoder, 'total_params': encoder + decoder}


def as_model_input(v: VideoLike, net: Tokenizer) -> torch.Tensor:
    """(B, 3, T, H, W) on the network's device and dtype, dimensions checked."""
    x = v.to_model() if isinstance(v, VideoTensor) else v
    if x.dim() != 5 or x.shape[1] != 3:
        raise ShapeError(f'expected (B, 3, T, H, W) video, got {tuple(x.shape)}')
    check_video_dims(*x.shape[2:])
    return x.to(device=net.device, dtype=net.dtype)


def as_latent_tensor(z) -> torch.Tensor:
    return z.z if isinstance(z, Latent) else z


def encode(v0: VideoLike, net: Tokenizer) -> LatentPosterior:
    mean, logvar = net.encoder(as_model_input(v0, net))
    return LatentPosterior(mean, logvar)


def sample_latent(post: LatentPosterior, seed: Optional[int] = None,
                  generator: Optional[torch.Generator] = None, deterministic: bool = False) -> Latent:
    """z = mean + std·ε; `deterministic` returns the mean."""
    if deterministic:
        return Latent(post.mean)
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    eps = torch.randn(post.mean.shape, generator=generator, dtype=post.mean.dtype)
    return Latent(post.mean + post.std * eps.to(post.mean.device))


def kl_loss(post: LatentPosterior) -> torch.Tensor:
    """Mean over elements of KL(N(mean, exp(logvar)) || N(0, 1))."""
    return 0.5 * torch.mean(post.mean ** 2 + torch.exp(post.logvar) - 1.0 - post.logvar)


def condition_adapter(z, net: Tokenizer) -> List[torch.Tensor]:
    return net.adapter(as_latent_tensor(z).to(device=net.device, dtype=net.dtype))


def check_pair(v_t: torch.Tensor, z: torch.Tensor) -> None:
    b, _, f, h, w = z.shape
    expected = (b, 3, *pixel_grid(f, h, w))
    if tuple(v_t.shape) != expected:
        raise ShapeError('noisy clip does not match the latent grid',
                         clip=tuple(v_t.shape), expected=expected)


def denoise(v_t: VideoLike, z, t, net: Tokenizer) -> torch.Tensor:
    """Predicted clean clip in model layout, same shape as `v_t`."""
    x = as_model_input(v_t, net)
    z = as_latent_tensor(z).to(device=net.device, dtype=net.dtype)
    check_pair(x, z)
    t = check_timestep(t, net.cfg.timesteps).to(net.device).expand(x.shape[0])
    return net.denoiser(x, t, net.adapter(z))


def build_tokenizer(cfg: ModelConfig, seed: int = 0) -> Tokenizer:
    """Fresh tokenizer with weights drawn from `seed`."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = Tokenizer(cfg)
    report = net.parameter_report()
    logger.info('✅ tokenizer built', extra=fields(seed=seed, **report))
    return net
