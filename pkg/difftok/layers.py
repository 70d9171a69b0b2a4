"""Causal video building blocks.

Every temporal operation here is causal at chunk granularity: the first frame is
treated as an image, later frames see only the past. Layers that carry state
between chunks take an optional CacheState; with `cache=None` they process a
whole clip starting at frame 0.
"""
import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from difftok.errors import ChunkingError
from difftok.feature_cache import CacheState


class FrameGroupNorm(nn.GroupNorm):
    """GroupNorm applied to every frame on its own."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, t, h, w = x.shape
        y = super().forward(x.transpose(1, 2).reshape(b * t, c, h, w))
        return y.reshape(b, t, c, h, w).transpose(1, 2)


class CausalConv3d(nn.Module):
    """3D convolution padded only on the temporal past; spatial padding is symmetric."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__()
        self.layer_id = ''
        self.time_pad = kernel_size - 1
        self.conv = nn.Conv3d(in_channels, out_channels, kernel_size,
                              padding=(0, kernel_size // 2, kernel_size // 2))

    def forward(self, x: torch.Tensor, cache: Optional[CacheState] = None) -> torch.Tensor:
        if cache is None:
            b, c, _, h, w = x.shape
            past = x.new_zeros(b, c, self.time_pad, h, w)
        else:
            past = cache.take(self.layer_id, x, self.time_pad)
        x = torch.cat([past, x], dim=2)
        if cache is not None:
            cache.put(self.layer_id, x[:, :, -self.time_pad:])
            cache.observe(x)
        return self.conv(x)


class TemporalDownsample(nn.Module):
    """Stride-2 temporal convolution; the first frame passes through as an image.

    Whole clip of 1 + 2m frames -> 1 + m frames. A streamed non-initial chunk of 2k
    frames is prefixed with the single cached frame of the previous chunk.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.layer_id = ''
        self.conv = nn.Conv3d(channels, channels, kernel_size=(3, 1, 1), stride=(2, 1, 1))

    def forward(self, x: torch.Tensor, cache: Optional[CacheState] = None) -> torch.Tensor:
        length = x.shape[2]
        if cache is not None and cache.has(self.layer_id):
            if length % 2:
                raise ChunkingError(f'temporal downsample got an odd chunk of {length} frames',
                                    layer=self.layer_id, frames=length)
            x_in = torch.cat([cache.take(self.layer_id, x, 1), x], dim=2)
            out = self.conv(x_in)
        else:
            if (length - 1) % 2:
                raise ChunkingError(f'temporal downsample needs 1 + 2k frames, got {length}',
                                    layer=self.layer_id, frames=length)
            x_in = x
            out = x[:, :, :1]
            if length > 1:
                out = torch.cat([out, self.conv(x)], dim=2)
        if cache is not None:
            cache.put(self.layer_id, x[:, :, -1:])
            cache.observe(x_in)
        return out


class TemporalUpsample(nn.Module):
    """Nearest-neighbour temporal repeat; the first frame is kept once."""

    def __init__(self):
        super().__init__()
        self.layer_id = ''

    def forward(self, x: torch.Tensor, cache: Optional[CacheState] = None) -> torch.Tensor:
        initial = cache is None or not cache.has(self.layer_id)
        if cache is not None:
            cache.mark(self.layer_id)
        if initial:
            return torch.cat([x[:, :, :1], x[:, :, 1:].repeat_interleave(2, dim=2)], dim=2)
        return x.repeat_interleave(2, dim=2)


class Downsample(nn.Module):
    """2x spatial downsampling per frame, optionally followed by 2x temporal."""

    def __init__(self, channels: int, temporal: bool):
        super().__init__()
        self.spatial = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        self.temporal = TemporalDownsample(channels) if temporal else None

    def forward(self, x: torch.Tensor, cache: Optional[CacheState] = None) -> torch.Tensor:
        b, c, t, h, w = x.shape
        y = self.spatial(x.transpose(1, 2).reshape(b * t, c, h, w))
        x = y.reshape(b, t, c, h // 2, w // 2).transpose(1, 2)
        if self.temporal is not None:
            x = self.temporal(x, cache)
        return x


class Upsample(nn.Module):
    """Optional temporal repeat, 2x nearest spatial repeat, then a causal conv."""

    def __init__(self, in_channels: int, out_channels: int, temporal: bool):
        super().__init__()
        self.temporal = TemporalUpsample() if temporal else None
        self.conv = CausalConv3d(in_channels, out_channels)

    def forward(self, x: torch.Tensor, cache: Optional[CacheState] = None) -> torch.Tensor:
        if self.temporal is not None:
            x = self.temporal(x, cache)
        x = F.interpolate(x, scale_factor=(1, 2, 2), mode='nearest')
        return self.conv(x, cache)


class ResBlock3d(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, groups: int = 8, temb_channels: Optional[int] = None):
        super().__init__()
        self.norm1 = FrameGroupNorm(groups, in_channels)
        self.conv1 = CausalConv3d(in_channels, out_channels)
        self.temb_proj = nn.Linear(temb_channels, out_channels) if temb_channels else None
        self.norm2 = FrameGroupNorm(groups, out_channels)
        self.conv2 = CausalConv3d(out_channels, out_channels)
        self.skip = nn.Conv3d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x: torch.Tensor, temb: Optional[torch.Tensor] = None,
                cache: Optional[CacheState] = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)), cache)
        if self.temb_proj is not None and temb is not None:
            h = h + self.temb_proj(F.silu(temb))[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)), cache)
        return self.skip(x) + h


class SpatialAttention(nn.Module):
    """Single-head self-attention over the pixels of each frame separately."""

    def __init__(self, channels: int, groups: int = 8):
        super().__init__()
        self.norm = FrameGroupNorm(groups, channels)
        self.qkv = nn.Conv3d(channels, channels * 3, 1)
        self.proj = nn.Conv3d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, t, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=1)

        def tokens(y):
            return y.permute(0, 2, 3, 4, 1).reshape(b * t, h * w, c)

        q, k, v = tokens(q), tokens(k), tokens(v)
        weights = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        out = (weights @ v).reshape(b, t, h, w, c).permute(0, 4, 1, 2, 3)
        return x + self.proj(out)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of (B,) timesteps -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64, device=t.device) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def assign_layer_ids(root: nn.Module) -> None:
    """Name every stateful causal layer after its path so caches can key on it."""
    for name, module in root.named_modules():
        if isinstance(module, (CausalConv3d, TemporalDownsample, TemporalUpsample)):
            module.layer_id = name
