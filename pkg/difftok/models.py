from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch

from difftok.errors import ShapeError

TEMPORAL_FACTOR = 4
SPATIAL_FACTOR = 8


def check_video_dims(frames: int, height: int, width: int) -> None:
    if (frames - 1) % TEMPORAL_FACTOR or frames < 1:
        raise ShapeError(f'frame count must be 1 + 4k, got {frames}', frames=frames)
    if height % SPATIAL_FACTOR or width % SPATIAL_FACTOR or height < 1 or width < 1:
        raise ShapeError(f'height and width must be multiples of 8, got {height}x{width}',
                         height=height, width=width)


def latent_grid(frames: int, height: int, width: int) -> Tuple[int, int, int]:
    check_video_dims(frames, height, width)
    return 1 + (frames - 1) // TEMPORAL_FACTOR, height // SPATIAL_FACTOR, width // SPATIAL_FACTOR


def pixel_grid(latent_frames: int, latent_height: int, latent_width: int) -> Tuple[int, int, int]:
    return 1 + (latent_frames - 1) * TEMPORAL_FACTOR, latent_height * SPATIAL_FACTOR, latent_width * SPATIAL_FACTOR


@dataclass
class VideoTensor:
    """A clip of (1+F, H, W, 3) RGB frames in [-1, 1], channels last."""

    data: torch.Tensor
    fps: Optional[float] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.data.dim() != 4 or self.data.shape[-1] != 3:
            raise ShapeError(f'video must be (1+F, H, W, 3), got {tuple(self.data.shape)}')
        check_video_dims(*self.data.shape[:3])
        if not torch.isfinite(self.data).all():
            raise ShapeError('video contains non-finite values')
        if self.data.numel() and (self.data.min() < -1 or self.data.max() > 1):
            raise ShapeError('video values must lie in [-1, 1]')
        if self.fps is not None and self.fps <= 0:
            raise ShapeError(f'fps must be positive, got {self.fps}')

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    def to_model(self, device=None, dtype=None) -> torch.Tensor:
        """(1, 3, T, H, W) batch in model layout."""
        x = self.data.permute(3, 0, 1, 2).unsqueeze(0).contiguous()
        return x.to(device=device, dtype=dtype or x.dtype)

    @classmethod
    def from_model(cls, x: torch.Tensor, fps: Optional[float] = None, clamp: bool = True) -> 'VideoTensor':
        if x.dim() == 5:
            if x.shape[0] != 1:
                raise ShapeError(f'expected a single clip batch, got batch of {x.shape[0]}')
            x = x[0]
        data = x.detach().permute(1, 2, 3, 0).contiguous().float().cpu()
        if clamp:
            data = data.clamp(-1.0, 1.0)
        return cls(data, fps=fps)

    @classmethod
    def from_uint8(cls, frames: np.ndarray, fps: Optional[float] = None) -> 'VideoTensor':
        """Exact affine map x / 127.5 - 1."""
        data = torch.from_numpy(frames.astype(np.float32) / np.float32(127.5) - np.float32(1.0))
        return cls(data, fps=fps)

    def to_uint8(self) -> np.ndarray:
        scaled = (self.data.numpy().astype(np.float64) + 1.0) * 127.5
        return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)

    def to_unit_range(self) -> np.ndarray:
        return (self.data.numpy().astype(np.float64) + 1.0) / 2.0


@dataclass
class LatentPosterior:
    """Diagonal Gaussian over the latent grid, model layout (B, c, 1+f, h, w)."""

    LOGVAR_MIN = -30.0
    LOGVAR_MAX = 20.0

    mean: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise ShapeError('mean and logvar shapes differ',
                             mean=tuple(self.mean.shape), logvar=tuple(self.logvar.shape))
        self.logvar = self.logvar.clamp(self.LOGVAR_MIN, self.LOGVAR_MAX)

    @property
    def grid_shape(self) -> Tuple[int, int, int, int]:
        """(1+f, h, w, c) of one clip."""
        _, c, f, h, w = self.mean.shape
        return f, h, w, c

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.logvar)


@dataclass
class Latent:
    z: torch.Tensor

    def __post_init__(self):
        if self.z.dim() != 5:
            raise ShapeError(f'latent must be (B, c, 1+f, h, w), got {tuple(self.z.shape)}')

    @property
    def grid_shape(self) -> Tuple[int, int, int, int]:
        _, c, f, h, w = self.z.shape
        return f, h, w, c

    def channels_last(self) -> np.ndarray:
        """(1+f, h, w, c) float32 array of the first clip."""
        return self.z[0].detach().permute(1, 2, 3, 0).contiguous().float().cpu().numpy()

    @classmethod
    def from_channels_last(cls, array: np.ndarray, device=None) -> 'Latent':
        if array.ndim != 4:
            raise ShapeError(f'latent array must be (1+f, h, w, c), got {array.shape}')
        z = torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32))
        return cls(z.permute(3, 0, 1, 2).unsqueeze(0).contiguous().to(device))

    @property
    def pixel_shape(self) -> Tuple[int, int, int, int, int]:
        b, _, f, h, w = self.z.shape
        return (b, 3, *pixel_grid(f, h, w))


@dataclass
class Chunk:
    """Streaming unit: frames in model layout plus the chunk index."""

    frames: torch.Tensor
    index: int

    @property
    def length(self) -> int:
        return self.frames.shape[2]


@dataclass(frozen=True)
class TimeGrid:
    taus: Tuple[int, ...]

    def __post_init__(self):
        if self.taus[0] != 0 or any(b <= a for a, b in zip(self.taus, self.taus[1:])):
            raise ValueError(f'time grid must start at 0 and increase strictly: {self.taus}')

    @property
    def steps(self) -> int:
        return len(self.taus) - 1

    @property
    def T(self) -> int:
        return self.taus[-1]

    def descending_pairs(self) -> List[Tuple[int, int]]:
        """(tau_n, tau_{n-1}) for n = N .. 1."""
        return [(self.taus[n], self.taus[n - 1]) for n in range(self.steps, 0, -1)]


@dataclass
class ClipScores:
    name: str
    psnr: float
    ssim: float
    lpips: Optional[float]
    decode_seconds: float

    def to_dict(self) -> Dict[str, Any]:
        return {'clip': self.name, 'psnr': self.psnr, 'ssim': self.ssim,
                'lpips': self.lpips, 'decode_seconds': self.decode_seconds}


@dataclass
class EvalReport:
    steps: int
    clips: List[ClipScores] = field(default_factory=list)
    latent_mean: List[float] = field(default_factory=list)
    latent_var: List[float] = field(default_factory=list)
    baseline_psnr: Optional[float] = None

    @staticmethod
    def _mean(values) -> Optional[float]:
        values = [v for v in values if v is not None]
        if not values:
            return None
        return float(sum(values) / len(values))

    @property
    def psnr(self) -> Optional[float]:
        return self._mean(c.psnr for c in self.clips)

    @property
    def ssim(self) -> Optional[float]:
        return self._mean(c.ssim for c in self.clips)

    @property
    def lpips(self) -> Optional[float]:
        return self._mean(c.lpips for c in self.clips)

    @property
    def decode_seconds(self) -> Optional[float]:
        return self._mean(c.decode_seconds for c in self.clips)

    def summary(self) -> Dict[str, Any]:
        return {
            'record': 'aggregate',
            'steps': self.steps,
            'clips': len(self.clips),
            'psnr': self.psnr,
            'ssim': self.ssim,
            'lpips': self.lpips,
            'decode_seconds': self.decode_seconds,
            'baseline_psnr': self.baseline_psnr,
        }

    def to_records(self) -> List[Dict[str, Any]]:
        records = [{'record': 'clip', 'steps': self.steps, **c.to_dict()} for c in self.clips]
        records.append(self.summary())
        if self.latent_mean:
            records.append({'record': 'latent_stats', 'steps': self.steps,
                            'mean': [round(m, 6) for m in self.latent_mean],
                            'var': [round(v, 6) for v in self.latent_var]})
        return records

