"""Reconstruction metrics on [0, 1] pixels.

Arrays passed as numpy are taken to be (T, H, W, 3) in [0, 1]; VideoTensors and
model-layout tensors are in [-1, 1] and rescaled first.
"""
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from skimage.metrics import structural_similarity

from difftok.errors import MetricError, ShapeError
from difftok.models import ClipScores, EvalReport, VideoTensor
from difftok.perceptual import PerceptualDistance
from difftok.record_utils import fields

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

ClipLike = Union[VideoTensor, torch.Tensor, np.ndarray]


def to_unit(v: ClipLike) -> np.ndarray:
    """(T, H, W, 3) float64 in [0, 1]."""
    if isinstance(v, np.ndarray):
        return v.astype(np.float64)
    if isinstance(v, torch.Tensor):
        v = VideoTensor.from_model(v)
    return v.to_unit_range()


def _pair(a: ClipLike, b: ClipLike) -> Tuple[np.ndarray, np.ndarray]:
    x, y = to_unit(a), to_unit(b)
    if x.shape != y.shape:
        raise ShapeError('metric inputs differ in shape', left=x.shape, right=y.shape)
    return x, y


def psnr(a: ClipLike, b: ClipLike) -> float:
    x, y = _pair(a, b)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(a: ClipLike, b: ClipLike) -> float:
    """Mean over frames of Gaussian-window SSIM (11x11, sigma 1.5, K1 0.01, K2 0.03)."""
    x, y = _pair(a, b)
    if x.shape[1] < SSIM_WINDOW or x.shape[2] < SSIM_WINDOW:
        raise MetricError(f'SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}',
                          height=x.shape[1], width=x.shape[2])
    scores = [structural_similarity(fx, fy, gaussian_weights=True, sigma=SSIM_SIGMA,
                                    use_sample_covariance=False, data_range=1.0, channel_axis=-1)
              for fx, fy in zip(x, y)]
    return float(np.mean(scores))


def _model_layout(v: ClipLike) -> torch.Tensor:
    if isinstance(v, np.ndarray):
        v = VideoTensor(torch.from_numpy(v * 2.0 - 1.0).float())
    if isinstance(v, VideoTensor):
        return v.to_model()
    return v


def lpips_metric(a: ClipLike, b: ClipLike, perceptual: PerceptualDistance) -> float:
    with torch.no_grad():
        return float(perceptual(_model_layout(a).float(), _model_layout(b).float()))


def _merge(count: int, mean: np.ndarray, m2: np.ndarray, batch: np.ndarray):
    """Chan's parallel update of (count, mean, sum of squared deviations)."""
    n_b = batch.shape[0]
    mean_b = batch.mean(axis=0)
    m2_b = ((batch - mean_b) ** 2).sum(axis=0)
    total = count + n_b
    delta = mean_b - mean
    mean = mean + delta * n_b / total
    m2 = m2 + m2_b + delta ** 2 * count * n_b / total
    return total, mean, m2


def latent_stats(latents: Iterable[torch.Tensor]) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population variance over (B, c, f, h, w) posterior means, one pass."""
    count, mean, m2 = 0, None, None
    for z in latents:
        batch = z.detach().double().cpu().movedim(1, -1).reshape(-1, z.shape[1]).numpy()
        if mean is None:
            mean, m2 = np.zeros(batch.shape[1]), np.zeros(batch.shape[1])
        count, mean, m2 = _merge(count, mean, m2, batch)
    if not count:
        raise MetricError('latent statistics need at least one clip')
    return mean, m2 / count


def baseline_psnr(clips: Sequence[ClipLike]) -> float:
    """Mean PSNR of predicting every frame with the dataset's mean frame."""
    arrays = [to_unit(c) for c in clips]
    if not arrays:
        raise MetricError('baseline needs at least one clip')
    frame_shapes = {a.shape[1:] for a in arrays}
    if len(frame_shapes) != 1:
        raise ShapeError('baseline clips differ in frame size', shapes=sorted(frame_shapes))
    mean_frame = np.concatenate(arrays).mean(axis=0)
    return float(np.mean([psnr(a, np.broadcast_to(mean_frame, a.shape)) for a in arrays]))


def eval_workers() -> int:
    return max(1, int(os.getenv('DIFFTOK_EVAL_WORKERS', '4')))


def evaluate(clips: Sequence[Tuple[str, VideoTensor]], reconstructor: Callable[[VideoTensor], VideoTensor],
             steps: int, perceptual: Optional[PerceptualDistance] = None,
             workers: Optional[int] = None) -> EvalReport:
    """Reconstruct clips one at a time (timed), then score them in a thread pool."""
    if not clips:
        raise MetricError('evaluation needs at least one clip')

    pairs: List[Tuple[str, VideoTensor, VideoTensor, float]] = []
    for name, clip in clips:
        started = time.perf_counter()
        recon = reconstructor(clip)
        pairs.append((name, clip, recon, time.perf_counter() - started))

    def score(item) -> ClipScores:
        name, clip, recon, seconds = item
        lp = lpips_metric(clip, recon, perceptual) if perceptual is not None else None
        return ClipScores(name, psnr(clip, recon), ssim(clip, recon), lp, seconds)

    with ThreadPoolExecutor(max_workers=workers or eval_workers()) as pool:
        scores = list(pool.map(score, pairs))

    report = EvalReport(steps=steps, clips=scores, baseline_psnr=baseline_psnr([c for _, c in clips]))
    logger.info(f'✅ evaluated {len(scores)} clips', extra=fields(**report.summary()))
    return report
