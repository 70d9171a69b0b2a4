"""LPIPS perceptual distance over video frames.

Scores every frame independently and averages. The backbone is either the
torchvision-pretrained network or a seeded random initialisation for machines
without the pretrained download; the linear calibration layers always come from
the lpips package or from an explicit weights file.
"""
import logging
import os
import threading
from typing import Dict, Optional, Tuple

import lpips
import torch

from difftok.config import PERCEPTUAL_MIN_SIZE
from difftok.errors import PerceptualWeightsError, ShapeError
from difftok.record_utils import fields

logger = logging.getLogger(__name__)

MIN_FRAME_SIZE = PERCEPTUAL_MIN_SIZE


class PerceptualDistance:
    def __init__(self, net: str = 'alex', backbone: str = 'pretrained', weights: Optional[str] = None,
                 seed: int = 0, device='cpu'):
        if weights is not None and not os.path.isfile(weights):
            raise PerceptualWeightsError(f'perceptual weights file not found: {weights}', path=weights)

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.model = lpips.LPIPS(net=net, pnet_rand=(backbone == 'seeded'), model_path=weights,
                                     verbose=False)
        self.model.eval().requires_grad_(False).to(device)
        self.net = net
        self.backbone = backbone
        logger.info(f'✅ perceptual network ready ({net}, {backbone})',
                    extra=fields(net=net, backbone=backbone, weights=weights, seed=seed))

    def frame_scores(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """(B·T,) distances for two (B, 3, T, H, W) clips in [-1, 1]."""
        if a.shape != b.shape:
            raise ShapeError('perceptual inputs differ in shape', left=tuple(a.shape), right=tuple(b.shape))
        bsz, c, t, h, w = a.shape
        if h < MIN_FRAME_SIZE or w < MIN_FRAME_SIZE:
            raise ShapeError(f'perceptual distance needs frames of at least {MIN_FRAME_SIZE}x{MIN_FRAME_SIZE}',
                             height=h, width=w)

        def frames(x):
            return x.transpose(1, 2).reshape(bsz * t, c, h, w)

        param = next(self.model.parameters())
        if param.dtype != a.dtype or param.device != a.device:
            self.model.to(device=a.device, dtype=a.dtype)
        return self.model(frames(a), frames(b)).flatten()

    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return self.frame_scores(a, b).mean()


_instances: Dict[Tuple, PerceptualDistance] = {}
_lock = threading.Lock()


def perceptual_for(cfg, device='cpu') -> PerceptualDistance:
    """Shared PerceptualDistance per (net, backbone, weights, seed, device)."""
    key = (cfg.perceptual_net, cfg.perceptual_backbone, cfg.perceptual_weights, cfg.perceptual_seed, str(device))
    with _lock:
        if key not in _instances:
            _instances[key] = PerceptualDistance(cfg.perceptual_net, cfg.perceptual_backbone,
                                                 cfg.perceptual_weights, cfg.perceptual_seed, device)
        return _instances[key]
