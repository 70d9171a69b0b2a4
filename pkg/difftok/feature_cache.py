import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import torch

from difftok.errors import CacheMismatchError

logger = logging.getLogger(__name__)


@dataclass
class CacheState:
    """Trailing feature frames per causal layer for one stream.

    A layer with no entry has not seen the initial chunk yet; the initial chunk is
    zero-padded. Owned by exactly one stream and mutated sequentially.
    """

    entries: Dict[str, torch.Tensor] = field(default_factory=dict)
    depths: Dict[str, int] = field(default_factory=dict)
    chunks_seen: int = 0
    peak_elements: int = 0

    @property
    def manifest(self) -> List[str]:
        """Layer ids in the order they were first visited."""
        return list(self.depths)

    def has(self, layer_id: str) -> bool:
        return layer_id in self.depths

    def take(self, layer_id: str, like: torch.Tensor, depth: int) -> torch.Tensor:
        """Stored frames for `layer_id`, or zeros when the layer is fresh."""
        stored = self.entries.get(layer_id)
        b, c, _, h, w = like.shape
        if stored is None:
            return like.new_zeros(b, c, depth, h, w)
        if stored.shape[2] != depth or (stored.shape[0], stored.shape[1], *stored.shape[3:]) != (b, c, h, w):
            raise CacheMismatchError(f'cache entry for {layer_id} does not match incoming features',
                                     layer=layer_id, cached=tuple(stored.shape), incoming=tuple(like.shape))
        return stored

    def put(self, layer_id: str, frames: torch.Tensor) -> None:
        depth = frames.shape[2]
        known = self.depths.setdefault(layer_id, depth)
        if known != depth:
            raise CacheMismatchError(f'cache depth for {layer_id} changed from {known} to {depth}', layer=layer_id)
        self.entries[layer_id] = frames.detach() if not torch.is_grad_enabled() else frames

    def mark(self, layer_id: str) -> None:
        """Register a stateless layer that only needs to know the initial chunk passed."""
        self.depths.setdefault(layer_id, 0)

    def observe(self, activation: torch.Tensor) -> None:
        self.peak_elements = max(self.peak_elements, activation.numel())

    def cached_frames(self) -> Dict[str, int]:
        return {layer_id: self.entries[layer_id].shape[2] if layer_id in self.entries else 0
                for layer_id in self.depths}

    def reset(self) -> None:
        self.entries.clear()
        self.depths.clear()
        self.chunks_seen = 0
        self.peak_elements = 0
