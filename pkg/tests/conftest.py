import pytest
import torch

from difftok.config import ModelConfig
from difftok.networks import build_tokenizer
from difftok.schedule import cosine_schedule
from difftok.services.dataset_service import make_synthetic_dataset


@pytest.fixture
def tiny_cfg():
    return ModelConfig.tiny()


@pytest.fixture
def tiny_net(tiny_cfg):
    net = build_tokenizer(tiny_cfg, seed=0)
    net.eval()
    return net


@pytest.fixture
def tiny_sched(tiny_cfg):
    return cosine_schedule(tiny_cfg.timesteps)


@pytest.fixture
def make_clip():
    """Random (B, 3, T, H, W) clip in [-1, 1]."""
    def make(frames=9, height=16, width=16, seed=0, batch=1, dtype=torch.float32):
        generator = torch.Generator().manual_seed(seed)
        return (torch.rand(batch, 3, frames, height, width, generator=generator) * 2 - 1).to(dtype)

    return make


@pytest.fixture
def synthetic_manifest(tmp_path):
    return make_synthetic_dataset(str(tmp_path / 'data'), seed=0, n_clips=8, resolution=16, frames=9,
                                  val_fraction=0.25)
