import math

import pytest
import torch

from difftok.config import ModelConfig, RunConfig
from difftok.errors import ScheduleError, ShapeError
from difftok.models import LatentPosterior, VideoTensor, latent_grid
from difftok.networks import (build_tokenizer, condition_adapter, denoise, encode, kl_loss,
                              sample_latent)
from difftok.schedule import cosine_schedule
from difftok.training import total_loss


class TestEncoderShapes:
    @pytest.mark.parametrize('frames,height,width', [
        (1, 8, 8), (5, 16, 16), (9, 16, 24), (9, 24, 8), (13, 8, 16), (17, 16, 16),
    ])
    def test_latent_grid(self, tiny_net, tiny_cfg, make_clip, frames, height, width):
        post = encode(make_clip(frames, height, width), tiny_net)
        assert post.grid_shape == (1 + (frames - 1) // 4, height // 8, width // 8, tiny_cfg.latent_dim)
        assert post.grid_shape[:3] == latent_grid(frames, height, width)
        assert post.mean.shape == post.logvar.shape

    def test_toy_clip(self):
        net = build_tokenizer(ModelConfig.toy(), seed=0).eval()
        clip = VideoTensor(torch.zeros(17, 64, 64, 3))
        with torch.no_grad():
            post = encode(clip, net)
        assert post.grid_shape == (5, 8, 8, 16)

    def test_single_image(self, tiny_net, tiny_cfg):
        post = encode(VideoTensor(torch.zeros(1, 8, 8, 3)), tiny_net)
        assert post.grid_shape == (1, 1, 1, tiny_cfg.latent_dim)

    @pytest.mark.parametrize('frames,height,width', [(4, 16, 16), (9, 12, 16), (9, 16, 20)])
    def test_rejects_bad_dims(self, tiny_net, make_clip, frames, height, width):
        with pytest.raises(ShapeError):
            encode(make_clip(frames, height, width), tiny_net)


class TestCausality:
    # latent frame k covers pixel frames up to 4k
    @pytest.mark.parametrize('trial', range(20))
    @pytest.mark.parametrize('k', [0, 1, 2])
    def test_encoder_ignores_future_frames(self, tiny_net, make_clip, trial, k):
        clip = make_clip(13, seed=trial)
        changed = clip.clone()
        changed[:, :, 4 * k + 1:] = make_clip(12 - 4 * k, seed=1000 + trial)
        with torch.no_grad():
            a = encode(clip, tiny_net)
            b = encode(changed, tiny_net)
        assert torch.equal(a.mean[:, :, :k + 1], b.mean[:, :, :k + 1])
        assert torch.equal(a.logvar[:, :, :k + 1], b.logvar[:, :, :k + 1])
        assert not torch.equal(a.mean[:, :, k + 1:], b.mean[:, :, k + 1:])

    @pytest.mark.parametrize('trial', range(20))
    @pytest.mark.parametrize('k', [0, 1, 2])
    def test_denoiser_ignores_future_chunks(self, tiny_net, tiny_cfg, make_clip, trial, k):
        gen = torch.Generator().manual_seed(trial)
        v_t = make_clip(13, seed=trial)
        z = torch.randn(1, tiny_cfg.latent_dim, 4, 2, 2, generator=gen)
        t = int(torch.randint(1, tiny_cfg.timesteps + 1, (1,), generator=gen))
        v_changed, z_changed = v_t.clone(), z.clone()
        v_changed[:, :, 4 * k + 1:] = make_clip(12 - 4 * k, seed=1000 + trial)
        z_changed[:, :, k + 1:] = torch.randn(1, tiny_cfg.latent_dim, 3 - k, 2, 2, generator=gen)
        with torch.no_grad():
            a = denoise(v_t, z, t, tiny_net)
            b = denoise(v_changed, z_changed, t, tiny_net)
        assert torch.equal(a[:, :, :4 * k + 1], b[:, :, :4 * k + 1])
        assert not torch.equal(a[:, :, 4 * k + 1:], b[:, :, 4 * k + 1:])


class TestConditionAdapter:
    def test_maps_match_stage_inputs(self, tiny_net, tiny_cfg):
        z = torch.randn(1, tiny_cfg.latent_dim, 3, 2, 2)
        maps = condition_adapter(z, tiny_net)
        c0, (ch0, ch1, ch2, _) = tiny_cfg.base_channels, tiny_cfg.stage_channels
        assert [tuple(m.shape) for m in maps] == [
            (1, c0, 9, 16, 16),
            (1, ch0, 9, 8, 8),
            (1, ch1, 5, 4, 4),
            (1, ch2, 3, 2, 2),
        ]

    def test_injection_count(self, tiny_cfg):
        net = build_tokenizer(ModelConfig.tiny(injection_count=1), seed=0)
        maps = condition_adapter(torch.zeros(1, tiny_cfg.latent_dim, 1, 1, 1), net)
        assert len(maps) == 1
        assert maps[0].shape == (1, tiny_cfg.base_channels, 1, 8, 8)

    def test_output_depends_on_latent(self, tiny_net, tiny_cfg, make_clip):
        v_t = make_clip(5)
        zeros = torch.zeros(1, tiny_cfg.latent_dim, 2, 2, 2)
        with torch.no_grad():
            a = denoise(v_t, zeros, 100, tiny_net)
            b = denoise(v_t, torch.ones_like(zeros), 100, tiny_net)
        assert not torch.allclose(a, b)


class TestDenoise:
    def test_shape(self, tiny_net, tiny_cfg, make_clip):
        v_t = make_clip(9, 16, 24, batch=2)
        z = torch.zeros(2, tiny_cfg.latent_dim, 3, 2, 3)
        with torch.no_grad():
            out = denoise(v_t, z, torch.tensor([1, tiny_cfg.timesteps]), tiny_net)
        assert out.shape == v_t.shape

    @pytest.mark.parametrize('t', [0, 1001])
    def test_timestep_range(self, tiny_net, tiny_cfg, make_clip, t):
        with pytest.raises(ScheduleError):
            denoise(make_clip(5), torch.zeros(1, tiny_cfg.latent_dim, 2, 2, 2), t, tiny_net)

    def test_latent_grid_mismatch(self, tiny_net, tiny_cfg, make_clip):
        with pytest.raises(ShapeError):
            denoise(make_clip(5), torch.zeros(1, tiny_cfg.latent_dim, 3, 2, 2), 10, tiny_net)


class TestLatentSampling:
    def test_tiny_variance_returns_mean(self):
        mean = torch.randn(1, 4, 2, 2, 2)
        post = LatentPosterior(mean, torch.full_like(mean, -30.0))
        z = sample_latent(post, seed=0).z
        assert torch.allclose(z, mean, atol=1e-5)

    def test_seeded(self):
        post = LatentPosterior(torch.zeros(1, 4, 2, 2, 2), torch.zeros(1, 4, 2, 2, 2))
        assert torch.equal(sample_latent(post, seed=5).z, sample_latent(post, seed=5).z)
        assert not torch.equal(sample_latent(post, seed=5).z, sample_latent(post, seed=6).z)

    def test_deterministic_is_mean(self):
        post = LatentPosterior(torch.randn(1, 4, 1, 1, 1), torch.zeros(1, 4, 1, 1, 1))
        assert torch.equal(sample_latent(post, deterministic=True).z, post.mean)

    def test_monte_carlo_moments(self):
        n = 10_000
        mu, logvar = 0.7, -0.5
        post = LatentPosterior(torch.full((n, 1, 1, 1, 1), mu, dtype=torch.float64),
                               torch.full((n, 1, 1, 1, 1), logvar, dtype=torch.float64))
        z = sample_latent(post, seed=0).z.flatten()
        sigma = math.exp(0.5 * logvar)
        assert abs(z.mean().item() - mu) < 4 * sigma / n ** 0.5
        assert abs(z.std(unbiased=False).item() - sigma) < 4 * sigma / (2 * n) ** 0.5


class TestKL:
    def test_standard_normal_is_zero(self):
        post = LatentPosterior(torch.zeros(1, 4, 2, 2, 2), torch.zeros(1, 4, 2, 2, 2))
        assert kl_loss(post).item() == 0.0

    def test_unit_mean(self):
        post = LatentPosterior(torch.ones(1, 4, 2, 2, 2), torch.zeros(1, 4, 2, 2, 2))
        assert kl_loss(post).item() == pytest.approx(0.5)

    def test_matches_scalar_loop(self):
        gen = torch.Generator().manual_seed(0)
        mean = torch.randn(2, 3, 2, 1, 2, generator=gen, dtype=torch.float64)
        logvar = torch.randn(2, 3, 2, 1, 2, generator=gen, dtype=torch.float64)
        expected = 0.0
        for m, lv in zip(mean.flatten().tolist(), logvar.flatten().tolist()):
            expected += 0.5 * (m * m + math.exp(lv) - 1.0 - lv)
        expected /= mean.numel()
        assert kl_loss(LatentPosterior(mean, logvar)).item() == pytest.approx(expected, rel=1e-7)


def test_parameter_report_favours_decoder():
    report = build_tokenizer(ModelConfig.toy(), seed=0).parameter_report()
    assert report['total_params'] == report['encoder_params'] + report['decoder_params']
    assert report['encoder_params'] < report['decoder_params']


def test_build_is_seeded(tiny_cfg):
    a = build_tokenizer(tiny_cfg, seed=3).state_dict()
    b = build_tokenizer(tiny_cfg, seed=3).state_dict()
    c = build_tokenizer(tiny_cfg, seed=4).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_gradients_match_finite_differences(tiny_cfg, make_clip):
    """Backprop through encoder, sampler, adapter and denoiser against central differences."""
    cfg = RunConfig(model=ModelConfig.tiny(lambda_kl=0.5))
    net = build_tokenizer(cfg.model, seed=0).double()
    sched = cosine_schedule(cfg.model.timesteps)
    v0 = make_clip(5, 16, 16, dtype=torch.float64)
    eps = torch.randn(v0.shape, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    t = torch.tensor([cfg.model.timesteps // 2])

    def loss():
        value, _ = total_loss(v0, net, t, eps, cfg, sched, latent_generator=torch.Generator().manual_seed(2))
        return value

    net.zero_grad()
    loss().backward()

    params = [p for p in net.parameters()]
    gen = torch.Generator().manual_seed(9)
    h = 1e-4
    for _ in range(32):
        p = params[int(torch.randint(len(params), (1,), generator=gen))]
        index = int(torch.randint(p.numel(), (1,), generator=gen))
        flat = p.data.view(-1)
        original = flat[index].item()
        with torch.no_grad():
            flat[index] = original + h
            up = loss().item()
            flat[index] = original - h
            down = loss().item()
            flat[index] = original
        fd = (up - down) / (2 * h)
        bp = p.grad.view(-1)[index].item()
        assert abs(fd - bp) <= 1e-3 * abs(bp) + 1e-6, (fd, bp)
