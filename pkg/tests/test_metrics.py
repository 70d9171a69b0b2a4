import math

import numpy as np
import pytest
import torch

from difftok.errors import MetricError, ShapeError
from difftok.metrics import baseline_psnr, evaluate, latent_stats, lpips_metric, psnr, ssim
from difftok.models import VideoTensor
from difftok.networks import build_tokenizer, encode
from difftok.perceptual import PerceptualDistance


def unit_clip(frames=3, size=16, seed=0, low=0.0, high=1.0):
    rng = np.random.default_rng(seed)
    return rng.uniform(low, high, size=(frames, size, size, 3))


def windowed_ssim(x, y, sigma=1.5, radius=5):
    """Scalar-loop Gaussian SSIM over interior pixels of one (H, W, 3) frame."""
    k = np.arange(-radius, radius + 1)
    g = np.exp(-k ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    w = np.outer(g, g)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    h, width = x.shape[:2]
    scores = []
    for c in range(3):
        values = []
        for i in range(radius, h - radius):
            for j in range(radius, width - radius):
                px = x[i - radius:i + radius + 1, j - radius:j + radius + 1, c]
                py = y[i - radius:i + radius + 1, j - radius:j + radius + 1, c]
                mx, my = (w * px).sum(), (w * py).sum()
                vx = (w * px * px).sum() - mx * mx
                vy = (w * py * py).sum() - my * my
                cxy = (w * px * py).sum() - mx * my
                values.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
        scores.append(np.mean(values))
    return float(np.mean(scores))


class TestPSNR:
    def test_identical_is_capped(self):
        clip = unit_clip()
        assert psnr(clip, clip) == 100.0

    def test_uniform_offset(self):
        clip = unit_clip(low=0.0, high=0.9)
        assert psnr(clip, clip + 0.1) == pytest.approx(20.0, abs=1e-9)

    def test_scalar_oracle(self):
        a, b = unit_clip(seed=1), unit_clip(seed=2)
        mse = sum((x - y) ** 2 for x, y in zip(a.ravel().tolist(), b.ravel().tolist())) / a.size
        assert psnr(a, b) == pytest.approx(10 * math.log10(1 / mse), abs=1e-9)

    def test_video_tensor_range(self):
        clip = VideoTensor(torch.zeros(1, 8, 8, 3))
        other = VideoTensor(torch.full((1, 8, 8, 3), 0.2))
        # 0.2 in [-1, 1] is 0.1 in [0, 1]
        assert psnr(clip, other) == pytest.approx(20.0, abs=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(unit_clip(frames=1), unit_clip(frames=5))


class TestSSIM:
    def test_identical(self):
        clip = unit_clip()
        assert ssim(clip, clip) == pytest.approx(1.0, abs=1e-12)

    def test_constant_frames(self):
        x = np.full((1, 16, 16, 3), 0.4)
        y = np.full((1, 16, 16, 3), 0.6)
        c1 = 0.01 ** 2
        expected = (2 * 0.4 * 0.6 + c1) / (0.4 ** 2 + 0.6 ** 2 + c1)
        assert ssim(x, y) == pytest.approx(expected, abs=1e-9)

    def test_matches_windowed_reference(self):
        x, y = unit_clip(frames=1, seed=3), unit_clip(frames=1, seed=4)
        assert ssim(x, y) == pytest.approx(windowed_ssim(x[0], y[0]), abs=1e-6)

    def test_mean_over_frames(self):
        x, y = unit_clip(frames=2, seed=5), unit_clip(frames=2, seed=6)
        assert ssim(x, y) == pytest.approx((ssim(x[:1], y[:1]) + ssim(x[1:], y[1:])) / 2, abs=1e-12)

    def test_small_frames(self):
        with pytest.raises(MetricError):
            ssim(unit_clip(size=8), unit_clip(size=8))


def test_metrics_are_symmetric():
    a, b = unit_clip(seed=7), unit_clip(seed=8)
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_metrics_degrade_with_noise():
    base = unit_clip(seed=9, low=0.2, high=0.8)
    noise = np.random.default_rng(10).uniform(-1.0, 1.0, size=base.shape)
    psnrs, ssims = [], []
    for amplitude in (0.02, 0.06, 0.15):
        noisy = base + amplitude * noise
        psnrs.append(psnr(base, noisy))
        ssims.append(ssim(base, noisy))
    assert psnrs[0] > psnrs[1] > psnrs[2]
    assert ssims[0] > ssims[1] > ssims[2]


class TestLPIPSMetric:
    @pytest.fixture(scope='class')
    def perceptual(self):
        return PerceptualDistance(backbone='seeded', seed=0)

    def test_identical_is_zero(self, perceptual):
        clip = unit_clip(frames=1, size=32)
        assert lpips_metric(clip, clip, perceptual) == pytest.approx(0.0, abs=1e-7)

    def test_worse_reconstruction_scores_higher(self, perceptual):
        clip = unit_clip(frames=1, size=32, seed=1, low=0.2, high=0.8)
        noise = np.random.default_rng(2).uniform(-1.0, 1.0, size=clip.shape)
        assert lpips_metric(clip, clip + 0.01 * noise, perceptual) < lpips_metric(clip, clip + 0.2 * noise, perceptual)

    def test_small_frames(self, perceptual):
        with pytest.raises(ShapeError):
            lpips_metric(unit_clip(frames=1, size=16), unit_clip(frames=1, size=16), perceptual)


class TestLatentStats:
    def test_matches_two_pass(self):
        gen = torch.Generator().manual_seed(0)
        batches = [torch.randn(1, 4, f, 2, 3, generator=gen) * 3 + 1 for f in (1, 2, 5)]
        mean, var = latent_stats(batches)
        flat = np.concatenate([b.double().movedim(1, -1).reshape(-1, 4).numpy() for b in batches])
        assert np.allclose(mean, flat.mean(axis=0), atol=1e-6)
        assert np.allclose(var, flat.var(axis=0), atol=1e-6)

    def test_identical_latents_have_zero_variance(self):
        z = torch.arange(4, dtype=torch.float32).reshape(1, 4, 1, 1, 1).expand(1, 4, 2, 2, 2)
        mean, var = latent_stats([z, z, z])
        assert np.allclose(mean, [0, 1, 2, 3])
        assert np.allclose(var, 0.0, atol=1e-12)

    def test_zero_output_layer_gives_zero_mean(self, tiny_cfg, make_clip):
        net = build_tokenizer(tiny_cfg, seed=0)
        with torch.no_grad():
            net.encoder.conv_out.conv.weight.zero_()
            net.encoder.conv_out.conv.bias.zero_()
            means = [encode(make_clip(5, seed=s), net).mean for s in range(3)]
        mean, var = latent_stats(means)
        assert np.all(mean == 0.0) and np.all(var == 0.0)

    def test_empty(self):
        with pytest.raises(MetricError):
            latent_stats([])


def test_baseline_of_static_dataset_is_capped():
    clip = np.repeat(unit_clip(frames=1), 5, axis=0)
    assert baseline_psnr([clip, clip]) == 100.0


def test_baseline_matches_mean_frame():
    a, b = unit_clip(frames=1, seed=1), unit_clip(frames=1, seed=2)
    mean_frame = (a + b) / 2
    assert baseline_psnr([a, b]) == pytest.approx((psnr(a, mean_frame) + psnr(b, mean_frame)) / 2, abs=1e-9)


class TestEvaluate:
    def test_identity_reconstructor(self):
        clips = [(f'clip_{i}', VideoTensor.from_uint8(np.uint8(40 * i + 20) * np.ones((5, 16, 16, 3), np.uint8)))
                 for i in range(3)]
        report = evaluate(clips, lambda clip: clip, steps=1, workers=2)
        assert [c.name for c in report.clips] == ['clip_0', 'clip_1', 'clip_2']
        assert report.psnr == 100.0
        assert report.ssim == pytest.approx(1.0)
        assert report.lpips is None
        assert report.decode_seconds >= 0
        records = report.to_records()
        assert [r['record'] for r in records] == ['clip', 'clip', 'clip', 'aggregate']
        assert records[-1]['steps'] == 1

    def test_empty(self):
        with pytest.raises(MetricError):
            evaluate([], lambda clip: clip, steps=1)
