"""Joint from-scratch training of encoder, adapter and denoiser.

Objective per batch: snr-weighted x0 regression + λ·KL + η·LPIPS, with LPIPS
scored on the single-step x0 prediction. Batches, timesteps and noise all come
from the run seed, so a resumed run repeats the uninterrupted trajectory.
"""
import base64
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
import torch
from torch.optim.lr_scheduler import LambdaLR

from difftok.config import RunConfig, StageConfig, TrainConfig
from difftok.errors import DataError, NumericalError
from difftok.metrics import evaluate
from difftok.models import VideoTensor
from difftok.networks import Tokenizer, build_tokenizer, encode, kl_loss, sample_latent
from difftok.perceptual import PerceptualDistance, perceptual_for
from difftok.record_utils import RecordFormatter, fields
from difftok.sampler import reconstruct
from difftok.schedule import NoiseSchedule, check_timestep, q_sample, schedule_from_config, snr_weight
from difftok.services.checkpoint_service import checkpoint_service
from difftok.services.dataset_service import DatasetManifest, PreprocessSpec, load_clip

logger = logging.getLogger(__name__)

LOSS_TERMS = ('diffusion', 'kl', 'lpips')
EMA_DECAY = 0.98

# (v_t, z, t) -> predicted clean clip, t of shape (B,)
Predictor = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


def _predictor(net) -> Predictor:
    if isinstance(net, Tokenizer):
        def predict(v_t, z, t):
            return net.denoiser(v_t, t, net.adapter(z))
        return predict
    return net


def diffusion_terms(v0: torch.Tensor, z: torch.Tensor, t, eps: torch.Tensor, net, sched: NoiseSchedule,
                    snr_cap: Optional[float] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """(weighted loss, x0 prediction). `net` is a Tokenizer or a (v_t, z, t) predictor."""
    t = check_timestep(t, sched.T)
    if t.dim() == 0:
        t = t.expand(v0.shape[0])
    v_t = q_sample(v0, t, eps, sched)
    x0 = _predictor(net)(v_t, z, t.to(v0.device))

    weight = snr_weight(t, sched)
    if snr_cap is not None:
        weight = weight.clamp(max=snr_cap)
    mse = ((v0 - x0) ** 2).flatten(1).mean(dim=1)
    return (weight.to(device=mse.device, dtype=mse.dtype) * mse).mean(), x0


def diffusion_loss(v0: torch.Tensor, z: torch.Tensor, t, eps: torch.Tensor, net, sched: NoiseSchedule,
                   snr_cap: Optional[float] = None) -> torch.Tensor:
    return diffusion_terms(v0, z, t, eps, net, sched, snr_cap)[0]


def lpips_loss(v0: torch.Tensor, v_hat: torch.Tensor, perceptual: PerceptualDistance) -> torch.Tensor:
    return perceptual(v0, v_hat)


def total_loss(v0: torch.Tensor, net: Tokenizer, t, eps: torch.Tensor, cfg: RunConfig, sched: NoiseSchedule,
               eta: float = 0.0, perceptual: Optional[PerceptualDistance] = None,
               latent_generator: Optional[torch.Generator] = None) -> Tuple[torch.Tensor, Dict[str, float]]:
    post = encode(v0, net)
    z = sample_latent(post, generator=latent_generator).z
    diffusion, x0 = diffusion_terms(v0, z, t, eps, net, sched, cfg.train.snr_weight_cap)
    kl = kl_loss(post)

    if eta > 0:
        perceptual = perceptual or perceptual_for(cfg.model, net.device)
        lp = lpips_loss(v0, x0, perceptual)
    else:
        lp = torch.zeros((), device=v0.device, dtype=v0.dtype)

    terms = {'diffusion': diffusion, 'kl': kl, 'lpips': lp}
    for name, value in terms.items():
        if not torch.isfinite(value).all():
            raise NumericalError(f'non-finite {name} loss', term=name, value=float(value))

    loss = diffusion + cfg.model.lambda_kl * kl + eta * lp
    breakdown = {name: float(value.detach()) for name, value in terms.items()}
    breakdown.update(total=float(loss.detach()), eta=eta, lambda_kl=cfg.model.lambda_kl)
    return loss, breakdown


def cosine_decay(train: TrainConfig) -> Callable[[int], float]:
    def multiplier(step: int) -> float:
        progress = min(step, train.total_steps) / train.total_steps
        return train.min_lr_ratio + (1.0 - train.min_lr_ratio) * 0.5 * (1.0 + math.cos(math.pi * progress))

    return multiplier


@dataclass
class TrainState:
    net: Tokenizer
    optimizer: torch.optim.Optimizer
    scheduler: LambdaLR
    generator: torch.Generator
    step: int = 0
    loss_ema: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: RunConfig, device='cpu') -> 'TrainState':
        net = build_tokenizer(cfg.model, seed=cfg.train.seed).to(device)
        optimizer = torch.optim.Adam(net.parameters(), lr=cfg.train.learning_rate)
        scheduler = LambdaLR(optimizer, cosine_decay(cfg.train))
        generator = torch.Generator().manual_seed(cfg.train.seed)
        return cls(net, optimizer, scheduler, generator)

    @classmethod
    def restore(cls, path: str, cfg: RunConfig, device='cpu') -> 'TrainState':
        state = cls.create(cfg, device)
        checkpoint_service.load_into(path, state, cfg)
        logger.info(f'✅ resumed from {path} at step {state.step}', extra=fields(path=path, step=state.step))
        return state

    def rng_state(self) -> str:
        return base64.b64encode(self.generator.get_state().numpy().tobytes()).decode('ascii')

    def set_rng_state(self, encoded: str) -> None:
        raw = bytearray(base64.b64decode(encoded))
        self.generator.set_state(torch.frombuffer(raw, dtype=torch.uint8).clone())

    def update_ema(self, breakdown: Dict[str, float]) -> None:
        for name in LOSS_TERMS:
            prev = self.loss_ema.get(name)
            value = breakdown[name]
            self.loss_ema[name] = value if prev is None else EMA_DECAY * prev + (1 - EMA_DECAY) * value


class ClipDataset:
    """Seed-ordered batches from one split of a manifest."""

    def __init__(self, manifest: DatasetManifest, split: str = 'train'):
        self.manifest = manifest
        self.split = split
        self.entries = manifest.split(split)
        if not self.entries:
            raise DataError(f'dataset split {split!r} is empty', root=manifest.root, split=split)

    def __len__(self) -> int:
        return len(self.entries)

    def batch(self, step: int, seed: int, stage: StageConfig, train: TrainConfig) -> Tuple[torch.Tensor, Dict]:
        """(B, 3, T, H, W) batch; an image batch (T = 1) with probability image_ratio."""
        rng = np.random.default_rng([seed, step])
        is_image = bool(rng.random() < train.image_ratio)
        frames = 1 if is_image else stage.frames
        low, high = train.frame_stride_range
        stride = int(rng.integers(low, high + 1))
        picks = rng.choice(len(self.entries), size=train.batch_size, replace=len(self.entries) < train.batch_size)

        clips = []
        for index in picks:
            entry = self.entries[int(index)]
            clip_stride = stride
            while clip_stride > 1 and (frames - 1) * clip_stride + 1 > entry.frames:
                clip_stride -= 1
            span = (frames - 1) * clip_stride + 1
            start = int(rng.integers(0, max(entry.frames - span, 0) + 1))
            spec = PreprocessSpec(frames=frames, crop=stage.resolution, resize=stage.resolution,
                                  stride=clip_stride, start=start)
            clips.append(load_clip(entry, spec, self.manifest.root).to_model()[0])
        return torch.stack(clips), {'frames': frames, 'stride': stride, 'image': is_image}

    def clips(self, limit: int, spec: PreprocessSpec) -> List[Tuple[str, VideoTensor]]:
        return [(e.name, load_clip(e, spec, self.manifest.root)) for e in self.entries[:limit]]


def train_step(state: TrainState, batch: torch.Tensor, cfg: RunConfig, sched: NoiseSchedule,
               perceptual: Optional[PerceptualDistance] = None) -> Dict[str, float]:
    net = state.net
    net.train()
    eta = cfg.train.eta_at(state.step, cfg.model)

    v0 = batch.to(device=net.device, dtype=net.dtype)
    t = torch.randint(1, sched.T + 1, (v0.shape[0],), generator=state.generator)
    eps = torch.randn(v0.shape, generator=state.generator, dtype=torch.float32).to(v0)

    loss, breakdown = total_loss(v0, net, t, eps, cfg, sched, eta=eta, perceptual=perceptual,
                                 latent_generator=state.generator)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.scheduler.step()

    state.step += 1
    state.update_ema(breakdown)
    breakdown.update(step=state.step, lr=state.scheduler.get_last_lr()[0])
    return breakdown


def _append_record(path: str, record: Dict) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'a') as fh:
        fh.write(RecordFormatter.format_record(record) + '\n')


def _run_eval(state: TrainState, cfg: RunConfig, sched: NoiseSchedule, val: ClipDataset,
              perceptual: Optional[PerceptualDistance]) -> Dict:
    stage = cfg.train.stage_at(state.step)
    spec = PreprocessSpec(frames=stage.frames, crop=stage.resolution, resize=stage.resolution)
    steps = cfg.schedule.sampling_steps
    state.net.eval()

    def reconstructor(clip: VideoTensor) -> VideoTensor:
        return reconstruct(clip, steps, cfg.train.seed, state.net, sched)

    report = evaluate(val.clips(cfg.train.eval_clips, spec), reconstructor, steps, perceptual=perceptual)
    return {'step': state.step, **report.summary()}


def train_loop(cfg: RunConfig, dataset: ClipDataset, state: Optional[TrainState] = None,
               run_dir: Optional[str] = None, val_dataset: Optional[ClipDataset] = None,
               device='cpu') -> Iterator[str]:
    """Train to cfg.train.total_steps, yielding each checkpoint directory as it is written."""
    run_dir = run_dir or cfg.train.run_dir
    state = state or TrainState.create(cfg, device)
    sched = schedule_from_config(cfg.model, cfg.schedule)
    train = cfg.train

    perceptual = None
    if cfg.model.lpips_enabled and cfg.model.eta_lpips > 0 and any(s.use_lpips for s in train.stages):
        perceptual = perceptual_for(cfg.model, state.net.device)
    eval_perceptual = perceptual
    if eval_perceptual is None and cfg.model.lpips_enabled and min(s.resolution for s in train.stages) >= 32:
        eval_perceptual = perceptual_for(cfg.model, state.net.device)

    metrics_log = os.path.join(run_dir, 'metrics.log')
    logger.info(f'✅ training from step {state.step} to {train.total_steps}',
                extra=fields(run_dir=run_dir, clips=len(dataset), stage=train.stage_at(state.step).name,
                             eta=train.eta_at(state.step, cfg.model), **state.net.parameter_report()))

    while state.step < train.total_steps:
        step = state.step
        stage = train.stage_at(step)
        if step > 0 and step == stage.start_step:
            # records number updates from 1, so the first update of the stage is step + 1
            transition = {'record': 'stage', 'step': step + 1, 'stage': stage.name,
                          'eta': train.eta_at(step, cfg.model), 'resolution': stage.resolution,
                          'frames': stage.frames}
            logger.info(f'stage {stage.name} begins', extra=fields(**transition))
            _append_record(metrics_log, transition)

        batch, info = dataset.batch(step, train.seed, stage, train)
        breakdown = train_step(state, batch, cfg, sched, perceptual)

        if state.step % train.log_every == 0 or state.step == 1:
            logger.info('train step', extra=fields(**breakdown, stage=stage.name, frames=info['frames'],
                                                   stride=info['stride'],
                                                   ema_diffusion=state.loss_ema['diffusion']))
            _append_record(metrics_log, {'record': 'train', **breakdown})

        if val_dataset is not None and state.step % train.eval_every == 0:
            record = _run_eval(state, cfg, sched, val_dataset, eval_perceptual)
            logger.info('eval', extra=fields(**record))
            _append_record(metrics_log, record)

        if state.step % train.checkpoint_every == 0 or state.step == train.total_steps:
            path = checkpoint_service.save(os.path.join(run_dir, f'step_{state.step:07d}'), state, cfg)
            yield path
