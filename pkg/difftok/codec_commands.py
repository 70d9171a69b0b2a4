"""encode, decode and reconstruct commands."""
import logging
import os
import time
from typing import Optional

import click
import torch
from PIL import Image

from difftok.config import device_from_env
from difftok.decorators import handles_errors
from difftok.models import Latent, VideoTensor
from difftok.networks import encode
from difftok.record_utils import RecordFormatter, fields
from difftok.sampler import decode, network_denoiser, reconstruct
from difftok.schedule import schedule_from_config
from difftok.services.checkpoint_service import checkpoint_service
from difftok.services.dataset_service import ClipEntry, PreprocessSpec, load_clip
from difftok.services.tensor_store import tensor_store
from difftok.streaming import stream_encode

logger = logging.getLogger(__name__)


def read_clip(path: str, resize: Optional[int] = None) -> VideoTensor:
    """A frame directory, or a .cdt container holding (T, H, W, 3) in [-1, 1]."""
    if os.path.isdir(path):
        entry = ClipEntry(path, frames=0, height=0, width=0)
        return load_clip(entry, PreprocessSpec(resize=resize))
    return VideoTensor(tensor_store.read_tensor(path))


def write_clip(path: str, clip: VideoTensor, frames_dir: Optional[str] = None) -> None:
    tensor_store.write(path, clip.data.contiguous())
    if frames_dir:
        os.makedirs(frames_dir, exist_ok=True)
        for k, frame in enumerate(clip.to_uint8()):
            Image.fromarray(frame).save(os.path.join(frames_dir, f'{k:05d}.png'))
        logger.info(f'✅ wrote {clip.num_frames} frames to {frames_dir}', extra=fields(frames_dir=frames_dir))


def load_checkpoint(path: str):
    net, config = checkpoint_service.load_tokenizer(path, device=device_from_env())
    return net, config, schedule_from_config(config.model, config.schedule)


def write_timing(output: str, **values) -> str:
    path = f'{output}.timing'
    with open(path, 'w') as fh:
        fh.write(RecordFormatter.format_record(values) + '\n')
    return path


def decode_options(f):
    f = click.option('--frames-dir', type=click.Path(file_okay=False), help='Also write PNG frames here.')(f)
    f = click.option('--streaming', is_flag=True, help='Process chunk by chunk with feature caches.')(f)
    f = click.option('--seed', type=int, default=0, show_default=True, help='Seed for the initial noise V_T.')(f)
    f = click.option('--steps', type=click.IntRange(min=1), help='DDIM steps; defaults to schedule.sampling_steps.')(f)
    return f


@click.command('encode')
@click.argument('checkpoint', type=click.Path(exists=True, file_okay=False))
@click.argument('input_path', metavar='INPUT', type=click.Path(exists=True))
@click.argument('output', type=click.Path(dir_okay=False))
@click.option('--streaming', is_flag=True, help='Process chunk by chunk with feature caches.')
@handles_errors
def encode_cmd(checkpoint, input_path, output, streaming):
    """Encode a clip to the posterior-mean latent (1+f, h, w, c)."""
    net, config, _ = load_checkpoint(checkpoint)
    clip = read_clip(input_path, config.data.resize)
    with torch.no_grad():
        post = stream_encode(clip, net) if streaming else encode(clip, net)
    latent = Latent(post.mean)
    tensor_store.write(output, latent.channels_last())
    logger.info(f'✅ encoded {input_path}', extra=fields(output=output, grid=latent.grid_shape, streaming=streaming))
    click.echo(output)


@click.command('decode')
@click.argument('checkpoint', type=click.Path(exists=True, file_okay=False))
@click.argument('latent_path', metavar='LATENT', type=click.Path(exists=True, dir_okay=False))
@click.argument('output', type=click.Path(dir_okay=False))
@decode_options
@handles_errors
def decode_cmd(checkpoint, latent_path, output, steps, seed, streaming, frames_dir):
    """Decode a latent container to a clip with DDIM from seeded noise."""
    net, config, sched = load_checkpoint(checkpoint)
    steps = steps or config.schedule.sampling_steps
    latent = Latent.from_channels_last(tensor_store.read(latent_path).data)
    out = decode(latent, steps, seed, net, sched, streaming=streaming)
    write_clip(output, VideoTensor.from_model(out), frames_dir)
    click.echo(output)


@click.command('reconstruct')
@click.argument('checkpoint', type=click.Path(exists=True, file_okay=False))
@click.argument('input_path', metavar='INPUT', type=click.Path(exists=True))
@click.argument('output', type=click.Path(dir_okay=False))
@decode_options
@handles_errors
def reconstruct_cmd(checkpoint, input_path, output, steps, seed, streaming, frames_dir):
    """Encode then decode a clip; writes the clip and a .timing record."""
    net, config, sched = load_checkpoint(checkpoint)
    steps = steps or config.schedule.sampling_steps
    clip = read_clip(input_path, config.data.resize)

    denoiser = network_denoiser(net, streaming)
    started = time.perf_counter()
    recon = reconstruct(clip, steps, seed, net, sched, streaming=streaming, denoiser=denoiser)
    seconds = time.perf_counter() - started

    write_clip(output, recon, frames_dir)
    write_timing(output, seconds=seconds, steps=steps, seed=seed, denoiser_calls=denoiser.calls,
                 frames=clip.num_frames, streaming=streaming)
    logger.info(f'✅ reconstructed {input_path}',
                extra=fields(output=output, steps=steps, seed=seed, denoiser_calls=denoiser.calls, seconds=seconds))
    click.echo(output)


def register(group: click.Group) -> None:
    group.add_command(encode_cmd)
    group.add_command(decode_cmd)
    group.add_command(reconstruct_cmd)
