"""eval command: reconstruction quality over a manifest split."""
import logging
import os

import click
import torch

from difftok.codec_commands import load_checkpoint
from difftok.decorators import handles_errors
from difftok.errors import ConfigError
from difftok.metrics import evaluate, latent_stats
from difftok.networks import encode
from difftok.perceptual import MIN_FRAME_SIZE, perceptual_for
from difftok.record_utils import RecordFormatter, fields
from difftok.sampler import reconstruct
from difftok.services.dataset_service import PreprocessSpec, dataset_service, load_clip

logger = logging.getLogger(__name__)


def parse_steps(text: str):
    try:
        steps = [int(s) for s in text.split(',') if s.strip()]
    except ValueError as e:
        raise ConfigError(f'--steps must be a comma-separated list of integers, got {text!r}') from e
    if not steps or min(steps) < 1:
        raise ConfigError(f'--steps needs positive step counts, got {text!r}')
    return steps


@click.command('eval')
@click.argument('checkpoint', type=click.Path(exists=True, file_okay=False))
@click.argument('manifest_path', metavar='MANIFEST', type=click.Path(exists=True))
@click.argument('report', type=click.Path(dir_okay=False))
@click.option('--steps', 'steps_text', default=None, help='DDIM step counts, e.g. 1,2,3. Defaults to schedule.sampling_steps.')
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--split', default=None, help='Manifest split; defaults to data.val_split.')
@click.option('--clips', 'limit', type=click.IntRange(min=1), default=None, help='Evaluate at most this many clips.')
@click.option('--frames', type=click.IntRange(min=1), default=None, help='Frames per clip, truncated to 1 + 4k.')
@click.option('--streaming', is_flag=True)
@click.option('--no-lpips', is_flag=True, help='Skip the perceptual metric.')
@handles_errors
def eval_cmd(checkpoint, manifest_path, report, steps_text, seed, split, limit, frames, streaming, no_lpips):
    """Write PSNR, SSIM, LPIPS, decode time and latent statistics as key=value records."""
    net, config, sched = load_checkpoint(checkpoint)
    steps_list = parse_steps(steps_text) if steps_text else [config.schedule.sampling_steps]

    manifest = dataset_service.load_manifest(manifest_path)
    entries = manifest.split(split or config.data.val_split)
    if limit:
        entries = entries[:limit]
    spec = PreprocessSpec(frames=frames or manifest.preprocess.frames, crop=manifest.preprocess.crop,
                          resize=config.data.resize or manifest.preprocess.resize)
    clips = [(e.name, load_clip(e, spec, manifest.root)) for e in entries]

    perceptual = None
    smallest = min(min(c.shape[1:3]) for _, c in clips) if clips else 0
    if not no_lpips and config.model.lpips_enabled and smallest >= MIN_FRAME_SIZE:
        perceptual = perceptual_for(config.model, net.device)

    with torch.no_grad():
        means = [encode(c, net).mean for _, c in clips]
    mean, var = latent_stats(means)

    records = [{'record': 'model', **net.parameter_report()}]
    for steps in steps_list:
        def reconstructor(clip, steps=steps):
            return reconstruct(clip, steps, seed, net, sched, streaming=streaming)

        result = evaluate(clips, reconstructor, steps, perceptual=perceptual)
        result.latent_mean, result.latent_var = mean.tolist(), var.tolist()
        records.extend(result.to_records())
        logger.info(f'✅ eval at {steps} steps', extra=fields(**result.summary()))

    os.makedirs(os.path.dirname(os.path.abspath(report)), exist_ok=True)
    with open(report, 'w') as fh:
        for record in records:
            fh.write(RecordFormatter.format_record(record) + '\n')
    click.echo(report)


def register(group: click.Group) -> None:
    group.add_command(eval_cmd)
