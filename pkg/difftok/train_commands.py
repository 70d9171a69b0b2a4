"""train and make-dataset commands."""
import logging
import os

import click

from difftok.config import device_from_env, load_config
from difftok.decorators import config_options, handles_errors
from difftok.errors import ConfigError
from difftok.record_utils import fields
from difftok.services.dataset_service import dataset_service
from difftok.training import ClipDataset, TrainState, train_loop

logger = logging.getLogger(__name__)


@click.command('train')
@config_options
@click.option('--resume', type=click.Path(exists=True, file_okay=False), help='Checkpoint directory to continue from.')
@click.option('--run-dir', type=click.Path(file_okay=False), help='Overrides train.run_dir.')
@handles_errors
def train_cmd(config_path, overrides, resume, run_dir):
    """Train a tokenizer on the manifest named by data.manifest."""
    config = load_config(config_path, overrides)
    if not config.data.manifest:
        raise ConfigError('data.manifest is required for training')
    device = device_from_env()

    manifest = dataset_service.load_manifest(config.data.manifest)
    dataset = ClipDataset(manifest, config.data.train_split)
    val = ClipDataset(manifest, config.data.val_split) if manifest.split(config.data.val_split) else None
    if val is None:
        logger.warning(f'⚠️ no {config.data.val_split} clips, periodic evaluation is off')

    run_dir = run_dir or config.train.run_dir
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, 'config.ini'), 'w') as fh:
        fh.write(config.to_ini())

    state = TrainState.restore(resume, config, device) if resume else TrainState.create(config, device)
    for path in train_loop(config, dataset, state=state, run_dir=run_dir, val_dataset=val, device=device):
        click.echo(path)


@click.command('make-dataset')
@click.argument('root', type=click.Path(file_okay=False))
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--clips', 'n_clips', type=click.IntRange(min=1), default=256, show_default=True)
@click.option('--resolution', type=click.IntRange(min=8), default=64, show_default=True)
@click.option('--frames', type=click.IntRange(min=1), default=9, show_default=True)
@click.option('--val-fraction', type=click.FloatRange(0, 1), default=0.125, show_default=True)
@handles_errors
def make_dataset_cmd(root, seed, n_clips, resolution, frames, val_fraction):
    """Write the seeded synthetic moving-pattern dataset."""
    manifest = dataset_service.make_synthetic_dataset(root, seed=seed, n_clips=n_clips, resolution=resolution,
                                                      frames=frames, val_fraction=val_fraction)
    logger.info('dataset ready', extra=fields(root=manifest.root, clips=len(manifest.entries)))
    click.echo(os.path.join(manifest.root, 'manifest.json'))


def register(group: click.Group) -> None:
    group.add_command(train_cmd)
    group.add_command(make_dataset_cmd)
