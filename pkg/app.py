import logging
import os

import click
import torch
from dotenv import load_dotenv

from difftok.config import CONFIG_FORMAT_VERSION
from difftok.record_utils import configure_logging, fields

load_dotenv()

logger = logging.getLogger('difftok.app')


@click.group()
@click.version_option(version=str(CONFIG_FORMAT_VERSION), prog_name='difftok',
                      message='%(prog)s config format %(version)s')
def cli():
    """Diffusion video tokenizer: train, encode, decode, reconstruct and evaluate."""
    configure_logging(os.getenv('DIFFTOK_LOG_LEVEL', 'INFO'))

    threads = os.getenv('DIFFTOK_NUM_THREADS')
    if threads:
        torch.set_num_threads(int(threads))
        logger.debug('torch threads set', extra=fields(threads=int(threads)))


# Register command groups
from difftok import codec_commands, eval_commands, train_commands  # noqa: E402

codec_commands.register(cli)
train_commands.register(cli)
eval_commands.register(cli)


if __name__ == '__main__':
    cli()
