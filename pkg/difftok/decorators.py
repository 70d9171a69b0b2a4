import logging
import sys
from functools import wraps

import click

from difftok.errors import DifftokError
from difftok.record_utils import fields

logger = logging.getLogger(__name__)


def handles_errors(f):
    """Map DifftokError to its exit code for click commands."""
    @wraps(f)
    def decorated(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except DifftokError as e:
            logger.error(f"❌ {f.__name__} failed: {e.message}",
                         extra=fields(error=type(e).__name__, exit_code=e.exit_code, **e.details))
            click.echo(f"Error: {e.message}", err=True)
            sys.exit(e.exit_code)

    return decorated


def count_calls(f):
    """Wrap a callable so that `wrapper.calls` counts invocations."""
    @wraps(f)
    def decorated(*args, **kwargs):
        decorated.calls += 1
        return f(*args, **kwargs)

    decorated.calls = 0
    return decorated


def config_options(f):
    """--config PATH and repeatable --set section.key=value."""
    f = click.option('--set', 'overrides', multiple=True, metavar='SECTION.KEY=VALUE',
                     help='Override one config value; applied after the file and DIFFTOK_* variables.')(f)
    f = click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False),
                     help='INI config file with [model], [schedule], [train] and [data] sections.')(f)
    return f
