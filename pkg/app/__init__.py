import json
import logging
import os
import sys
import click

from dotenv import load_dotenv
from logging.handlers import RotatingFileHandler

from app.configurations import config
from app.constants import ONE_MB, EXIT_UNEXPECTED
from app.exceptions.config_errors import ConfigError
from app.exceptions.lab_errors import LabError

load_dotenv()

LOG_DIR = config.get_log_dir()

if not os.path.exists(LOG_DIR):
    os.makedirs(LOG_DIR)

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)

file_handler = RotatingFileHandler(
    os.path.join(LOG_DIR, 'seer_lab.log'),
    maxBytes=ONE_MB,
    backupCount=10,
    encoding='utf-8'
)
file_handler.setFormatter(
    logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
)

logger = logging.getLogger(__name__)
logger.addHandler(file_handler)


def _emit_error(message: str, field: str | None = None):
    payload = {"error": message}
    if field:
        payload["field"] = field
    click.echo(json.dumps(payload), err=True)


class LabGroup(click.Group):
    """Command group that turns lab and configuration errors into exit codes"""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except ConfigError as error:
            logger.error(f"Configuration error: {str(error)}", exc_info=True)
            _emit_error(error.message, getattr(error, 'field', None))
            sys.exit(error.exit_code)
        except LabError as error:
            logger.error(f"Lab error: {str(error)}", exc_info=True)
            _emit_error(error.message)
            sys.exit(error.exit_code)
        except (click.exceptions.Exit, click.ClickException, click.Abort):
            raise
        except Exception as error:
            logger.critical(f"Unexpected error: {str(error)}", exc_info=True)
            _emit_error("Internal error")
            sys.exit(EXIT_UNEXPECTED)


def create_cli() -> click.Group:
    @click.group(cls=LabGroup)
    def cli():
        """Gradient-leakage laboratory: train, mount, detect and threshold."""

    from app.commands.train import train_command
    from app.commands.mount import mount_command
    from app.commands.detect import detect_command
    from app.commands.threshold import threshold_command
    cli.add_command(train_command)
    cli.add_command(mount_command)
    cli.add_command(detect_command)
    cli.add_command(threshold_command)

    return cli


def main():
    create_cli()()
