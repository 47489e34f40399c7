"""
Shared plumbing for the himtm management commands

Failures of any kind (bad flags, unreadable config, geometry mismatch,
numerical trouble) end the process with status 1 and one `error: ...` line
on stderr.
"""
import logging
import sys
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError, handle_default_options

from ...exceptions import HiMTMError
from ...services.run_config import load_config, parse_overrides

logger = logging.getLogger(__name__)


class HiMTMCommand(BaseCommand):
    requires_system_checks = []
    needs_config = True

    def add_arguments(self, parser):
        if self.needs_config:
            parser.add_argument('--config', required=True, help='Run configuration file (section.key = value lines)')
            parser.add_argument(
                '--set', action='append', default=[], metavar='KEY=VALUE',
                help='Override one configuration key; may be repeated',
            )
            parser.add_argument('--out', help='Output directory (default: run.output_dir or HIMTM_RUNS_DIR/<command>)')

    def run_from_argv(self, argv):
        # Parser errors raise CommandError instead of printing usage and exiting with status 2
        try:
            parser = self.create_parser(argv[0], argv[1])
            options = parser.parse_args(argv[2:])
            cmd_options = vars(options)
            args = cmd_options.pop('args', ())
            handle_default_options(options)
            self.execute(*args, **cmd_options)
        except CommandError as e:
            message = ' '.join(str(e).split())
            if message.startswith('Error: '):
                message = message[len('Error: '):]
            self.stderr.write(f"error: {message}")
            sys.exit(1)

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except HiMTMError as e:
            logger.debug(f"{self.__class__.__module__} failed", exc_info=True)
            raise CommandError(str(e)) from e

    def run(self, **options):
        raise NotImplementedError

    def load_run_config(self, options):
        return load_config(options['config'], parse_overrides(options.get('set')))

    def output_dir(self, options, config, command: str) -> Path:
        if options.get('out'):
            return Path(options['out'])
        if config.output_dir:
            return Path(config.output_dir)
        return Path(settings.HIMTM_RUNS_DIR) / command
