import logging
import os
from typing import Optional

from . import utils
from .config import config
from .models import RunConfig

logger = logging.getLogger(__name__)


class RunContext:
    """
    Output directory of one subcommand invocation.

    Entering the context creates the directory, attaches `logs/<command>.log` and echoes the resolved
    configuration to `run_config.json`.
    """

    def __init__(self, command: str, run_config: RunConfig):
        self.command = command
        self.run_config = run_config
        self.output_directory = os.path.abspath(run_config.output_dir)

        self._log_handler: Optional[logging.Handler] = None

    @property
    def data_directory(self) -> str:
        return os.path.abspath(self.run_config.data_dir or self.run_config.output_dir)

    def path(self, *parts: str) -> str:
        return os.path.join(self.output_directory, *parts)

    def get_bank_directory(self) -> str:
        return self.path("bank")

    def get_multitask_checkpoint_path(self) -> str:
        return self.path("multitask.ckpt")

    def write_run_config(self):
        utils.write_text(self.path(config.run_config_file_name), self.run_config.json(indent=2, sort_keys=True) + "\n")

    def __enter__(self) -> "RunContext":
        utils.ensure_directory(self.output_directory)
        self._log_handler = utils.attach_run_log(self.output_directory, self.command)
        self.write_run_config()

        logger.debug("Run directory: %s", self.output_directory)

        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self._log_handler is not None:
            utils.detach_run_log(self._log_handler)
            self._log_handler = None
