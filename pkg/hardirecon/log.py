# Copyright (c) 2019 Edvinas Byla
# Licensed under MIT License

import json
import logging
import re

from colorama import init as colorama_init
from colorama import Fore, Back, Style


LOGGER_NAME = "hardirecon"
LOG_FILE = "hardirecon.log"
LINE_WIDTH = 80


class Log:
    """Colored console and plain file logging shared by every command."""

    HEADERS = {
        "WHITE": (Fore.BLACK, Back.WHITE, Style.BRIGHT),
        "RED": (Fore.WHITE, Back.RED, Style.BRIGHT),
        "GREEN": (Fore.WHITE, Back.GREEN, Style.BRIGHT),
    }
    LEVELS = {
        logging.DEBUG: (Fore.CYAN,),
        logging.INFO: (Fore.GREEN,),
        logging.WARNING: (Fore.YELLOW,),
        logging.ERROR: (Fore.MAGENTA,),
    }

    # Usable before enable(); records then go to the default logging setup
    logger = logging.getLogger(LOGGER_NAME)

    @classmethod
    def enable(cls, storage, verbose=True):
        """Attaches a console handler and a log file inside the run directory.

        Args:
            storage: Storage object of the run.
            verbose (bool): show debug records (per-epoch losses) on the console.
        """

        colorama_init()
        cls.disable()

        console = logging.StreamHandler()
        console.setFormatter(logging.Formatter("%(message)s"))
        console.setLevel(logging.DEBUG if verbose else logging.INFO)

        log_file = logging.FileHandler(storage.current_path / LOG_FILE)
        log_file.setFormatter(FileFormatter("%(asctime)s\n%(message)s"))

        for handler in (console, log_file):
            cls.logger.addHandler(handler)
        cls.logger.setLevel(logging.DEBUG)
        cls.logger.propagate = False

    @classmethod
    def disable(cls):
        for handler in list(cls.logger.handlers):
            cls.logger.removeHandler(handler)
            handler.close()

    @classmethod
    def header(cls, message, type="WHITE"):
        styles = cls.HEADERS.get(type, cls.HEADERS["WHITE"])
        cls.write(logging.INFO, message.center(LINE_WIDTH, '-'), styles)

    @classmethod
    def debug(cls, message):
        cls.write(logging.DEBUG, message)

    @classmethod
    def info(cls, message):
        cls.write(logging.INFO, message)

    @classmethod
    def warning(cls, message):
        cls.write(logging.WARNING, message)

    @classmethod
    def error(cls, message):
        cls.write(logging.ERROR, message)

    @classmethod
    def write(cls, level, message, styles=None):
        if styles is None:
            styles = cls.LEVELS[level]
        cls.logger.log(level, cls.create_message(message, styles))

    @staticmethod
    def create_message(message, styles):
        # Settings and reports are logged as indented JSON
        if isinstance(message, dict):
            message = json.dumps(message, indent=4, sort_keys=True, default=str)
        return ''.join(styles) + str(message) + Style.RESET_ALL


class FileFormatter(logging.Formatter):
    """Strips color codes so the log file stays readable."""

    ANSI_ESCAPE = re.compile(r'\x1B\[[0-?]*[ -/]*[@-~]')

    def plain(self, string):
        return self.ANSI_ESCAPE.sub('', string)

    def format(self, record):
        separator = '=' * LINE_WIDTH
        return '\n'.join((separator, self.plain(super().format(record)), separator))
