"""
Console logging: colored [module] tags on stderr, optional plain log file.
"""
import logging

import colorlog

LOG_FORMAT = "%(log_color)s[%(name)s]%(reset)s %(message)s"
FILE_FORMAT = "%(asctime)s [%(name)s] %(levelname)s %(message)s"
LOG_COLORS = {
    "DEBUG": "light_black",
    "INFO": "cyan",
    "WARNING": "yellow",
    "ERROR": "red",
    "CRITICAL": "bold_red",
}


def setup_logging(verbose=False):
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_skyflow", False):
            root.removeHandler(handler)
            handler.close()

    handler = colorlog.StreamHandler()
    handler.setFormatter(colorlog.ColoredFormatter(LOG_FORMAT, log_colors=LOG_COLORS))
    handler._skyflow = True
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def add_log_file(path):
    """Attach a plain-text log file to the root logger; caller removes it."""
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setFormatter(logging.Formatter(FILE_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler
