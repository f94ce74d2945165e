"""Logging - One stderr handler for the whole package"""

import logging
import os
import sys

ROOT_LOGGER = "mxsim"
LOG_FORMAT = "[%(levelname)s] %(message)s"

_configured = False


def configure_logging(level=None):
    """Install the stderr handler once; level falls back to MXSIM_LOG_LEVEL"""
    global _configured
    root = logging.getLogger(ROOT_LOGGER)
    if not _configured:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
        root.propagate = False
        _configured = True
    if level is None:
        level = os.environ.get("MXSIM_LOG_LEVEL", "WARNING")
    root.setLevel(level.upper() if isinstance(level, str) else level)
    return root


def verbosity_level(count):
    if count >= 2:
        return logging.DEBUG
    if count == 1:
        return logging.INFO
    return None


def get_logger(name):
    """Child logger under the package root, e.g. get_logger(__name__)"""
    short = name.rsplit(".", 1)[-1]
    return logging.getLogger(f"{ROOT_LOGGER}.{short}")
