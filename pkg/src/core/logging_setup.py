"""
Logging Setup

Configures the 'netfx' logger hierarchy: a dated log file plus stderr.
Modules log through logging.getLogger(__name__) children of 'netfx'.
"""

import json
import logging
import os
import sys
from datetime import datetime
from typing import Any, Dict

from .settings import NetfxSettings

LOGGER_NAME = 'netfx'
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(settings: NetfxSettings, to_file: bool = True) -> logging.Logger:
    """
    Setup logging for estimation runs.

    Args:
        settings: settings providing log directory and level
        to_file: also write logs/netfx_YYYYMMDD.log

    Returns:
        The configured root 'netfx' logger
    """
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(getattr(logging, settings.log_level, logging.INFO))

    # Remove existing handlers to avoid duplicates
    logger.handlers.clear()
    formatter = logging.Formatter(LOG_FORMAT)

    if to_file:
        os.makedirs(settings.log_dir, exist_ok=True)
        log_filename = os.path.join(
            settings.log_dir, f"netfx_{datetime.now().strftime('%Y%m%d')}.log"
        )
        file_handler = logging.FileHandler(log_filename)
        file_handler.setLevel(logging.INFO)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    stream_handler = logging.StreamHandler(sys.stderr)
    stream_handler.setLevel(logging.WARNING)
    stream_handler.setFormatter(formatter)
    logger.addHandler(stream_handler)
    logger.propagate = False
    return logger


def log_event(logger: logging.Logger, event: str, payload: Dict[str, Any], level: int = logging.INFO):
    """Log a structured event as 'EVENT: {json}'."""
    logger.log(level, f"{event}: {json.dumps(payload, default=_json_default, sort_keys=True)}")


def _json_default(value: Any):
    if hasattr(value, 'tolist'):
        return value.tolist()
    return str(value)
