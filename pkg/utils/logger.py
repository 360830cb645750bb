#!/usr/bin/env python3
"""
Logging setup for BTSeg
"""

import logging
import os
from pathlib import Path

FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def setup_logger(name="btseg", level=None, log_file=None):
    """Setup the shared logger; safe to call from every engine"""
    logger = logging.getLogger(name)
    level = level or os.getenv('BTSEG_LOG_LEVEL', 'INFO')
    logger.setLevel(level.upper() if isinstance(level, str) else level)

    if not any(type(h) is logging.StreamHandler for h in logger.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(FORMAT))
        logger.addHandler(handler)

    if log_file is not None:
        log_file = Path(log_file).resolve()
        already = any(
            isinstance(h, logging.FileHandler) and Path(h.baseFilename) == log_file
            for h in logger.handlers
        )
        if not already:
            log_file.parent.mkdir(parents=True, exist_ok=True)
            file_handler = logging.FileHandler(log_file, encoding="utf-8")
            file_handler.setFormatter(logging.Formatter(FORMAT))
            logger.addHandler(file_handler)

    return logger
