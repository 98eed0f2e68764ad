"""
Utility functions for tbgdiff
"""

import logging
import random
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import torch

# Try to import settings, fallback to simple config if it fails
try:
    from config.settings import settings

    LOG_LEVEL = settings.LOG_LEVEL
    LOG_FORMAT = settings.LOG_FORMAT
    NUM_THREADS = settings.NUM_THREADS
except ImportError:
    # Fallback configuration
    LOG_LEVEL = "INFO"
    LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    NUM_THREADS = None


def setup_logging(
    name: str, level: Optional[str] = None, log_file: Optional[Path] = None
) -> logging.Logger:
    """
    Set up a logger with consistent formatting and optional file output

    Args:
        name: Logger name (usually __name__ or the package name "src")
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_file: Optional file path for logging

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)

    log_level = level or LOG_LEVEL
    logger.setLevel(getattr(logging, log_level.upper()))

    formatter = logging.Formatter(LOG_FORMAT)

    if not any(
        isinstance(h, logging.StreamHandler) and not isinstance(h, logging.FileHandler)
        for h in logger.handlers
    ):
        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

    # One file handler per log file; a second training run in the same process
    # must not duplicate lines in the first run's log.
    if log_file:
        log_file = Path(log_file)
        log_file.parent.mkdir(parents=True, exist_ok=True)
        known = {
            Path(h.baseFilename)
            for h in logger.handlers
            if isinstance(h, logging.FileHandler)
        }
        if log_file.resolve() not in known:
            file_handler = logging.FileHandler(log_file)
            file_handler.setFormatter(formatter)
            logger.addHandler(file_handler)

    return logger


def get_logger(name: str) -> logging.Logger:
    """
    Get a logger instance for the given name

    Args:
        name: Logger name (usually __name__)

    Returns:
        Logger instance
    """
    return logging.getLogger(name)


def seed_everything(seed: int, deterministic: bool = True) -> None:
    """Seed python, numpy and torch; optionally request deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if NUM_THREADS:
        torch.set_num_threads(NUM_THREADS)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
