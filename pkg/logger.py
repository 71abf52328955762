"""
Logging for matrix-normal clustering

Records go to stderr; stdout is reserved for command results (ari=... lines,
CSV tables). LOG_LEVEL sets the starting level, main.py's -v / -q shift it.
"""
import logging
import os
import sys

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def _level_from_env() -> int:
    name = os.getenv("LOG_LEVEL", "INFO").upper()
    level = logging.getLevelName(name)
    if isinstance(level, int):
        return level
    # Can't use logger here (not configured yet), so use print
    print(f"Warning: Invalid LOG_LEVEL '{name}', defaulting to INFO", file=sys.stderr)
    return logging.INFO


logging.basicConfig(
    level=_level_from_env(),
    format=LOG_FORMAT,
    datefmt=DATE_FORMAT,
    handlers=[logging.StreamHandler(sys.stderr)],
)


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(name)


def shift_verbosity(steps: int) -> int:
    """Lower the root level by `steps` (negative raises it), clamped to DEBUG..CRITICAL"""
    root = logging.getLogger()
    level = min(max(root.level - 10 * steps, logging.DEBUG), logging.CRITICAL)
    root.setLevel(level)
    return level
