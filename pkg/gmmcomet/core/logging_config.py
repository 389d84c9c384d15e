# gmmcomet/core/logging_config.py
import logging
from typing import Optional

from .config import settings

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: Optional[str] = None) -> None:
    """Configure the root logger once. `level` overrides Settings.LOG_LEVEL."""
    resolved = (level or settings.LOG_LEVEL).upper()
    if not isinstance(logging.getLevelName(resolved), int):
        raise ValueError(f"Unknown log level: {resolved}")
    logging.basicConfig(level=resolved, format=LOG_FORMAT, force=True)
