"""
Environment-backed settings and seeded random streams.
"""
import logging
import os
import zlib
from typing import Optional

import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError

from .errors import InvalidConfig

# Load environment variables
load_dotenv()

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"


class LabSettings(BaseModel):
    """Process-wide knobs read from the environment (or a .env file)"""

    threads: int = Field(default=1, ge=1)
    log_level: str = "INFO"
    progress: bool = True
    eig_max_sweeps: int = Field(default=100, ge=1)
    slow_tests: bool = False

    @classmethod
    def from_env(cls) -> "LabSettings":
        try:
            return cls(
                threads=int(os.getenv("ICL_LAB_THREADS", "1")),
                log_level=os.getenv("ICL_LAB_LOG_LEVEL", "INFO").upper(),
                progress=os.getenv("ICL_LAB_PROGRESS", "1") != "0",
                eig_max_sweeps=int(os.getenv("ICL_LAB_EIG_MAX_SWEEPS", "100")),
                slow_tests=os.getenv("ICL_LAB_SLOW", "0") == "1",
            )
        except (ValueError, ValidationError) as e:
            raise InvalidConfig(f"bad ICL_LAB_* environment value: {e}") from e


def get_settings() -> LabSettings:
    return LabSettings.from_env()


def setup_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(
        level=getattr(logging, (level or get_settings().log_level), logging.INFO),
        format=LOG_FORMAT,
        datefmt="%H:%M:%S",
    )


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named purpose ("init", "demos", "controls", ...)"""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])
