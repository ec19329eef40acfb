import os
from dotenv import load_dotenv

from cavlab.errors import ConfigError

load_dotenv()

CAVLAB_THREADS = int(os.getenv("CAVLAB_THREADS", str(os.cpu_count() or 1)))
CAVLAB_OUT = os.getenv("CAVLAB_OUT", "cavlab-out")
CAVLAB_LOG_LEVEL = os.getenv("CAVLAB_LOG_LEVEL", "INFO").upper()

TOOL_VERSION = "1.0.0"
SCHEMA_VERSION = 1

_LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def validate_config() -> None:
    problems = []
    if CAVLAB_THREADS < 1:
        problems.append(f"CAVLAB_THREADS must be >= 1, got {CAVLAB_THREADS}")
    if CAVLAB_LOG_LEVEL not in _LOG_LEVELS:
        problems.append(f"CAVLAB_LOG_LEVEL must be one of {', '.join(_LOG_LEVELS)}, got {CAVLAB_LOG_LEVEL}")
    if problems:
        raise ConfigError("Invalid environment: " + "; ".join(problems))


def thread_cap(requested: int | None = None) -> int:
    """Number of worker threads, never above CAVLAB_THREADS."""
    if requested is None:
        return CAVLAB_THREADS
    return max(1, min(requested, CAVLAB_THREADS))
