"""
Shared utilities: kernel cache, timing and logging setup.
"""

from .cache_utils import (
    CACHE_DIRS,
    clear_cache,
    generate_cache_key,
    load_from_cache,
    save_to_cache,
)
from .logging_config import configure_package_logging, get_logger
from .timing import TimingContext

__all__ = [
    "CACHE_DIRS",
    "clear_cache",
    "generate_cache_key",
    "load_from_cache",
    "save_to_cache",
    "configure_package_logging",
    "get_logger",
    "TimingContext",
]
