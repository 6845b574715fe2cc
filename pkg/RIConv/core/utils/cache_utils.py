"""
On-disk cache for deterministic, expensive-to-build numeric artifacts.

Entries are keyed by an MD5 hash of their generating parameters and stored
as small binary files whose layout is owned by the caller (a reader and a
writer callable). Used for kernel point dispositions.
"""

import hashlib
import logging
from pathlib import Path
from typing import Any, Callable, Dict, Optional

# Known cache directories
CACHE_DIRS = {
    "kernels": ".cache/kernels",
}

CACHE_SUFFIX = ".bin"

logger = logging.getLogger(__name__)


def _normalize_value(value: Any) -> Any:
    """
    Normalize a value for consistent hashing.

    Lists and tuples keep their order (it is significant for numeric
    parameters); floats are rendered with full precision.
    """
    if value is None:
        return None
    if isinstance(value, (list, tuple)):
        return tuple(_normalize_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return value


def generate_cache_key(params_dict: Dict[str, Any]) -> str:
    """
    Generate a cache key from parameters using MD5 hash.

    Args:
        params_dict: Dictionary of parameters to hash

    Returns:
        MD5 hash string (hexdigest)
    """
    excluded_params = {"use_cache", "cache_dir"}

    normalized_params = {}
    for key in sorted(params_dict.keys()):
        if key not in excluded_params:
            normalized_params[key] = _normalize_value(params_dict[key])

    param_str = repr(normalized_params)
    hash_obj = hashlib.md5(param_str.encode("utf-8"))
    return hash_obj.hexdigest()


def get_cache_path(cache_key: str, cache_dir: str = CACHE_DIRS["kernels"]) -> Path:
    """
    Get the full path to a cache file, creating the directory if needed.

    Args:
        cache_key: Cache key (MD5 hash)
        cache_dir: Base cache directory

    Returns:
        Path object pointing to the cache file
    """
    cache_path = Path(cache_dir)
    cache_path.mkdir(parents=True, exist_ok=True)
    return cache_path / f"{cache_key}{CACHE_SUFFIX}"


def load_from_cache(
    cache_key: str,
    reader: Callable[[bytes], Any],
    cache_dir: str = CACHE_DIRS["kernels"],
) -> Optional[Any]:
    """
    Load and decode a cache entry.

    Args:
        cache_key: Cache key (MD5 hash)
        reader: Decodes the raw file bytes; raises ValueError on bad content
        cache_dir: Base cache directory

    Returns:
        Decoded data on a cache hit, None on a miss or a corrupted entry
    """
    cache_file = get_cache_path(cache_key, cache_dir)

    if not cache_file.exists():
        return None

    try:
        return reader(cache_file.read_bytes())
    except (ValueError, EOFError, IOError) as e:
        # Corrupted cache file, delete it
        logger.warning(f"Corrupted cache file {cache_file}: {e}")
        cache_file.unlink(missing_ok=True)
        return None


def save_to_cache(
    cache_key: str,
    data: Any,
    writer: Callable[[Any], bytes],
    cache_dir: str = CACHE_DIRS["kernels"],
) -> None:
    """
    Encode and save a cache entry. Write failures are logged, never raised.

    Args:
        cache_key: Cache key (MD5 hash)
        data: Object to cache
        writer: Encodes ``data`` to bytes
        cache_dir: Base cache directory
    """
    try:
        cache_file = get_cache_path(cache_key, cache_dir)
        cache_file.write_bytes(writer(data))
    except (IOError, OSError) as e:
        logger.warning(f"Failed to save cache entry {cache_key} in {cache_dir}: {e}")


def clear_cache(cache_dir: str) -> int:
    """
    Remove ALL cache files in a directory.

    Args:
        cache_dir: Cache directory to clear

    Returns:
        Number of files removed
    """
    cache_path = Path(cache_dir)

    if not cache_path.exists():
        return 0

    removed_count = 0

    for cache_file in cache_path.glob(f"*{CACHE_SUFFIX}"):
        try:
            cache_file.unlink()
            removed_count += 1
        except (OSError, IOError) as e:
            logger.warning(f"Failed to remove cache file {cache_file}: {e}")
            continue

    return removed_count
