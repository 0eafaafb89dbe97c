"""
Helper utility functions
"""
import difflib
import hashlib
import math
import re
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, TypeVar

import numpy as np

from gradshield.core.config import settings

T = TypeVar("T")
R = TypeVar("R")


def derive_seed(base: int, *keys: int) -> int:
    """
    Derive an independent 63-bit seed from a base seed and integer keys

    Examples:
        >>> derive_seed(42, 0) == derive_seed(42, 0)
        True
        >>> derive_seed(42, 0) != derive_seed(42, 1)
        True
    """
    entropy = [int(base)] + [int(k) for k in keys]
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def round_half_away(value: float) -> int:
    """
    Round to the nearest integer, halves away from zero

    Examples:
        >>> round_half_away(2.5)
        3
        >>> round_half_away(-2.5)
        -3
    """
    # 1e-9 absorbs products like 0.15 * 10 landing a hair below the half
    if value >= 0:
        return int(math.floor(value + 0.5 + 1e-9))
    return -int(math.floor(-value + 0.5 + 1e-9))


def ordered_map(func: Callable[[T], R], items: Sequence[T], threads: Optional[int] = None) -> List[R]:
    """
    Apply func to items on a thread pool, returning results in input order

    Args:
        func: Callable applied to every item
        items: Inputs
        threads: Worker cap, defaults to settings.THREADS

    Returns:
        List of results aligned with items
    """
    workers = max(1, int(threads or settings.THREADS))
    if workers == 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(func, items))


def chunk_sizes(total: int, width: int) -> Iterable[int]:
    """
    Split `total` Monte Carlo draws into batches holding at most
    settings.CHUNK_ELEMENTS floats of `width` each
    """
    per_chunk = max(1, min(settings.PARALLEL_CHUNK, settings.CHUNK_ELEMENTS // max(1, width)))
    remaining = int(total)
    while remaining > 0:
        size = min(per_chunk, remaining)
        yield size
        remaining -= size


def sha256_file(path: Path) -> str:
    """Hex SHA-256 of a file's contents"""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def suggest_key(key: str, candidates: Iterable[str]) -> Optional[str]:
    """
    Closest known key for a misspelled one

    Examples:
        >>> suggest_key("sigm", ["sigma", "z", "strategy"])
        'sigma'
    """
    matches = difflib.get_close_matches(key, list(candidates), n=1, cutoff=0.6)
    return matches[0] if matches else None


def sanitize_filename(filename: str) -> str:
    """
    Sanitize filename by removing invalid characters

    Args:
        filename: Original filename

    Returns:
        Sanitized filename
    """
    filename = re.sub(r'[<>:"/\\|?*=]', '_', filename)
    filename = re.sub(r'\s+', '_', filename)
    filename = filename.strip('. ')
    if len(filename) > 255:
        filename = filename[:255]

    return filename or "untitled"


def format_float(value: float) -> str:
    """Shortest round-tripping text for a float, used in every CSV"""
    value = float(value)
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(value)


def format_duration(seconds: float) -> str:
    """
    Format duration in seconds to human-readable format

    Examples:
        >>> format_duration(125)
        '2m 5s'
        >>> format_duration(3665)
        '1h 1m 5s'
    """
    seconds = int(round(seconds))
    hours = seconds // 3600
    minutes = (seconds % 3600) // 60
    secs = seconds % 60

    parts = []
    if hours > 0:
        parts.append(f"{hours}h")
    if minutes > 0:
        parts.append(f"{minutes}m")
    if secs > 0 or not parts:
        parts.append(f"{secs}s")

    return ' '.join(parts)


def relative_gap(value: float, reference: float) -> float:
    """
    |value − reference| / |reference|

    Examples:
        >>> relative_gap(1.01, 1.0) < 0.011
        True
    """
    return abs(value - reference) / max(abs(reference), 1e-300)
