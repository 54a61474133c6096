"""
Utility functions shared across the lab.
"""

import hashlib
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Iterable, List, TypeVar

import numpy as np

from exceptions import NumericalError

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def derive_seed(global_seed: int, stage: str) -> int:
    """
    Derive a stage seed from the global seed and the stage name.

    The derivation is the first 4 bytes of sha256("<global_seed>:<stage>"),
    big-endian, so it is stable across processes and Python versions.

    Args:
        global_seed: Experiment-wide seed
        stage: Stage name, e.g. "pretrain" or "train:mock:B"

    Returns:
        A 32-bit seed
    """
    digest = hashlib.sha256(f"{global_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def file_sha256(path: Path) -> str:
    """Content hash of a file."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(config: dict) -> str:
    """Hash of a JSON-serializable config snapshot (key order independent)."""
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def ensure_finite(array: np.ndarray, context: str) -> np.ndarray:
    """
    Raise if an array holds NaN or Inf.

    Args:
        array: Values to check
        context: What produced the values, for the error message

    Returns:
        The array, unchanged
    """
    if not np.all(np.isfinite(array)):
        bad = int(np.size(array) - np.count_nonzero(np.isfinite(array)))
        logger.error(f"Non-finite values in {context}: {bad} entries")
        raise NumericalError(f"{context}: {bad} non-finite values")
    return array


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> List[R]:
    """
    Map fn over items, preserving order.

    Work items must be independent; numpy releases the GIL inside the heavy
    kernels so threads give real speedup on per-example graphs.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def artifact_name(*parts: Any) -> str:
    """
    Build a filesystem-safe artifact stem from parts.

    Args:
        parts: Name components; floats are rendered compactly

    Returns:
        Sanitized name such as "A_pgd_eps8"
    """
    rendered = []
    for part in parts:
        if isinstance(part, float):
            part = f"eps{part:g}"
        rendered.append(str(part))
    name = "_".join(rendered)
    name = re.sub(r'[<>:"/\\|?*\s]', '_', name)
    return name[:200]


def write_json(path: Path, data: Any) -> None:
    """Write JSON with a stable layout."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
