"""Thread-count control for the sample-parallel reductions.

Work is always split into the same fixed chunks, and partial results are
combined in chunk order, so the thread count never changes the arithmetic.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

ENV_VAR = "AGOP_COLLAPSE_THREADS"

_threads = 1


def set_threads(n: int) -> None:
    global _threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _threads = int(n)


def get_threads() -> int:
    return _threads


def resolve_threads(cli_value: int | None) -> int:
    """The environment variable wins over the command-line flag."""
    env = os.environ.get(ENV_VAR)
    if env:
        return max(1, int(env))
    return max(1, int(cli_value or 1))


def chunks(n: int, size: int) -> list[slice]:
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def map_ordered(fn: Callable, items: Sequence, threads: int | None = None) -> list:
    threads = _threads if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def ordered_sum(parts: list):
    total = parts[0].copy()
    for p in parts[1:]:
        total += p
    return total
