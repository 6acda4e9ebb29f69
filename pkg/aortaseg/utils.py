"""aortaseg: Utility functions."""

from __future__ import annotations

import logging
import os
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

import pandas as pd

logger = logging.getLogger("aortaseg")

THREADS_ENV: str = "AORTASEG_THREADS"

T = TypeVar("T")
R = TypeVar("R")


def thread_count() -> int:
    """Return the number of worker threads allowed by the environment.

    Reads ``AORTASEG_THREADS``; unset, empty, zero or unparsable values select
    the single-threaded deterministic mode.

    Returns
    -------
    int
        Number of worker threads, at least 1.
    """
    raw = os.environ.get(THREADS_ENV, "").strip()
    try:
        count = int(raw) if raw else 0
    except ValueError:
        logger.warning("ignoring invalid %s=%s", THREADS_ENV, raw)
        count = 0
    return max(1, count)


def parallel_map(
    func: Callable[[T], R], items: Sequence[T], threads: int | None = None
) -> list[R]:
    """Apply a function to every item, optionally on a thread pool.

    Results are returned in item order whatever the schedule.

    Parameters
    ----------
    func : Callable
        Function applied to each item.
    items : Sequence
        Work items.
    threads : int | None, default None
        Worker count; ``None`` reads it from the environment.

    Returns
    -------
    list
        ``[func(item) for item in items]``.
    """
    workers = thread_count() if threads is None else max(1, threads)
    if workers == 1 or len(items) < 2:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def format_value(value: float | None, digits: int = 4) -> str:
    """Format a metric value, using ``NA`` for undefined entries."""
    if value is None:
        return "NA"
    return f"{value:.{digits}f}"


def chunks(count: int, size: int) -> Iterable[range]:
    """Split ``range(count)`` into consecutive ranges of at most ``size``."""
    size = max(1, size)
    for start in range(0, count, size):
        yield range(start, min(start + size, count))


def prettify_table_string(table: pd.DataFrame, separator: str | None = None) -> str:
    """
    Add delimiters to table.to_string() to improve readability for onscreen display.

    Splits fields on whitespace unless an optional separator is provided,
    e.g. ',' for csv.
    """
    hdelim = "-"
    vdelim = "|"

    table = table.rename(columns=lambda x: str(x).replace(" ", "_"))
    output = table.to_string(justify="left")
    as_strings = output.split("\n")
    nheaders = len(as_strings) - table.shape[0]
    rowlen = len(as_strings[0])

    # top level column labels and their positions
    if separator is not None:
        rowone_strings = as_strings[0].split(separator)
    else:
        rowone_strings = as_strings[0].split()
    positions = [as_strings[0].find(val) for val in rowone_strings[1:]]

    for row, _ in enumerate(as_strings):
        for pos in positions[::-1]:
            as_strings[row] = as_strings[row][0:pos] + vdelim + as_strings[row][pos:]
    rowlen += len(positions)

    rule = hdelim * rowlen + vdelim + "\n"
    outstr = rule
    for row in range(nheaders):
        outstr += as_strings[row] + vdelim + "\n"
    outstr += rule
    for row in range(nheaders, len(as_strings)):
        outstr += as_strings[row] + vdelim + "\n"
    outstr += rule
    return outstr
