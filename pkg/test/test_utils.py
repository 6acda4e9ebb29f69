"""Tests for utility functions."""

import threading

import pandas as pd

from aortaseg import utils


def test_thread_count(monkeypatch):
    """Unset, zero and invalid settings select one thread."""
    monkeypatch.delenv(utils.THREADS_ENV, raising=False)
    assert utils.thread_count() == 1
    for raw, expected in (("0", 1), ("3", 3), ("many", 1), ("", 1)):
        monkeypatch.setenv(utils.THREADS_ENV, raw)
        assert utils.thread_count() == expected


def test_parallel_map_keeps_order():
    """Results come back in item order on a pool."""
    lock = threading.Lock()
    seen = []

    def square(value):
        with lock:
            seen.append(value)
        return value * value

    squares = [v * v for v in range(20)]
    assert utils.parallel_map(square, list(range(20)), threads=4) == squares
    assert sorted(seen) == list(range(20))
    assert utils.parallel_map(square, [], threads=4) == []


def test_chunks():
    """Ranges cover the count in order."""
    assert [list(r) for r in utils.chunks(7, 3)] == [[0, 1, 2], [3, 4, 5], [6]]
    assert not list(utils.chunks(0, 3))


def test_format_value():
    """Undefined values print as NA."""
    assert utils.format_value(None) == "NA"
    assert utils.format_value(0.5) == "0.5000"


def test_prettify_table_string():
    """Tables are framed with rules and column separators."""
    table = pd.DataFrame({"dice": [1.0, 0.5]}, index=["arch", "descending"])
    text = utils.prettify_table_string(table)
    lines = text.splitlines()
    assert lines[0] == lines[-1]
    assert set(lines[0]) == {"-", "|"}
    assert all(line.endswith("|") for line in lines)
    assert "descending" in text
