"""Lightweight call counters for asserting which stages a run touched."""

from __future__ import annotations

_counts: dict[str, int] = {}

__all__ = ["bump", "count", "reset"]


def bump(name: str) -> None:
    _counts[name] = _counts.get(name, 0) + 1


def count(name: str) -> int:
    return _counts.get(name, 0)


def reset() -> None:
    _counts.clear()
