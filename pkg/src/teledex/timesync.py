"""Per-frame timestamp validation and episode-level synchronization metrics."""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np


class SyncError(ValueError):
    pass


class MonotonicClock:
    """Wall-clock time base for live collection."""

    kind = "real-monotonic"

    def now(self) -> float:
        return time.monotonic()


class SimulatedClock:
    """Manually advanced clock; a single writer advances it."""

    kind = "simulated"

    def __init__(self, start: float = 0.0) -> None:
        self._now = float(start)
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._now

    def advance(self, dt: float) -> float:
        if dt < 0:
            raise ValueError("simulated time cannot run backwards")
        with self._lock:
            self._now += dt
            return self._now

    def set(self, t: float) -> None:
        with self._lock:
            if t < self._now:
                raise ValueError("simulated time cannot run backwards")
            self._now = float(t)


@dataclass(frozen=True)
class SyncPolicy:
    freshness_window: float = 1.0
    tolerance: float = 0.100

    def __post_init__(self) -> None:
        if not (self.freshness_window > 0 and self.tolerance > 0):
            raise ValueError("freshness window and tolerance must be positive")
        if self.tolerance > self.freshness_window:
            raise ValueError("tolerance must not exceed the freshness window")

    def to_dict(self) -> dict:
        return {"freshness_window": self.freshness_window, "tolerance": self.tolerance}


@dataclass(frozen=True)
class SyncFailure:
    kind: str  # "stale" | "inconsistent"
    source: str | None = None

    def __str__(self) -> str:
        return f"stale({self.source})" if self.kind == "stale" else self.kind


@dataclass(frozen=True)
class SyncBundle:
    is_valid: bool
    max_diff: float
    timestamps: Mapping[str, float] = field(hash=False)
    checked_at: float
    failure: SyncFailure | None = None


def validate(policy: SyncPolicy, now: float, timestamps: Mapping[str, float]) -> SyncBundle:
    """Freshness check, then consistency check, on one frame's source timestamps.

    A source is stale when ``|now - t| > freshness_window``; the first stale
    source in name order is reported. Otherwise the frame is inconsistent when
    ``max(t) - min(t) > tolerance``.
    """
    if not timestamps:
        raise SyncError("cannot validate an empty timestamp set")
    entries = dict(sorted(timestamps.items()))
    values = list(entries.values())
    if not all(math.isfinite(v) for v in values):
        raise SyncError("timestamps must be finite")
    max_diff = max(values) - min(values)
    failure = None
    for name, t in entries.items():
        if abs(now - t) > policy.freshness_window:
            failure = SyncFailure("stale", name)
            break
    else:
        if max_diff > policy.tolerance:
            failure = SyncFailure("inconsistent")
    return SyncBundle(failure is None, max_diff, entries, now, failure)


def shifted(bundle: SyncBundle, offset: float) -> SyncBundle:
    """``bundle`` with every time moved by ``offset`` (timestamps and check time)."""
    return replace(
        bundle,
        timestamps={k: v + offset for k, v in bundle.timestamps.items()},
        checked_at=bundle.checked_at + offset,
    )


def _columns(bundles: Iterable[SyncBundle]) -> tuple[np.ndarray, np.ndarray]:
    bundles = list(bundles)
    flags = np.array([b.is_valid for b in bundles], dtype=bool)
    diffs = np.array([b.max_diff for b in bundles], dtype=float)
    return flags, diffs


def success_rate(flags: Sequence[bool] | np.ndarray) -> float:
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        raise SyncError("no timesteps")
    return 100.0 * int(flags.sum()) / flags.size


def mean_error_ms(flags, max_diff) -> float:
    diffs = np.asarray(max_diff, dtype=float)[np.asarray(flags, dtype=bool)]
    if diffs.size == 0:
        raise SyncError("no successfully synchronized timesteps")
    return 1000.0 * float(diffs.mean())


def percentile_error_ms(flags, max_diff, p: float) -> float:
    """Nearest-rank percentile of max_diff over valid timesteps, in ms."""
    if not 0 < p <= 100:
        raise ValueError(f"percentile must lie in (0, 100], got {p}")
    diffs = np.sort(np.asarray(max_diff, dtype=float)[np.asarray(flags, dtype=bool)])
    if diffs.size == 0:
        raise SyncError("no successfully synchronized timesteps")
    # p * n first keeps integral ranks exact (99 * 100 / 100 == 99)
    rank = max(1, math.ceil(p * diffs.size / 100.0 - 1e-9))
    return 1000.0 * float(diffs[rank - 1])


def sync_success_rate(bundles: Iterable[SyncBundle]) -> float:
    flags, _ = _columns(bundles)
    return success_rate(flags)


def avg_sync_error(bundles: Iterable[SyncBundle]) -> float:
    return mean_error_ms(*_columns(bundles))


def percentile_sync_error(bundles: Iterable[SyncBundle], p: float) -> float:
    return percentile_error_ms(*_columns(bundles), p)
