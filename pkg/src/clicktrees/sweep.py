"""Session statistics as a function of timeout, for both timeout mechanisms."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass

from .errors import ArgumentError, InsufficientDataError
from .ingest import UserStream
from .session import LogicalSessionizer, SessionTree

DEFAULT_TIMEOUTS_S = (30, 60, 120, 300, 600, 900, 1800, 3600)

SWEEP_COLUMNS = (
    "timeout_s", "mechanism", "sessions_per_user",
    "mean_duration_s", "mean_hosts", "mean_requests",
    "mean_nodes", "mean_depth", "mean_ratio",
)


@dataclass(frozen=True)
class SweepRow:
    timeout_s: float
    mechanism: str
    sessions_per_user: float
    mean_duration_s: float | None = None
    mean_hosts: float | None = None
    mean_requests: float | None = None
    mean_nodes: float | None = None
    mean_depth: float | None = None
    mean_ratio: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)

    def stats(self) -> tuple:
        """The measured values alone, for comparing rows across timeouts."""
        d = asdict(self)
        del d["timeout_s"], d["mechanism"]
        return tuple(d.items())


def _validate(streams: Sequence[UserStream], timeouts: Sequence[float]) -> list[UserStream]:
    if not timeouts:
        raise ArgumentError("timeout grid must be non-empty")
    if any(t <= 0 for t in timeouts):
        raise ArgumentError("timeouts must be positive")
    if any(b <= a for a, b in zip(timeouts, timeouts[1:])):
        raise ArgumentError("timeouts must be strictly ascending")
    users = [s for s in streams if s.records]
    if not users:
        raise InsufficientDataError("no non-empty user streams to sweep")
    return users


def _timeout_row(users: list[UserStream], timeout_s: float) -> SweepRow:
    timeout_ms = round(timeout_s * 1000)
    sessions = duration_ms = requests = hosts = 0
    for s in users:
        recs = s.records
        start = 0
        for i in range(1, len(recs) + 1):
            if i == len(recs) or recs[i].ts_ms - recs[i - 1].ts_ms > timeout_ms:
                sessions += 1
                duration_ms += recs[i - 1].ts_ms - recs[start].ts_ms
                requests += i - start
                hosts += len({r.target.host for r in recs[start:i]})
                start = i
    return SweepRow(
        timeout_s=float(timeout_s),
        mechanism="timeout",
        sessions_per_user=sessions / len(users),
        mean_duration_s=duration_ms / sessions / 1000.0,
        mean_hosts=hosts / sessions,
        mean_requests=requests / sessions,
    )


def timeout_sweep(streams: Sequence[UserStream], timeouts: Sequence[float] = DEFAULT_TIMEOUTS_S) -> list[SweepRow]:
    """Pooled per-session means and per-user session counts at each timeout (seconds)."""
    users = _validate(streams, timeouts)
    return [_timeout_row(users, t) for t in timeouts]


class _TreeTally:
    def __init__(self):
        self.count = 0
        self.nodes = 0
        self.depth = 0
        self.ratios: list[float] = []

    def __call__(self, tree: SessionTree) -> None:
        self.count += 1
        n = len(tree.nodes)
        self.nodes += n
        self.depth += tree.max_depth
        self.ratios.append(n / tree.max_depth)


def _logical_row(users: list[UserStream], timeout_s: float | None) -> SweepRow:
    timeout_ms = None if timeout_s is None else round(timeout_s * 1000)
    tally = _TreeTally()
    for s in users:
        engine = LogicalSessionizer(s.user, timeout_ms, on_close=tally)
        for r in s.records:
            engine.add(r.ts_ms, r.referrer, r.target)
        engine.finish()
    return SweepRow(
        timeout_s=math.inf if timeout_s is None else float(timeout_s),
        mechanism="logical_timeout" if timeout_s is not None else "logical",
        sessions_per_user=tally.count / len(users),
        mean_nodes=tally.nodes / tally.count,
        mean_depth=tally.depth / tally.count,
        # fsum keeps the mean independent of the order trees were closed in
        mean_ratio=math.fsum(tally.ratios) / tally.count,
    )


def logical_timeout_sweep(streams: Sequence[UserStream], timeouts: Sequence[float] = DEFAULT_TIMEOUTS_S) -> list[SweepRow]:
    users = _validate(streams, timeouts)
    return [_logical_row(users, t) for t in timeouts]


def logical_row(streams: Sequence[UserStream]) -> SweepRow:
    """The timeout-free reference row the logical sweep converges to."""
    users = [s for s in streams if s.records]
    if not users:
        raise InsufficientDataError("no non-empty user streams")
    return _logical_row(users, None)
