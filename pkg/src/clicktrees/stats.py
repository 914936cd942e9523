"""Per-host traffic and per-user behavioural statistics."""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError
from .ingest import ClickRecord, UserStream
from .session import SessionMetrics, SessionTree, tree_metrics

DEFAULT_MIN_RATE_REQUESTS = 50


@dataclass
class HostStats:
    host: str
    in_strength: int = 0
    out_strength: int = 0
    in_users: set[str] = field(default_factory=set)
    out_users: set[str] = field(default_factory=set)

    def merge(self, other: HostStats) -> HostStats:
        return HostStats(
            self.host,
            self.in_strength + other.in_strength,
            self.out_strength + other.out_strength,
            self.in_users | other.in_users,
            self.out_users | other.out_users,
        )


@dataclass
class UserProfile:
    user: str
    total_requests: int
    jump_requests: int
    active_span_s: float
    distinct_ref_hosts: int
    distinct_target_hosts: int
    interclicks_s: np.ndarray

    @property
    def jump_ratio(self) -> float:
        return self.jump_requests / self.total_requests

    @property
    def rate_rps(self) -> float | None:
        """Requests per second over the active span; None when the span is zero."""
        if self.active_span_s <= 0:
            return None
        return self.total_requests / self.active_span_s

    @property
    def rate_undefined(self) -> bool:
        return self.rate_rps is None

    @property
    def ref_host_ratio(self) -> float | None:
        if self.distinct_target_hosts == 0:
            return None
        return self.distinct_ref_hosts / self.distinct_target_hosts

    @property
    def positive_interclicks(self) -> np.ndarray:
        """Interclick times usable on a log scale (same-millisecond pairs removed)."""
        return self.interclicks_s[self.interclicks_s > 0]

    @property
    def zero_interclicks(self) -> int:
        return int(np.count_nonzero(self.interclicks_s == 0))


def host_stats(records: Iterable[ClickRecord]) -> dict[str, HostStats]:
    """In/out strength and distinct in/out users per host, sorted by host."""
    out: dict[str, HostStats] = {}
    for rec in records:
        h = out.get(rec.target.host)
        if h is None:
            h = out[rec.target.host] = HostStats(rec.target.host)
        h.in_strength += 1
        h.in_users.add(rec.user)
        if rec.referrer is not None:
            h = out.get(rec.referrer.host)
            if h is None:
                h = out[rec.referrer.host] = HostStats(rec.referrer.host)
            h.out_strength += 1
            h.out_users.add(rec.user)
    return dict(sorted(out.items()))


def merge_host_stats(a: Mapping[str, HostStats], b: Mapping[str, HostStats]) -> dict[str, HostStats]:
    merged = dict(a)
    for host, hs in b.items():
        merged[host] = merged[host].merge(hs) if host in merged else hs
    return dict(sorted(merged.items()))


def user_profile(s: UserStream) -> UserProfile:
    if not s.records:
        raise ArgumentError(f"user {s.user!r} has an empty stream")
    ts = np.fromiter((r.ts_ms for r in s.records), dtype=np.int64, count=len(s.records))
    ref_hosts = {r.referrer.host for r in s.records if r.referrer is not None}
    target_hosts = {r.target.host for r in s.records}
    return UserProfile(
        user=s.user,
        total_requests=len(s.records),
        jump_requests=sum(1 for r in s.records if r.referrer is None),
        active_span_s=(int(ts[-1]) - int(ts[0])) / 1000.0,
        distinct_ref_hosts=len(ref_hosts),
        distinct_target_hosts=len(target_hosts),
        interclicks_s=np.diff(ts) / 1000.0,
    )


def rate_filter(profiles: Iterable[UserProfile], min_mean_requests: int = DEFAULT_MIN_RATE_REQUESTS) -> list[UserProfile]:
    if min_mean_requests < 0:
        raise ArgumentError("min_mean_requests must be >= 0")
    return [p for p in profiles if p.total_requests >= min_mean_requests]


def portal_report(records: Iterable[ClickRecord], portal_hosts: Iterable[str]) -> dict[str, float]:
    """Fraction of each user's requests whose target or referrer is a portal host."""
    portals = {h.lower() for h in portal_hosts}
    if not portals:
        raise ArgumentError("portal host set must be non-empty")
    touched: dict[str, int] = {}
    total: dict[str, int] = {}
    for rec in records:
        total[rec.user] = total.get(rec.user, 0) + 1
        hit = rec.target.host in portals or (rec.referrer is not None and rec.referrer.host in portals)
        touched[rec.user] = touched.get(rec.user, 0) + hit
    return {u: touched[u] / total[u] for u in sorted(total)}


@dataclass
class SessionProfile:
    """Per-user averages over logical sessions (non-trivial trees by default)."""

    user: str
    sessions: int
    counted: int
    mean_requests: float | None
    mean_nodes: float | None
    mean_depth: float | None
    mean_ratio: float | None
    durations_s: np.ndarray


def _as_metrics(item) -> SessionMetrics:
    if isinstance(item, SessionMetrics):
        return item
    if isinstance(item, SessionTree):
        return tree_metrics(item)
    return item.metrics


def session_profile(sessions: Iterable, user: str = "", nontrivial: bool = True) -> SessionProfile:
    """Summarize one user's sessions (trees, summaries or metrics).

    Means skip single-node trees when ``nontrivial`` is set; the duration
    sample always covers every session.
    """
    sessions = list(sessions)
    if not user and sessions:
        user = getattr(sessions[0], "user", "")
    ms = [_as_metrics(x) for x in sessions]
    use = [m for m in ms if not (nontrivial and m.is_trivial)]
    k = len(use)
    return SessionProfile(
        user=user,
        sessions=len(ms),
        counted=k,
        mean_requests=sum(m.request_count for m in use) / k if k else None,
        mean_nodes=sum(m.node_count for m in use) / k if k else None,
        mean_depth=sum(m.depth for m in use) / k if k else None,
        mean_ratio=float(np.mean([m.node_depth_ratio for m in use])) if k else None,
        durations_s=np.array([m.duration_ms / 1000.0 for m in ms]),
    )
