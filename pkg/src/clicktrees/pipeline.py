"""File-to-file pipelines with bounded memory.

Streaming passes keep only per-user state: the burst-removal window, the
URL-to-session map and the sessions that can still grow. Finished
sessions are spooled through sorted on-disk runs, so the final output is
ordered by (user, session id) whatever order sessions closed in and
however many worker processes took part. Users are sharded across
workers by a stable hash of their id.
"""

from __future__ import annotations

import contextlib
import gc
import heapq
import os
import tempfile
import zlib
from collections import deque
from collections.abc import Callable, Iterable, Iterator
from dataclasses import dataclass, field
from multiprocessing import get_context
from typing import IO

from .errors import ArgumentError, ParseError
from .formats import dumps, group_row, tree_row
from .ingest import (
    ClickRecord,
    IngestCounts,
    StreamCleaner,
    UserStream,
    clean_stream,
    filter_low_activity,
    format_record,
    group_users,
    is_page_request,
    parse_line,
    read_records,
)
from .session import (
    LogicalSessionizer,
    SessionTree,
    logical_sessions,
    logical_sessions_timeout,
    rolling_avg_sessions,
    timeout_sessions,
)

MECHANISMS = ("logical", "logical_timeout", "timeout", "rolling")
SPOOL_RUN = 200_000


@dataclass
class SessionizeOptions:
    mechanism: str = "logical"
    timeout_ms: int | None = None
    window_ms: int | None = None
    threshold: float | None = None
    burst_window_ms: int = 1000
    strict: bool = False
    full: bool = False
    low_activity: tuple[int, int] | None = None

    def validate(self) -> SessionizeOptions:
        if self.mechanism not in MECHANISMS:
            raise ArgumentError(f"unknown mechanism {self.mechanism!r}")
        if self.mechanism in ("logical_timeout", "timeout") and (self.timeout_ms is None or self.timeout_ms <= 0):
            raise ArgumentError(f"{self.mechanism} needs a positive timeout")
        if self.mechanism == "rolling":
            if self.window_ms is None or self.window_ms <= 0:
                raise ArgumentError("rolling needs a positive window")
            if self.threshold is None or not self.threshold > 0:
                raise ArgumentError("rolling needs a positive threshold")
        if self.burst_window_ms < 0:
            raise ArgumentError("burst window must be >= 0")
        return self


@dataclass
class RunReport:
    counts: IngestCounts = field(default_factory=IngestCounts)
    records_out: int = 0
    users: int = 0
    sessions: int = 0

    def merge(self, other: RunReport) -> RunReport:
        self.counts.merge(other.counts)
        self.records_out += other.records_out
        self.users += other.users
        self.sessions += other.sessions
        return self


@contextlib.contextmanager
def gc_paused():
    """Suspend the cyclic collector for a streaming pass.

    Per-user state holds millions of small acyclic objects; with the
    collector on, each full collection rescans all of them and a pass
    becomes superlinear in log size.
    """
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


def shard_of(user: str, shards: int) -> int:
    return zlib.crc32(user.encode("utf-8")) % shards


class SortedSpool:
    """External sort of (user, id, text) rows through temporary run files."""

    def __init__(self, run_size: int = SPOOL_RUN, tmpdir: str | None = None):
        self.run_size = run_size
        self.tmpdir = tmpdir
        self.buffer: list[tuple[str, int, str]] = []
        self.runs: list[str] = []

    def add(self, user: str, sid: int, text: str) -> None:
        self.buffer.append((user, sid, text))
        if len(self.buffer) >= self.run_size:
            self.flush()

    def flush(self) -> None:
        if not self.buffer:
            return
        self.buffer.sort()
        fd, path = tempfile.mkstemp(prefix="clicktrees-run-", suffix=".tsv", dir=self.tmpdir)
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            for user, sid, text in self.buffer:
                fh.write(f"{user}\t{sid}\t{text}\n")
        self.runs.append(path)
        self.buffer = []


def _read_run(path: str) -> Iterator[tuple[str, int, str]]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            user, sid, text = line.rstrip("\n").split("\t", 2)
            yield user, int(sid), text


def merge_runs(runs: list[str]) -> Iterator[str]:
    try:
        for _, _, text in heapq.merge(*(_read_run(p) for p in runs)):
            yield text
    finally:
        for p in runs:
            try:
                os.unlink(p)
            except OSError:
                pass


class _TimeoutEngine:
    """Streaming counterpart of :func:`timeout_sessions` for one user."""

    def __init__(self, user: str, timeout_ms: int, emit: Callable[[dict], None], mechanism="timeout"):
        self.user, self.timeout_ms, self.emit, self.mechanism = user, timeout_ms, emit, mechanism
        self.next_id = 0
        self.start = self.last = None
        self.count = 0
        self.hosts: set[str] = set()

    def _split(self, rec: ClickRecord) -> bool:
        return rec.ts_ms - self.last > self.timeout_ms

    def add(self, rec: ClickRecord) -> None:
        if self.start is not None and self._split(rec):
            self._close()
        if self.start is None:
            self.start = rec.ts_ms
        self.last = rec.ts_ms
        self.count += 1
        self.hosts.add(rec.target.host)

    def _close(self) -> None:
        self.emit({"user": self.user, "id": self.next_id, "mechanism": self.mechanism,
                   "created_ts": self.start, "duration_ms": self.last - self.start,
                   "request_count": self.count, "hosts": len(self.hosts)})
        self.next_id += 1
        self.start = self.last = None
        self.count = 0
        self.hosts = set()

    def finish(self) -> None:
        if self.start is not None:
            self._close()


class _RollingEngine(_TimeoutEngine):
    """Streaming counterpart of :func:`rolling_avg_sessions`."""

    def __init__(self, user: str, window_ms: int, threshold: float, emit):
        super().__init__(user, window_ms, emit, mechanism="rolling")
        self.threshold = threshold
        self.window: deque[int] = deque()

    def _split(self, rec: ClickRecord) -> bool:
        w = self.window
        while w and w[0] <= rec.ts_ms - self.timeout_ms:
            w.popleft()
        return len(w) + 1 <= self.threshold

    def add(self, rec: ClickRecord) -> None:
        super().add(rec)
        self.window.append(rec.ts_ms)


class _LogicalEngine:
    def __init__(self, user: str, opts: SessionizeOptions, emit_tree: Callable[[SessionTree], None]):
        timeout = opts.timeout_ms if opts.mechanism == "logical_timeout" else None
        self.engine = LogicalSessionizer(user, timeout, on_close=emit_tree)

    def add(self, rec: ClickRecord) -> None:
        self.engine.add(rec.ts_ms, rec.referrer, rec.target)

    def finish(self) -> None:
        self.engine.finish()


def _make_engine(user: str, opts: SessionizeOptions, spool: SortedSpool, report: RunReport):
    def emit(row: dict) -> None:
        report.sessions += 1
        spool.add(row["user"], row["id"], dumps(row))

    if opts.mechanism in ("logical", "logical_timeout"):
        def emit_tree(tree: SessionTree) -> None:
            report.sessions += 1
            spool.add(tree.user, tree.id, dumps(tree_row(tree, opts.mechanism, opts.full)))
        return _LogicalEngine(user, opts, emit_tree)
    if opts.mechanism == "timeout":
        return _TimeoutEngine(user, opts.timeout_ms, emit)
    return _RollingEngine(user, opts.window_ms, opts.threshold, emit)


def _shard_records(path: str, shard: int, shards: int, strict: bool, counts: IngestCounts) -> Iterator[ClickRecord]:
    """Parse only the lines whose user falls in this shard."""
    lines = records = malformed = 0
    try:
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                if shards > 1:
                    # lines without a user field (comments, junk) belong to shard 0
                    parts = line.split("\t", 2)
                    owner = shard_of(parts[1], shards) if len(parts) > 1 else 0
                    if owner != shard:
                        continue
                lines += 1
                if line[0] == "#" or not line.strip():
                    continue
                try:
                    rec = parse_line(line, line_no)
                except ParseError:
                    if strict:
                        raise
                    malformed += 1
                    continue
                records += 1
                yield rec
    finally:
        counts.lines += lines
        counts.records += records
        counts.malformed += malformed


def _activity_pass(path: str, shard: int, shards: int, opts: SessionizeOptions) -> set[str]:
    """Users failing the low-activity thresholds, judged on cleaned records."""
    totals: dict[str, list[int]] = {}
    cleaner = StreamCleaner(opts.burst_window_ms)
    for rec in cleaner(_shard_records(path, shard, shards, opts.strict, IngestCounts())):
        t = totals.setdefault(rec.user, [0, 0])
        t[0] += 1
        t[1] += rec.referrer is None
    min_req, min_jumps = opts.low_activity
    return {u for u, (n, j) in totals.items() if n < min_req or j < min_jumps}


def _sessionize_shard(path: str, shard: int, shards: int, opts: SessionizeOptions, tmpdir: str | None):
    report = RunReport()
    dropped = _activity_pass(path, shard, shards, opts) if opts.low_activity else set()
    report.counts.low_activity_users = len(dropped)
    spool = SortedSpool(tmpdir=tmpdir)
    engines: dict[str, object] = {}
    accept = StreamCleaner(opts.burst_window_ms, report.counts).accept
    for rec in _shard_records(path, shard, shards, opts.strict, report.counts):
        if not accept(rec) or rec.user in dropped:
            continue
        eng = engines.get(rec.user)
        if eng is None:
            eng = engines[rec.user] = _make_engine(rec.user, opts, spool, report)
        eng.add(rec)
        report.records_out += 1
    for user in sorted(engines):
        engines[user].finish()
    spool.flush()
    report.users = len(engines)
    return report, spool.runs


def _shard_job(args):
    with gc_paused():
        return _sessionize_shard(*args)


def sessionize_file(path: str, out: IO[str], opts: SessionizeOptions, workers: int = 1,
                    tmpdir: str | None = None) -> RunReport:
    """Stream a Click Log v1 file into session JSONL, ordered by user then id.

    Requires every user's records to be in timestamp order in the file;
    raises :class:`~clicktrees.errors.OrderError` otherwise (see
    :func:`sessionize_in_memory`).
    """
    opts.validate()
    if workers < 1:
        raise ArgumentError("workers must be >= 1")
    jobs = [(path, k, workers, opts, tmpdir) for k in range(workers)]
    if workers == 1:
        results = [_shard_job(jobs[0])]
    else:
        with get_context("spawn").Pool(workers) as pool:
            results = pool.map(_shard_job, jobs)
    report = RunReport()
    runs: list[str] = []
    for r, shard_runs in results:
        report.merge(r)
        runs.extend(shard_runs)
    for text in merge_runs(runs):
        out.write(text + "\n")
    return report


def load_streams(
    lines: Iterable[str],
    strict: bool = False,
    burst_window_ms: int = 1000,
    low_activity: tuple[int, int] | None = None,
    counts: IngestCounts | None = None,
) -> list[UserStream]:
    """Read, group and clean a whole log in memory."""
    counts = counts if counts is not None else IngestCounts()
    streams = []
    for s in group_users(read_records(lines, strict, counts)):
        cleaned = clean_stream(s, burst_window_ms)
        non_page = sum(1 for r in s.records if not is_page_request(r.target))
        counts.non_page += non_page
        counts.duplicates += len(s) - len(cleaned) - non_page
        if cleaned.records:
            streams.append(cleaned)
    if low_activity is not None:
        streams, removed = filter_low_activity(streams, *low_activity)
        counts.low_activity_users += removed
    return streams


def sessionize_streams(streams: Iterable[UserStream], out: IO[str], opts: SessionizeOptions) -> RunReport:
    """In-memory sessionization of already cleaned streams; same output as the streaming path."""
    opts.validate()
    report = RunReport()
    for s in sorted(streams, key=lambda s: s.user):
        report.users += 1
        report.records_out += len(s)
        if opts.mechanism == "logical":
            rows = [tree_row(t, "logical", opts.full) for t in logical_sessions(s)]
        elif opts.mechanism == "logical_timeout":
            rows = [tree_row(t, "logical_timeout", opts.full)
                    for t in logical_sessions_timeout(s, opts.timeout_ms)]
        elif opts.mechanism == "timeout":
            rows = [group_row(s.user, i, g, "timeout")
                    for i, g in enumerate(timeout_sessions(s, opts.timeout_ms))]
        else:
            rows = [group_row(s.user, i, g, "rolling")
                    for i, g in enumerate(rolling_avg_sessions(s, opts.window_ms, opts.threshold))]
        for row in rows:
            out.write(dumps(row) + "\n")
        report.sessions += len(rows)
    return report


def sessionize_in_memory(lines: Iterable[str], out: IO[str], opts: SessionizeOptions) -> RunReport:
    counts = IngestCounts()
    streams = load_streams(lines, opts.strict, opts.burst_window_ms, opts.low_activity, counts)
    report = sessionize_streams(streams, out, opts)
    report.counts = counts
    return report


def ingest_file(path: str, out: IO[str], strict: bool = False, burst_window_ms: int = 1000) -> RunReport:
    """Normalize and clean a log, preserving input order. Needs per-user time order."""
    report = RunReport()
    cleaner = StreamCleaner(burst_window_ms, report.counts)
    users = set()
    with open(path, encoding="utf-8") as fh, gc_paused():
        for rec in cleaner(read_records(fh, strict, report.counts)):
            out.write(format_record(rec))
            users.add(rec.user)
            report.records_out += 1
    report.users = len(users)
    return report


def ingest_in_memory(lines: Iterable[str], out: IO[str], strict: bool = False, burst_window_ms: int = 1000) -> RunReport:
    """Like :func:`ingest_file` for input whose users are not time-ordered.

    Cleaning happens on each user's sorted stream; survivors are written
    in their original input order.
    """
    report = RunReport()
    records = list(read_records(lines, strict, report.counts))
    streams = [clean_stream(s, burst_window_ms) for s in group_users(records)]
    keep = {id(r) for s in streams for r in s.records}
    for rec in records:
        if id(rec) in keep:
            out.write(format_record(rec))
            report.records_out += 1
    report.users = sum(1 for s in streams if s.records)
    return report
