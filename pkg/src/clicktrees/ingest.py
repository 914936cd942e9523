"""Parsing, normalization and cleaning of Click Log v1 streams.

A Click Log v1 file is UTF-8 text with one request per line and five
tab-separated fields::

    ts_ms <TAB> user_id <TAB> target_url <TAB> referrer_url|- <TAB> browser(0|1)

Lines starting with ``#`` and blank lines are ignored.
"""

from __future__ import annotations

import re
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

from .errors import ArgumentError, InvalidUrlError, OrderError, ParseError

PAGE_EXTENSIONS = frozenset(
    {
        "html", "htm", "shtml", "php", "php3", "asp", "aspx", "jsp", "jspx",
        "cfm", "cgi", "pl", "py", "do", "action",
    }
)

DEFAULT_BURST_WINDOW_MS = 1000
DEFAULT_MIN_REQUESTS = 2500
DEFAULT_MIN_JUMPS = 500

_SCHEME = re.compile(r"^[A-Za-z][A-Za-z0-9+.\-]*://")
_HOST = re.compile(r"^(?:[a-z0-9_\-.]+|\[[0-9a-f:.]+\])(?::[0-9]+)?$")


class Url(NamedTuple):
    """Normalized URL. A tuple so that hashing and equality run in C."""

    host: str
    path: str

    def __str__(self) -> str:
        return self.host + self.path


class ClickRecord(NamedTuple):
    ts_ms: int
    user: str
    target: Url
    referrer: Url | None
    is_browser: bool = True

    @property
    def is_jump(self) -> bool:
        return self.referrer is None


@dataclass(slots=True)
class UserStream:
    user: str
    records: list[ClickRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ClickRecord]:
        return iter(self.records)


@dataclass
class IngestCounts:
    """Tallies kept while reading a log; reported by the CLI."""

    lines: int = 0
    records: int = 0
    malformed: int = 0
    non_page: int = 0
    duplicates: int = 0
    low_activity_users: int = 0

    def merge(self, other: IngestCounts) -> IngestCounts:
        for name in self.__dataclass_fields__:
            setattr(self, name, getattr(self, name) + getattr(other, name))
        return self


@lru_cache(maxsize=1 << 20)
def normalize_url(raw: str) -> Url:
    """Drop scheme, query and fragment; lowercase the host.

    Accepts absolute URLs (``http://host/path``) and scheme-less
    ``host/path`` strings. The path defaults to ``/``; trailing slashes
    are otherwise left alone.
    """
    rest = raw.strip()
    m = _SCHEME.match(rest)
    if m:
        rest = rest[m.end():]
    elif rest.startswith("//"):
        rest = rest[2:]
    for sep in ("#", "?"):
        cut = rest.find(sep)
        if cut >= 0:
            rest = rest[:cut]
    slash = rest.find("/")
    if slash < 0:
        host, path = rest, "/"
    else:
        host, path = rest[:slash], rest[slash:]
    host = host.lower()
    if not host:
        raise InvalidUrlError(f"empty host in URL {raw!r}")
    if not _HOST.match(host):
        raise InvalidUrlError(f"invalid host {host!r} in URL {raw!r}")
    if any(c.isspace() for c in path):
        raise InvalidUrlError(f"whitespace in path of URL {raw!r}")
    return Url(host, path)


@lru_cache(maxsize=1 << 16)
def _is_page_segment(segment: str) -> bool:
    if not segment or "." not in segment:
        return True
    ext = segment.rsplit(".", 1)[1].lower()
    return ext == "" or ext in PAGE_EXTENSIONS


@lru_cache(maxsize=1 << 20)
def is_page_request(u: Url) -> bool:
    """Extension heuristic: directories, extensionless names and script/markup pages."""
    return _is_page_segment(u.path.rsplit("/", 1)[-1])


def parse_line(line: str, line_no: int | None = None) -> ClickRecord:
    fields = line.rstrip("\r\n").split("\t")
    if len(fields) != 5:
        raise ParseError(f"expected 5 fields, got {len(fields)}", line_no, line)
    ts, user, target, referrer, flag = fields
    if not (ts.isascii() and ts.isdigit()):
        raise ParseError(f"non-integer timestamp {ts!r}", line_no, line)
    if not user:
        raise ParseError("empty user id", line_no, line)
    if flag not in ("0", "1"):
        raise ParseError(f"browser flag must be 0 or 1, got {flag!r}", line_no, line)
    try:
        target_url = normalize_url(target)
        referrer_url = None if referrer == "-" else normalize_url(referrer)
    except InvalidUrlError as exc:
        raise ParseError(str(exc), line_no, line) from None
    return ClickRecord(int(ts), user, target_url, referrer_url, flag == "1")


def format_record(rec: ClickRecord) -> str:
    ref = "-" if rec.referrer is None else f"http://{rec.referrer}"
    return f"{rec.ts_ms}\t{rec.user}\thttp://{rec.target}\t{ref}\t{int(rec.is_browser)}\n"


def read_records(
    lines: Iterable[str], strict: bool = False, counts: IngestCounts | None = None
) -> Iterator[ClickRecord]:
    """Decode a Click Log v1 stream.

    Malformed lines are skipped and counted unless ``strict`` is set, in
    which case the first one raises :class:`ParseError`.
    """
    counts = counts if counts is not None else IngestCounts()
    for line_no, line in enumerate(lines, 1):
        counts.lines += 1
        if not line.strip() or line.startswith("#"):
            continue
        try:
            rec = parse_line(line, line_no)
        except ParseError:
            if strict:
                raise
            counts.malformed += 1
            continue
        counts.records += 1
        yield rec


def dedup_bursts(s: UserStream, window_ms: int = DEFAULT_BURST_WINDOW_MS) -> UserStream:
    """Collapse runs of identical (referrer, target) requests.

    A request is dropped when the previous request with the same pair,
    kept or not, happened at most ``window_ms`` earlier.
    """
    if window_ms < 0:
        raise ArgumentError("window_ms must be >= 0")
    last_seen: dict[tuple[Url | None, Url], int] = {}
    kept = []
    for rec in s.records:
        key = (rec.referrer, rec.target)
        prev = last_seen.get(key)
        last_seen[key] = rec.ts_ms
        if prev is None or rec.ts_ms - prev > window_ms:
            kept.append(rec)
    return UserStream(s.user, kept)


def group_users(records: Iterable[ClickRecord]) -> list[UserStream]:
    """Partition by user, stably sorted by timestamp; streams ordered by user id."""
    by_user: dict[str, list[ClickRecord]] = {}
    for rec in records:
        by_user.setdefault(rec.user, []).append(rec)
    return [
        UserStream(user, sorted(recs, key=lambda r: r.ts_ms))
        for user, recs in sorted(by_user.items())
    ]


def filter_low_activity(
    streams: Iterable[UserStream],
    min_requests: int = DEFAULT_MIN_REQUESTS,
    min_jumps: int = DEFAULT_MIN_JUMPS,
) -> tuple[list[UserStream], int]:
    """Keep streams with enough requests AND enough empty-referrer requests.

    Returns the kept streams and the number removed.
    """
    if min_requests < 0 or min_jumps < 0:
        raise ArgumentError("activity thresholds must be >= 0")
    kept, removed = [], 0
    for s in streams:
        jumps = sum(1 for r in s.records if r.referrer is None)
        if len(s.records) >= min_requests and jumps >= min_jumps:
            kept.append(s)
        else:
            removed += 1
    return kept, removed


def clean_stream(s: UserStream, window_ms: int = DEFAULT_BURST_WINDOW_MS) -> UserStream:
    """Page-request filter followed by burst removal."""
    pages = UserStream(s.user, [r for r in s.records if is_page_request(r.target)])
    return dedup_bursts(pages, window_ms)


class StreamCleaner:
    """Incremental page filter + burst removal for per-user ordered input.

    Equivalent to :func:`clean_stream` applied per user, but keeps only
    per-user state. Raises :class:`OrderError` when a user's timestamps go
    backwards, since burst removal is defined on time-ordered streams.
    """

    _PRUNE_MIN = 64

    def __init__(self, window_ms: int = DEFAULT_BURST_WINDOW_MS, counts: IngestCounts | None = None):
        if window_ms < 0:
            raise ArgumentError("window_ms must be >= 0")
        self.window_ms = window_ms
        self.counts = counts if counts is not None else IngestCounts()
        self._last_ts: dict[str, int] = {}
        self._pairs: dict[str, dict] = {}
        self._prune_at: dict[str, int] = {}

    def accept(self, rec: ClickRecord) -> bool:
        user = rec.user
        last = self._last_ts.get(user)
        if last is not None and rec.ts_ms < last:
            raise OrderError(f"user {user!r}: timestamp {rec.ts_ms} after {last}")
        self._last_ts[user] = rec.ts_ms
        if not is_page_request(rec.target):
            self.counts.non_page += 1
            return False
        pairs = self._pairs.get(user)
        if pairs is None:
            pairs = self._pairs[user] = {}
            self._prune_at[user] = self._PRUNE_MIN
        key = (rec.referrer, rec.target)
        prev = pairs.get(key)
        pairs[key] = rec.ts_ms
        if prev is not None and rec.ts_ms - prev <= self.window_ms:
            self.counts.duplicates += 1
            return False
        if len(pairs) > self._prune_at[user]:
            # pairs last seen before the window can never mark a duplicate again;
            # doubling the limit keeps pruning amortized O(1) per record
            horizon = rec.ts_ms - self.window_ms
            pairs = self._pairs[user] = {k: t for k, t in pairs.items() if t >= horizon}
            self._prune_at[user] = max(self._PRUNE_MIN, 2 * len(pairs))
        return True

    def __call__(self, records: Iterable[ClickRecord]) -> Iterator[ClickRecord]:
        accept = self.accept
        for rec in records:
            if accept(rec):
                yield rec
