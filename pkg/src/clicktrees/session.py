"""Session segmentation: referrer trees, inactivity timeouts, rolling rate.

Logical sessions follow the referrer chain. Each request is filed under
the session that most recently used its referring URL; an empty referrer
always opens a new tree, and a referrer never seen before becomes the
root of a fresh two-node tree. A user may have many trees open at once.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

from .errors import ArgumentError, OrderError
from .ingest import ClickRecord, Url, UserStream


@dataclass(slots=True)
class Node:
    url: Url
    parent: Url | None
    depth: int
    added_ts: int
    request_count: int


@dataclass(frozen=True, slots=True)
class SessionMetrics:
    node_count: int
    request_count: int
    depth: int
    duration_ms: int

    @property
    def node_depth_ratio(self) -> float:
        return self.node_count / self.depth

    @property
    def is_trivial(self) -> bool:
        return self.node_count < 2


@dataclass(slots=True)
class SessionTree:
    id: int
    user: str
    root: Url
    nodes: dict[Url, Node]
    created_ts: int
    last_attach_ts: int
    # running totals, so a tree can be summarized without walking its nodes
    requests: int = 0
    max_depth: int = 1
    refs: int = field(default=0, repr=False, compare=False)

    def summary(self) -> SessionSummary:
        return SessionSummary(
            self.user, self.id, self.created_ts,
            SessionMetrics(len(self.nodes), self.requests, self.max_depth,
                           self.last_attach_ts - self.created_ts),
            self.root.host,
        )


@dataclass(frozen=True, slots=True)
class SessionSummary:
    """What survives of a tree once its nodes are released."""

    user: str
    id: int
    created_ts: int
    metrics: SessionMetrics
    root_host: str


@dataclass(slots=True)
class TimeoutSession:
    records: list[ClickRecord]

    @property
    def duration_ms(self) -> int:
        return self.records[-1].ts_ms - self.records[0].ts_ms

    @property
    def request_count(self) -> int:
        return len(self.records)

    @property
    def hosts(self) -> int:
        return len({r.target.host for r in self.records})


def tree_metrics(t: SessionTree) -> SessionMetrics:
    return SessionMetrics(
        node_count=len(t.nodes),
        request_count=sum(n.request_count for n in t.nodes.values()),
        depth=max(n.depth for n in t.nodes.values()),
        duration_ms=t.last_attach_ts - t.created_ts,
    )


class LogicalSessionizer:
    """Incremental referrer-tree builder for a single user.

    With ``timeout_ms`` set, a request may only attach to a tree when its
    referrer node was added no more than ``timeout_ms`` before it.

    When ``on_close`` is given, a tree is handed to it (and forgotten) as
    soon as no URL maps to it any more, since such a tree can never grow
    again. Otherwise all trees are kept in :attr:`trees`.
    """

    def __init__(
        self,
        user: str,
        timeout_ms: int | None = None,
        on_close: Callable[[SessionTree], None] | None = None,
    ):
        if timeout_ms is not None and timeout_ms <= 0:
            raise ArgumentError("timeout_ms must be positive")
        self.user = user
        self.timeout_ms = timeout_ms
        self.on_close = on_close
        self.trees: list[SessionTree] = []
        self._where: dict[Url, SessionTree] = {}
        self._next_id = 0
        self._last_ts: int | None = None

    def _open(self, root: Url, ts: int, count: int) -> SessionTree:
        tree = SessionTree(
            self._next_id, self.user, root,
            {root: Node(root, None, 1, ts, count)}, ts, ts, requests=count,
        )
        self._next_id += 1
        if self.on_close is None:
            self.trees.append(tree)
        return tree

    def _point(self, url: Url, tree: SessionTree) -> None:
        old = self._where.get(url)
        if old is tree:
            return
        self._where[url] = tree
        tree.refs += 1
        if old is not None:
            old.refs -= 1
            if old.refs == 0 and self.on_close is not None:
                self.on_close(old)

    def add(self, ts: int, referrer: Url | None, target: Url) -> int:
        """File one request; returns the id of the session it joined."""
        if self._last_ts is not None and ts < self._last_ts:
            raise OrderError(f"user {self.user!r}: timestamp {ts} after {self._last_ts}")
        self._last_ts = ts

        if referrer is None:
            tree = self._open(target, ts, 1)
            self._point(target, tree)
            return tree.id

        tree = self._where.get(referrer)
        if tree is not None and self.timeout_ms is not None:
            if ts - tree.nodes[referrer].added_ts > self.timeout_ms:
                tree = None

        if tree is not None:
            node = tree.nodes.get(target)
            if node is None:
                depth = tree.nodes[referrer].depth + 1
                tree.nodes[target] = Node(target, referrer, depth, ts, 1)
                tree.last_attach_ts = ts
                if depth > tree.max_depth:
                    tree.max_depth = depth
            else:
                node.request_count += 1
            tree.requests += 1
            self._point(target, tree)
            return tree.id

        if referrer == target:
            # self-citation from an unseen page: the page is its own root
            tree = self._open(target, ts, 1)
            self._point(target, tree)
            return tree.id
        tree = self._open(referrer, ts, 0)
        tree.nodes[target] = Node(target, referrer, 2, ts, 1)
        tree.requests = 1
        tree.max_depth = 2
        self._point(referrer, tree)
        self._point(target, tree)
        return tree.id

    def add_record(self, rec: ClickRecord) -> int:
        return self.add(rec.ts_ms, rec.referrer, rec.target)

    def finish(self) -> None:
        """Flush every still-open tree to ``on_close``, in id order."""
        if self.on_close is None:
            return
        open_trees = {t.id: t for t in self._where.values()}
        self._where.clear()
        for _, tree in sorted(open_trees.items()):
            self.on_close(tree)


def _check_timeout(timeout_ms: int) -> None:
    if timeout_ms <= 0:
        raise ArgumentError("timeout_ms must be positive")


def logical_sessions(s: UserStream | Iterable[ClickRecord], user: str | None = None) -> list[SessionTree]:
    return _run_logical(s, None, user)


def logical_sessions_timeout(s: UserStream, timeout_ms: int) -> list[SessionTree]:
    _check_timeout(timeout_ms)
    return _run_logical(s, timeout_ms, None)


def _run_logical(s, timeout_ms, user) -> list[SessionTree]:
    if user is None:
        user = s.user if isinstance(s, UserStream) else ""
    engine = LogicalSessionizer(user, timeout_ms)
    for rec in s:
        engine.add(rec.ts_ms, rec.referrer, rec.target)
    return engine.trees


def session_labels(s: UserStream, timeout_ms: int | None = None) -> list[int]:
    """Session id of every record, in stream order."""
    engine = LogicalSessionizer(s.user, timeout_ms)
    return [engine.add(r.ts_ms, r.referrer, r.target) for r in s.records]


def timeout_sessions(s: UserStream, timeout_ms: int) -> list[TimeoutSession]:
    """Split wherever the gap to the previous request exceeds ``timeout_ms``."""
    _check_timeout(timeout_ms)
    groups: list[TimeoutSession] = []
    prev_ts = None
    for rec in s.records:
        if prev_ts is None or rec.ts_ms - prev_ts > timeout_ms:
            groups.append(TimeoutSession([]))
        groups[-1].records.append(rec)
        prev_ts = rec.ts_ms
    return groups


def timeout_split_points(ts: Sequence[int], timeout_ms: int) -> list[int]:
    """Indices i > 0 at which a timeout session starts."""
    return [i for i in range(1, len(ts)) if ts[i] - ts[i - 1] > timeout_ms]


def rolling_avg_sessions(s: UserStream, window_ms: int, threshold: float) -> list[TimeoutSession]:
    """Split where the trailing-window click count sags to the threshold.

    The rolling count at a request is the number of requests (itself
    included) in the half-open window ``(ts - window_ms, ts]``. A new
    session starts at request i > 0 whenever that count is at or below
    ``threshold``, i.e. activity has thinned out to the threshold level.
    """
    if window_ms <= 0:
        raise ArgumentError("window_ms must be positive")
    if not threshold > 0:
        raise ArgumentError("threshold must be positive")
    recs = s.records
    groups: list[TimeoutSession] = []
    lo = 0
    for i, rec in enumerate(recs):
        while recs[lo].ts_ms <= rec.ts_ms - window_ms:
            lo += 1
        count = i - lo + 1
        if i == 0 or count <= threshold:
            groups.append(TimeoutSession([]))
        groups[-1].records.append(rec)
    return groups
