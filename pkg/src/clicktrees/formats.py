"""Writers for every on-disk artifact: JSONL, CSV and JSON files."""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Iterable
from typing import IO

from .anomaly import AnomalyReport
from .fit import FitResult, LogHistogram
from .ingest import ClickRecord, format_record
from .session import SessionTree, TimeoutSession, tree_metrics
from .stats import HostStats, UserProfile
from .sweep import SWEEP_COLUMNS, SweepRow

HOSTS_COLUMNS = ("host", "in_strength", "out_strength", "in_users", "out_users")
USERS_COLUMNS = ("user", "total", "jumps", "jump_ratio", "rate_rps", "ref_host_ratio", "active_span_s")


def _num(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_click_log(records: Iterable[ClickRecord], fh: IO[str]) -> int:
    n = 0
    for rec in records:
        fh.write(format_record(rec))
        n += 1
    return n


def tree_row(t: SessionTree, mechanism: str, full: bool = False) -> dict:
    """JSONL row for a logical session."""
    m = tree_metrics(t) if full else None
    node_count = len(t.nodes)
    row = {
        "user": t.user,
        "id": t.id,
        "mechanism": mechanism,
        "created_ts": t.created_ts,
        "duration_ms": t.last_attach_ts - t.created_ts,
        "node_count": node_count,
        "request_count": m.request_count if m else t.requests,
        "depth": m.depth if m else t.max_depth,
        "ratio": node_count / (m.depth if m else t.max_depth),
        "root_host": t.root.host,
    }
    if full:
        row["nodes"] = [
            {"url": str(n.url), "parent": None if n.parent is None else str(n.parent),
             "depth": n.depth, "added_ts": n.added_ts, "request_count": n.request_count}
            for n in t.nodes.values()
        ]
    return row


def group_row(user: str, sid: int, g: TimeoutSession, mechanism: str) -> dict:
    """JSONL row for a time-segmented session (timeout or rolling average)."""
    return {
        "user": user,
        "id": sid,
        "mechanism": mechanism,
        "created_ts": g.records[0].ts_ms,
        "duration_ms": g.duration_ms,
        "request_count": g.request_count,
        "hosts": g.hosts,
    }


# one shared encoder: json.dumps builds a fresh one per call when options are given
_COMPACT = json.JSONEncoder(separators=(",", ":"), ensure_ascii=False)


def dumps(row: dict) -> str:
    return _COMPACT.encode(row)


def write_hosts_csv(hosts: dict[str, HostStats], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(HOSTS_COLUMNS)
    for h in hosts.values():
        w.writerow((h.host, h.in_strength, h.out_strength, len(h.in_users), len(h.out_users)))


def write_users_csv(profiles: Iterable[UserProfile], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(USERS_COLUMNS)
    for p in profiles:
        w.writerow((p.user, p.total_requests, p.jump_requests, _num(p.jump_ratio),
                    _num(p.rate_rps), _num(p.ref_host_ratio), _num(p.active_span_s)))


def write_portal_csv(report: dict[str, float], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("user", "portal_fraction"))
    for user, frac in report.items():
        w.writerow((user, _num(frac)))


def _clean_json(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _clean_json(x) for k, x in v.items()}
    return v


def write_fits_json(fits: Iterable[tuple[str, FitResult]], fh: IO[str]) -> None:
    rows = [_clean_json(fit.to_dict(quantity)) for quantity, fit in fits]
    json.dump(rows, fh, indent=2)
    fh.write("\n")


def write_histogram_csv(h: LogHistogram, fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("bin_lo", "bin_hi", "pdf"))
    for b in h.bins:
        w.writerow((repr(b.lo), repr(b.hi), repr(b.pdf)))


def write_sweep_csv(rows: Iterable[SweepRow], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        d = r.as_dict()
        w.writerow([_num(d[c]) for c in SWEEP_COLUMNS])


def write_anomalies_jsonl(reports: Iterable[AnomalyReport], fh: IO[str]) -> None:
    for r in reports:
        fh.write(dumps(r.to_dict()) + "\n")
