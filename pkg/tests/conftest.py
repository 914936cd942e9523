import random

import pytest

from clicktrees.ingest import ClickRecord, Url, UserStream


def url(name: str) -> Url:
    """'A' -> a.example/A ; 'host/path' strings are split on the first slash."""
    if "/" in name:
        host, path = name.split("/", 1)
        return Url(host, "/" + path)
    return Url("a.example", "/" + name)


def stream(steps, user="u1", start=0, step_ms=1000) -> UserStream:
    """Build a stream from (referrer, target) name pairs or (ts, referrer, target) triples."""
    recs = []
    for i, st in enumerate(steps):
        if len(st) == 3:
            ts, ref, tgt = st
        else:
            ts, (ref, tgt) = start + i * step_ms, st
        recs.append(ClickRecord(ts, user, url(tgt), None if ref is None else url(ref), True))
    return UserStream(user, recs)


def random_stream(rng: random.Random, n_max=200, n_urls=20, jump_prob=0.2, user="u1") -> UserStream:
    n = rng.randint(1, n_max)
    k = rng.randint(1, n_urls)
    urls = [Url(f"h{i % 3}.example", f"/p{i}") for i in range(k)]
    ts = 0
    recs = []
    for _ in range(n):
        ts += rng.choice((0, 1, 5, 50, 500, 5000, 50000))
        ref = None if rng.random() < jump_prob else rng.choice(urls)
        recs.append(ClickRecord(ts, user, rng.choice(urls), ref, True))
    return UserStream(user, recs)


@pytest.fixture
def rng():
    return random.Random(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
