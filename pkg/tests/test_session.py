import random

import pytest
from hypothesis import given, settings, strategies as st

from clicktrees.errors import ArgumentError, OrderError
from clicktrees.ingest import ClickRecord, Url, UserStream
from clicktrees.session import (
    LogicalSessionizer,
    logical_sessions,
    logical_sessions_timeout,
    rolling_avg_sessions,
    session_labels,
    timeout_sessions,
    timeout_split_points,
    tree_metrics,
)

from conftest import random_stream, stream, url
from oracles import brute_force_sessions

MIN = 60_000


def _nodes(t):
    return {u.path[1:] for u in t.nodes}


def _canon(trees):
    """Comparable form of a tree list."""
    return [
        (t.root, t.created_ts, t.last_attach_ts,
         sorted((str(n.url), n.depth, n.added_ts, n.request_count, str(n.parent)) for n in t.nodes.values()))
        for t in trees
    ]


@st.composite
def streams(draw, max_size=60):
    n_urls = draw(st.integers(1, 8))
    urls = [Url("h.example", f"/p{i}") for i in range(n_urls)]
    steps = draw(st.lists(
        st.tuples(st.integers(0, 20_000), st.one_of(st.none(), st.sampled_from(urls)), st.sampled_from(urls)),
        max_size=max_size,
    ))
    ts, recs = 0, []
    for gap, ref, tgt in steps:
        ts += gap
        recs.append(ClickRecord(ts, "u", tgt, ref))
    return UserStream("u", recs)


class TestLogicalExamples:
    def test_two_trees(self):
        trees = logical_sessions(stream([(None, "A"), ("A", "B"), ("B", "C"), (None, "D"), ("A", "E")]))
        assert [_nodes(t) for t in trees] == [{"A", "B", "C", "E"}, {"D"}]
        assert [tree_metrics(t).depth for t in trees] == [3, 1]

    def test_most_recent_use_remaps(self):
        trees = logical_sessions(stream([(None, "A"), ("A", "B"), (None, "A"), ("A", "C")]))
        assert [_nodes(t) for t in trees] == [{"A", "B"}, {"A", "C"}]

    def test_unseen_referrer_synthesizes_root(self):
        (t,) = logical_sessions(stream([("X", "Y")]))
        assert t.root == url("X")
        assert t.nodes[url("X")].request_count == 0
        m = tree_metrics(t)
        assert (m.node_count, m.depth, m.request_count) == (2, 2, 1)

    def test_synthesized_root_is_attach_point(self):
        trees = logical_sessions(stream([("X", "Y"), ("X", "Z")]))
        assert len(trees) == 1 and _nodes(trees[0]) == {"X", "Y", "Z"}

    def test_repeat_request_counts_without_duplicating(self):
        (t,) = logical_sessions(stream([(None, "A"), ("A", "B"), ("A", "B")]))
        m = tree_metrics(t)
        assert (m.node_count, m.request_count) == (2, 3)

    def test_duration_only_extended_by_new_nodes(self):
        s = stream([(0, None, "A"), (1000, "A", "B"), (9000, "A", "B")])
        (t,) = logical_sessions(s)
        assert tree_metrics(t).duration_ms == 1000

    def test_self_citation_from_unseen_page(self):
        (t,) = logical_sessions(stream([("A", "A")]))
        assert len(t.nodes) == 1 and t.nodes[url("A")].request_count == 1

    def test_out_of_order_rejected(self):
        with pytest.raises(OrderError):
            logical_sessions(stream([(5, None, "A"), (4, None, "B")]))


class TestTimeoutVariant:
    def test_expired_attachment_point(self):
        s = stream([(0, None, "A"), (10 * MIN, "A", "B")])
        trees = logical_sessions_timeout(s, 5 * MIN)
        assert [_nodes(t) for t in trees] == [{"A"}, {"A", "B"}]

    def test_within_timeout(self):
        s = stream([(0, None, "A"), (10 * MIN, "A", "B")])
        assert [_nodes(t) for t in logical_sessions_timeout(s, 15 * MIN)] == [{"A", "B"}]

    def test_boundary_is_inclusive(self):
        s = stream([(0, None, "A"), (5 * MIN, "A", "B")])
        assert len(logical_sessions_timeout(s, 5 * MIN)) == 1

    @pytest.mark.parametrize("bad", [0, -1])
    def test_nonpositive(self, bad):
        with pytest.raises(ArgumentError):
            logical_sessions_timeout(stream([]), bad)

    @given(streams())
    def test_timeout_beyond_span_is_logical(self, s):
        span = s.records[-1].ts_ms - s.records[0].ts_ms if s.records else 0
        assert _canon(logical_sessions_timeout(s, span + 1)) == _canon(logical_sessions(s))


class TestMetrics:
    def test_chain(self):
        m = tree_metrics(logical_sessions(stream([(None, "A"), ("A", "B"), ("B", "C")]))[0])
        assert (m.node_count, m.depth, m.node_depth_ratio) == (3, 3, 1.0)

    def test_star(self):
        m = tree_metrics(logical_sessions(stream([(None, "R"), ("R", "a"), ("R", "b"), ("R", "c")]))[0])
        assert (m.node_count, m.depth, m.node_depth_ratio) == (4, 2, 2.0)

    def test_single(self):
        m = tree_metrics(logical_sessions(stream([(None, "A")]))[0])
        assert (m.node_count, m.depth, m.node_depth_ratio, m.duration_ms) == (1, 1, 1.0, 0)
        assert m.is_trivial

    def test_running_totals_match_walk(self, rng):
        for _ in range(50):
            for t in logical_sessions(random_stream(rng)):
                m = tree_metrics(t)
                assert t.summary().metrics == m


class TestOracle:
    def test_random_streams(self, rng):
        for _ in range(200):
            s = random_stream(rng)
            labels, sessions = brute_force_sessions(s.records)
            assert session_labels(s) == labels
            trees = logical_sessions(s)
            assert len(trees) == len(sessions)
            for t, o in zip(trees, sessions):
                assert t.root == o.root and t.created_ts == o.created and t.last_attach_ts == o.last_attach
                assert {u: [n.depth, n.added_ts, n.request_count] for u, n in t.nodes.items()} == o.nodes

    def test_random_streams_with_timeout(self, rng):
        for _ in range(200):
            s = random_stream(rng)
            timeout = rng.choice((1, 100, 10_000, 1_000_000))
            labels, _ = brute_force_sessions(s.records, timeout)
            assert session_labels(s, timeout) == labels


class TestLogicalProperties:
    @given(streams())
    def test_partition(self, s):
        trees = logical_sessions(s)
        assert sum(tree_metrics(t).request_count for t in trees) == len(s)
        labels = session_labels(s)
        assert len(labels) == len(s)
        assert set(labels) == {t.id for t in trees}

    @given(streams(), st.integers(-10**9, 10**12))
    def test_time_translation(self, s, shift):
        moved = UserStream("u", [ClickRecord(r.ts_ms + shift, r.user, r.target, r.referrer) for r in s.records])
        assert session_labels(moved) == session_labels(s)
        assert session_labels(moved, 3000) == session_labels(s, 3000)
        assert [len(g.records) for g in timeout_sessions(moved, 3000)] == \
               [len(g.records) for g in timeout_sessions(s, 3000)]

    @given(streams())
    def test_tree_shape(self, s):
        for t in logical_sessions(s):
            assert sum(1 for n in t.nodes.values() if n.parent is None) == 1
            assert t.nodes[t.root].parent is None and t.nodes[t.root].depth == 1
            for n in t.nodes.values():
                if n.parent is not None:
                    assert n.depth == t.nodes[n.parent].depth + 1
                    assert n.added_ts >= t.nodes[n.parent].added_ts
                assert n.request_count >= 0
                assert n.request_count >= 1 or n.url == t.root
            assert t.created_ts <= t.last_attach_ts

    @given(streams())
    def test_ratio_one_iff_chain(self, s):
        for t in logical_sessions(s):
            m = tree_metrics(t)
            children = {}
            for n in t.nodes.values():
                if n.parent is not None:
                    children[n.parent] = children.get(n.parent, 0) + 1
            is_chain = all(c == 1 for c in children.values())
            assert (m.node_depth_ratio == 1.0) == is_chain


class TestStreamingEngine:
    def test_on_close_sees_every_tree_once(self, rng):
        for _ in range(100):
            s = random_stream(rng)
            closed = []
            engine = LogicalSessionizer("u1", on_close=closed.append)
            for r in s.records:
                engine.add_record(r)
            engine.finish()
            expect = logical_sessions(s)
            assert sorted(t.id for t in closed) == [t.id for t in expect]
            by_id = {t.id: t for t in closed}
            assert _canon([by_id[t.id] for t in expect]) == _canon(expect)

    def test_closed_tree_is_never_touched_again(self):
        closed = []
        engine = LogicalSessionizer("u", on_close=closed.append)
        engine.add(0, None, url("A"))
        engine.add(1, None, url("A"))   # remaps A; tree 0 has no URL left
        assert [t.id for t in closed] == [0]
        engine.add(2, url("A"), url("B"))
        assert len(closed[0].nodes) == 1


class TestTimeoutSessions:
    def _ts(self, *secs):
        return stream([(s * 1000, None, "A") for s in secs])

    def test_gap_split(self):
        groups = timeout_sessions(self._ts(0, 100, 500), 300_000)
        assert [[r.ts_ms // 1000 for r in g.records] for g in groups] == [[0, 100], [500]]

    def test_equal_gap_stays(self):
        assert len(timeout_sessions(self._ts(0, 300), 300_000)) == 1

    def test_single(self):
        (g,) = timeout_sessions(self._ts(7), 1000)
        assert g.duration_ms == 0 and g.request_count == 1

    def test_hosts(self):
        s = stream([(None, "a.com/x"), (None, "b.com/y"), (None, "a.com/z")])
        assert timeout_sessions(s, 10**9)[0].hosts == 2

    def test_split_points_agree(self, rng):
        for _ in range(30):
            s = random_stream(rng)
            ts = [r.ts_ms for r in s.records]
            groups = timeout_sessions(s, 500)
            starts = [0]
            for g in groups[:-1]:
                starts.append(starts[-1] + len(g.records))
            assert timeout_split_points(ts, 500) == starts[1:]

    @given(streams(), st.integers(1, 30_000), st.integers(1, 30_000))
    def test_monotone_in_timeout(self, s, a, b):
        if not s.records:
            return
        lo, hi = sorted((a, b))
        g_lo, g_hi = timeout_sessions(s, lo), timeout_sessions(s, hi)
        assert len(g_hi) <= len(g_lo)
        # exact comparison of means as fractions: sum_hi/len_hi >= sum_lo/len_lo
        d_lo = sum(g.duration_ms for g in g_lo)
        d_hi = sum(g.duration_ms for g in g_hi)
        assert d_hi * len(g_lo) >= d_lo * len(g_hi)
        assert sum(len(g.records) for g in g_hi) == len(s)


class TestRollingAverage:
    def _burst(self, start_s, n=10):
        return [(start_s * 1000 + i * 2000, None, "A") for i in range(n)]

    def test_two_bursts(self):
        s = stream(self._burst(0) + self._burst(3600 + 20))
        groups = rolling_avg_sessions(s, 60_000, 1)
        assert [len(g.records) for g in groups] == [10, 10]

    def test_tiny_threshold_one_group(self):
        s = stream(self._burst(0) + self._burst(3600))
        assert len(rolling_avg_sessions(s, 60_000, 0.0001)) == 1

    def test_threshold_above_max_rate(self):
        s = stream(self._burst(0, 20))
        groups = rolling_avg_sessions(s, 10**9, 1000)
        assert all(len(g.records) == 1 for g in groups) and len(groups) == 20

    @pytest.mark.parametrize("w,th", [(0, 1), (-5, 1), (10, 0), (10, -1), (10, float("nan"))])
    def test_invalid(self, w, th):
        with pytest.raises(ArgumentError):
            rolling_avg_sessions(stream([]), w, th)

    @given(streams(), st.integers(1, 50_000), st.floats(0.5, 10))
    def test_partition(self, s, w, th):
        groups = rolling_avg_sessions(s, w, th)
        assert [r for g in groups for r in g.records] == s.records
