"""Seeded synthetic click streams with known ground truth.

Each user gets a log-normal request budget and a personal interclick
exponent. Requests are spaced by power-law gaps; each one either jumps
(empty referrer, new tree) or follows a link out of the current tree,
citing the newest node or, with ``branch_prob``, a random earlier one.

With fresh paths (the default) every request targets a URL the user has
never seen, so referrer-tree sessionization must recover the generator's
trees exactly; the per-record tree ids are the ground truth. With
``paths_per_host`` set, URLs are drawn from a finite pool and recur,
which keeps per-user state small but voids the ground truth.
"""

from __future__ import annotations

import heapq
import math
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field, fields
from typing import IO

import numpy as np

from .errors import ArgumentError
from .ingest import ClickRecord, Url, group_users
from .session import logical_sessions
from .stats import session_profile

# Found by calibrate_branch_prob(1.94) on SynthConfig(n_users=500,
# requests_mu=log(300), requests_sigma=0.3, jump_prob=0.15, seed=11).
CALIBRATED_BRANCH_PROB = 0.818

_CHUNK = 4096


@dataclass
class SynthConfig:
    n_users: int = 100
    requests_mu: float = math.log(2000)
    requests_sigma: float = 0.5
    jump_prob: float = 0.15
    tau_mean: float = 1.6
    tau_sd: float = 0.1
    x_min_s: float = 1.0
    branch_prob: float = CALIBRATED_BRANCH_PROB
    url_pool: int = 1000
    paths_per_host: int | None = None
    max_gap_s: float = 1e7
    tau_floor: float = 1.05
    start_ms: int = 1204675200000
    seed: int = 0

    def validate(self) -> SynthConfig:
        problems = []
        if self.n_users < 1:
            problems.append("n_users must be >= 1")
        if self.requests_sigma < 0:
            problems.append("requests_sigma must be >= 0")
        if not 0 < self.jump_prob <= 1:
            problems.append("jump_prob must be in (0, 1]")
        if not 0 <= self.branch_prob < 1:
            problems.append("branch_prob must be in [0, 1)")
        if self.tau_sd < 0:
            problems.append("tau_sd must be >= 0")
        if self.tau_floor <= 1:
            problems.append("tau_floor must exceed 1")
        if self.x_min_s <= 0:
            problems.append("x_min_s must be positive")
        if self.max_gap_s < self.x_min_s:
            problems.append("max_gap_s must be >= x_min_s")
        if self.url_pool < 1:
            problems.append("url_pool must be >= 1")
        if self.paths_per_host is not None and self.paths_per_host < 1:
            problems.append("paths_per_host must be >= 1")
        if self.start_ms < 0:
            problems.append("start_ms must be >= 0")
        if problems:
            raise ArgumentError("; ".join(problems))
        return self

    @property
    def exact(self) -> bool:
        """Whether emitted session labels are exact ground truth."""
        return self.paths_per_host is None

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> SynthConfig:
        """Build from string key/values, as read from a ``key=value`` file."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise ArgumentError(f"unknown synth option {key!r}")
            raw = raw.strip()
            t = types[key]
            if "None" in t and raw.lower() in ("", "none"):
                kwargs[key] = None
            elif t.startswith("int"):
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> SynthConfig:
        values = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ArgumentError(f"expected key=value, got {line!r}")
                k, v = line.split("=", 1)
                values[k] = v
        return cls.from_mapping(values)


@dataclass
class SynthResult:
    records: list[ClickRecord]
    labels: list[int]
    taus: dict[str, float] = field(default_factory=dict)
    clamped: int = 0
    gaps: int = 0

    @property
    def clamp_rate(self) -> float:
        return self.clamped / self.gaps if self.gaps else 0.0


def user_id(index: int) -> str:
    return f"u{index:05d}"


class _UserSource:
    """Lazily emits one user's events as sortable tuples.

    Events are ``(ts_ms, user_index, seq, target, referrer, session_id)``;
    the first three fields are unique, so tuples never compare URLs.
    """

    def __init__(self, index: int, cfg: SynthConfig, seed_seq: np.random.SeedSequence,
                 hosts: list[str], pool: list[list[Url]] | None):
        self.index = index
        self.user = user_id(index)
        self.cfg = cfg
        self.rng = np.random.default_rng(seed_seq)
        self.n = max(1, int(round(self.rng.lognormal(cfg.requests_mu, cfg.requests_sigma))))
        self.tau = max(float(self.rng.normal(cfg.tau_mean, cfg.tau_sd)), cfg.tau_floor)
        self.start = cfg.start_ms + int(self.rng.integers(0, 86_400_000))
        self.hosts = hosts
        self.pool = pool
        self.clamped = 0

    def __iter__(self) -> Iterator[tuple]:
        cfg, rng = self.cfg, self.rng
        ui = self.index
        ts = self.start
        tree: list[Url] = []
        sid = -1
        fresh = 0
        expo = -1.0 / (self.tau - 1.0)
        done = 0
        while done < self.n:
            k = min(_CHUNK, self.n - done)
            with np.errstate(over="ignore"):
                raw = cfg.x_min_s * (1.0 - rng.random(k)) ** expo
            over = raw > cfg.max_gap_s
            self.clamped += int(np.count_nonzero(over[1:] if done == 0 else over))
            gaps = np.rint(np.where(over, cfg.max_gap_s, raw) * 1000.0).astype(np.int64).tolist()
            jumps = (rng.random(k) < cfg.jump_prob).tolist()
            branch = (rng.random(k) < cfg.branch_prob).tolist()
            picks = rng.random(k).tolist()
            host_idx = rng.integers(0, cfg.url_pool, k).tolist()
            path_idx = rng.integers(0, cfg.paths_per_host, k).tolist() if self.pool is not None else None
            for j in range(k):
                seq = done + j
                if seq:
                    ts += gaps[j]
                if self.pool is not None:
                    target = self.pool[host_idx[j]][path_idx[j]]
                else:
                    target = Url(self.hosts[host_idx[j]], f"/p/{fresh}")
                    fresh += 1
                if seq == 0 or jumps[j]:
                    sid += 1
                    tree = [target]
                    yield (ts, ui, seq, target, None, sid)
                    continue
                if branch[j] and len(tree) > 1:
                    referrer = tree[int(picks[j] * (len(tree) - 1))]
                else:
                    referrer = tree[-1]
                tree.append(target)
                yield (ts, ui, seq, target, referrer, sid)
            done += k


def _sources(cfg: SynthConfig) -> list[_UserSource]:
    cfg.validate()
    hosts = [f"h{k:04d}.example" for k in range(cfg.url_pool)]
    pool = None
    if cfg.paths_per_host is not None:
        pool = [[Url(h, f"/p/{p}") for p in range(cfg.paths_per_host)] for h in hosts]
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_users)
    return [_UserSource(i, cfg, children[i], hosts, pool) for i in range(cfg.n_users)]


def iter_events(cfg: SynthConfig, sources: list[_UserSource] | None = None) -> Iterator[tuple]:
    """All users' events merged into global timestamp order (ties by user index)."""
    sources = sources if sources is not None else _sources(cfg)
    return heapq.merge(*sources)


def generate(config: SynthConfig) -> SynthResult:
    sources = _sources(config)
    records, labels = [], []
    users = [s.user for s in sources]
    gaps = 0
    for ts, ui, _, target, referrer, sid in iter_events(config, sources):
        records.append(ClickRecord(ts, users[ui], target, referrer, True))
        labels.append(sid)
    for s in sources:
        gaps += s.n - 1
    return SynthResult(
        records, labels,
        taus={s.user: s.tau for s in sources},
        clamped=sum(s.clamped for s in sources),
        gaps=gaps,
    )


def write_log(config: SynthConfig, out: IO[str], sidecar: IO[str] | None = None) -> dict:
    """Stream a Click Log v1 file (and optional ground-truth TSV) to disk.

    Never materializes the whole stream. Returns counters for reporting.
    """
    if sidecar is not None and not config.exact:
        raise ArgumentError("ground-truth sidecar requires fresh paths (paths_per_host unset)")
    sources = _sources(config)
    users = [s.user for s in sources]
    text: dict[Url, str] = {}
    write = out.write
    n = 0
    for ts, ui, _, target, referrer, sid in iter_events(config, sources):
        t = text.get(target)
        if t is None:
            t = f"http://{target}"
            if not config.exact:
                text[target] = t
        if referrer is None:
            r = "-"
        else:
            r = text.get(referrer)
            if r is None:
                r = f"http://{referrer}"
        write(f"{ts}\t{users[ui]}\t{t}\t{r}\t1\n")
        n += 1
        if sidecar is not None:
            sidecar.write(f"{users[ui]}\t{n}\t{sid}\n")
    clamped = sum(s.clamped for s in sources)
    gaps = sum(s.n - 1 for s in sources)
    return {"records": n, "users": len(sources), "clamped": clamped,
            "clamp_rate": clamped / gaps if gaps else 0.0}


def read_sidecar(lines) -> list[tuple[str, int, int]]:
    out = []
    for line in lines:
        if not line.strip():
            continue
        user, line_no, sid = line.rstrip("\n").split("\t")
        out.append((user, int(line_no), int(sid)))
    return out


def mean_branching_ratio(records, nontrivial: bool = True) -> float:
    """Mean over users of each user's mean node/depth ratio of logical sessions."""
    ratios = []
    for s in group_users(records):
        prof = session_profile(logical_sessions(s), nontrivial=nontrivial)
        if prof.mean_ratio is not None:
            ratios.append(prof.mean_ratio)
    return float(np.mean(ratios))


def calibrate_branch_prob(target_ratio: float, config: SynthConfig, iterations: int = 12) -> tuple[float, float]:
    """Bisect ``branch_prob`` until the mean node/depth ratio meets the target.

    Returns ``(branch_prob, achieved_ratio)``. The seed is held fixed, so
    every evaluation reuses the same random draws.
    """
    lo, hi = 0.0, 0.999
    best = (0.0, 1.0)
    for _ in range(iterations):
        mid = (lo + hi) / 2
        cfg = SynthConfig(**{**config.__dict__, "branch_prob": mid})
        ratio = mean_branching_ratio(generate(cfg).records)
        if abs(ratio - target_ratio) < abs(best[1] - target_ratio):
            best = (mid, ratio)
        if ratio < target_ratio:
            lo = mid
        else:
            hi = mid
    return best
