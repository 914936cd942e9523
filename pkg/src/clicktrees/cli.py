"""Command-line entry point: ``clicktrees <subcommand> ...``.

Every option can also be supplied through an environment variable named
``WSS_`` plus the option's name in upper case with dashes as underscores
(``--burst-window-ms`` -> ``WSS_BURST_WINDOW_MS``). Flags on the command
line win over the environment.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from . import __version__
from .anomaly import DEFAULT_CV_THRESHOLD, DEFAULT_Z_THRESHOLD, build_population_model, score_user
from .errors import ArgumentError, ClickTreesError, OrderError
from .fit import (
    DEFAULT_BINS_PER_DECADE,
    EXPONENT_MIN_SAMPLES,
    exponents_from_samples,
    fit_bimodal_lognormal,
    fit_lognormal,
    fit_normal,
    fit_powerlaw_lsq,
    fit_powerlaw_mle,
    log_binned_pdf,
)
from .formats import (
    write_anomalies_jsonl,
    write_fits_json,
    write_histogram_csv,
    write_hosts_csv,
    write_portal_csv,
    write_sweep_csv,
    write_users_csv,
)
from .ingest import DEFAULT_MIN_JUMPS, DEFAULT_MIN_REQUESTS, IngestCounts
from .pipeline import (
    MECHANISMS,
    SessionizeOptions,
    ingest_file,
    ingest_in_memory,
    load_streams,
    sessionize_file,
    sessionize_in_memory,
)
from .session import logical_sessions
from .stats import host_stats, portal_report, rate_filter, session_profile, user_profile
from .sweep import DEFAULT_TIMEOUTS_S, logical_timeout_sweep, timeout_sweep
from .synth import SynthConfig, write_log

log = logging.getLogger("clicktrees")

ENV_PREFIX = "WSS_"


class UsageError(Exception):
    pass


def _timeouts(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad timeout list {text!r}") from None


@contextlib.contextmanager
def _open_out(path: str):
    if path == "-":
        yield sys.stdout
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        yield fh


def _check_input(path: str) -> str:
    if not os.path.isfile(path) or not os.access(path, os.R_OK):
        raise UsageError(f"cannot read input file {path!r}")
    return path


def _summary(cmd: str, **fields) -> None:
    print(f"{cmd}: " + " ".join(f"{k}={v}" for k, v in fields.items()), file=sys.stderr)


def _ingest_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--in", dest="input", required=True, help="Click Log v1 input file")
    p.add_argument("--strict", action="store_true", help="abort on the first malformed line")
    p.add_argument("--burst-window-ms", type=int, default=1000)
    p.add_argument("--low-activity", action="store_true",
                   help="drop users under --min-requests or --min-jumps")
    p.add_argument("--min-requests", type=int, default=DEFAULT_MIN_REQUESTS)
    p.add_argument("--min-jumps", type=int, default=DEFAULT_MIN_JUMPS)


def _low_activity(args):
    return (args.min_requests, args.min_jumps) if args.low_activity else None


def _load(args):
    counts = IngestCounts()
    with open(args.input, encoding="utf-8") as fh:
        streams = load_streams(fh, args.strict, args.burst_window_ms, _low_activity(args), counts)
    return streams, counts


def cmd_ingest(args) -> None:
    with _open_out(args.out) as out:
        try:
            report = ingest_file(args.input, out, args.strict, args.burst_window_ms)
        except OrderError as exc:
            if args.out == "-":
                raise
            log.warning("%s; re-reading in memory", exc)
            out.seek(0)
            out.truncate()
            with open(args.input, encoding="utf-8") as fh:
                report = ingest_in_memory(fh, out, args.strict, args.burst_window_ms)
    c = report.counts
    _summary("ingest", records_in=c.records, records_out=report.records_out, users=report.users,
             malformed=c.malformed, non_page=c.non_page, duplicates=c.duplicates)


def cmd_sessionize(args) -> None:
    opts = SessionizeOptions(
        mechanism=args.mechanism,
        timeout_ms=None if args.timeout is None else round(args.timeout * 1000),
        window_ms=None if args.window is None else round(args.window * 1000),
        threshold=args.threshold,
        burst_window_ms=args.burst_window_ms,
        strict=args.strict,
        full=args.full,
        low_activity=_low_activity(args),
    ).validate()
    with _open_out(args.out) as out:
        try:
            report = sessionize_file(args.input, out, opts, workers=args.workers)
        except OrderError as exc:
            log.warning("%s; falling back to in-memory grouping", exc)
            if args.out == "-":
                raise
            out.seek(0)
            out.truncate()
            with open(args.input, encoding="utf-8") as fh:
                report = sessionize_in_memory(fh, out, opts)
    c = report.counts
    _summary("sessionize", records_in=c.records, records_out=report.records_out,
             users=report.users, sessions=report.sessions, malformed=c.malformed)


def cmd_stats(args) -> None:
    streams, counts = _load(args)
    records = [r for s in streams for r in s.records]
    with _open_out(args.hosts_out) as fh:
        write_hosts_csv(host_stats(records), fh)
    with _open_out(args.users_out) as fh:
        write_users_csv([user_profile(s) for s in streams], fh)
    if args.portal:
        with _open_out(args.portal_out) as fh:
            write_portal_csv(portal_report(records, args.portal.split(",")), fh)
    _summary("stats", records_in=counts.records, records_out=len(records), users=len(streams))


def _try(fits: list, quantity: str, fn, *a, **kw):
    try:
        result = fn(*a, **kw)
    except ClickTreesError as exc:
        log.warning("skipping %s: %s", quantity, exc)
        return None
    fits.append((quantity, result))
    return result


def cmd_fit(args) -> None:
    streams, counts = _load(args)
    records = [r for s in streams for r in s.records]
    hosts = host_stats(records)
    profiles = [user_profile(s) for s in streams]
    trees = {s.user: logical_sessions(s) for s in streams}
    sprofs = {u: session_profile(t, user=u) for u, t in trees.items()}
    bpd = args.bins_per_decade
    fits: list = []
    hists = {}

    def powerlaw(quantity, values):
        values = [v for v in values if v > 0]
        if not values:
            log.warning("skipping %s: no positive values", quantity)
            return
        h = log_binned_pdf(values, bpd)
        hists[quantity] = h
        _try(fits, quantity, fit_powerlaw_lsq, h)
        _try(fits, quantity, fit_powerlaw_mle, values, scan=args.scan_xmin)

    powerlaw("in_strength", [h.in_strength for h in hosts.values()])
    powerlaw("out_strength", [h.out_strength for h in hosts.values()])
    powerlaw("in_users", [len(h.in_users) for h in hosts.values()])
    powerlaw("out_users", [len(h.out_users) for h in hosts.values()])
    powerlaw("tree_requests", [t.requests for ts in trees.values() for t in ts])
    powerlaw("tree_depth", [t.max_depth for ts in trees.values() for t in ts])

    _try(fits, "requests_per_user", fit_lognormal, [p.total_requests for p in profiles])
    _try(fits, "jumps_per_user", fit_lognormal, [p.jump_requests for p in profiles if p.jump_requests > 0])
    _try(fits, "jump_ratio", fit_lognormal, [p.jump_ratio for p in profiles if p.jump_ratio > 0])
    rates = [p.rate_rps for p in rate_filter(profiles) if p.rate_rps]
    _try(fits, "rate_rps", fit_lognormal, rates)
    ratios = [p.ref_host_ratio for p in profiles if p.ref_host_ratio]
    bimodal = None
    try:
        bimodal = fit_bimodal_lognormal(ratios)
    except ClickTreesError as exc:
        log.warning("skipping ref_host_ratio mixture: %s", exc)
    if bimodal is not None:
        fits.append(("ref_host_ratio.low", bimodal.comp1))
        fits.append(("ref_host_ratio.high", bimodal.comp2))
    _try(fits, "ref_host_ratio", fit_lognormal, ratios)

    nontrivial = [sp for sp in sprofs.values() if sp.counted]
    _try(fits, "session_mean_requests", fit_lognormal, [sp.mean_requests for sp in nontrivial])
    _try(fits, "session_mean_depth", fit_lognormal, [sp.mean_depth for sp in nontrivial])
    _try(fits, "session_mean_ratio", fit_normal, [sp.mean_ratio for sp in nontrivial])

    ex = _try([], "interclick_exponent", exponents_from_samples,
              {p.user: p.interclicks_s for p in profiles}, min_samples=args.min_samples, bins_per_decade=bpd)
    if ex is not None:
        fits.append(("interclick_exponent", ex.fit))
    ex = _try([], "session_duration_exponent", exponents_from_samples,
              {u: sp.durations_s for u, sp in sprofs.items()}, min_samples=args.min_samples, bins_per_decade=bpd)
    if ex is not None:
        fits.append(("session_duration_exponent", ex.fit))

    with _open_out(args.out) as fh:
        write_fits_json(fits, fh)
    if args.histograms:
        d = Path(args.histograms)
        d.mkdir(parents=True, exist_ok=True)
        for quantity, h in hists.items():
            with open(d / f"{quantity}.csv", "w", encoding="utf-8", newline="") as fh:
                write_histogram_csv(h, fh)
    _summary("fit", records_in=counts.records, users=len(streams),
             sessions=sum(len(t) for t in trees.values()), fits=len(fits))


def cmd_sweep(args) -> None:
    streams, counts = _load(args)
    rows = []
    if args.mechanism in ("timeout", "both"):
        rows += timeout_sweep(streams, args.timeouts)
    if args.mechanism in ("logical_timeout", "both"):
        rows += logical_timeout_sweep(streams, args.timeouts)
    with _open_out(args.out) as fh:
        write_sweep_csv(rows, fh)
    _summary("sweep", records_in=counts.records, users=len(streams), rows=len(rows))


def cmd_synth(args) -> None:
    cfg = SynthConfig.from_file(args.config) if args.config else SynthConfig()
    overrides = {
        "n_users": args.users, "jump_prob": args.jump_prob, "branch_prob": args.branch_prob,
        "seed": args.seed, "requests_mu": args.requests_mu, "requests_sigma": args.requests_sigma,
        "tau_mean": args.tau_mean, "tau_sd": args.tau_sd, "x_min_s": args.x_min_s,
        "url_pool": args.url_pool, "paths_per_host": args.paths_per_host, "max_gap_s": args.max_gap_s,
    }
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    cfg.validate()
    with _open_out(args.out) as out:
        if args.truth:
            with _open_out(args.truth) as side:
                info = write_log(cfg, out, side)
        else:
            info = write_log(cfg, out)
    _summary("synth", records_out=info["records"], users=info["users"],
             clamp_rate=f"{info['clamp_rate']:.6f}")


def cmd_anomaly(args) -> None:
    streams, counts = _load(args)
    profiles = [user_profile(s) for s in streams]
    sprofs = {s.user: session_profile(logical_sessions(s), user=s.user) for s in streams}
    model = build_population_model(profiles, sprofs)
    for f in model.degenerate:
        log.warning("feature %s has zero spread; its z-scores are omitted", f)
    reports = [score_user(p, sprofs[p.user], model, args.z_threshold, args.cv_threshold) for p in profiles]
    with _open_out(args.out) as fh:
        write_anomalies_jsonl(reports, fh)
    flagged = sum(1 for r in reports if r.flags)
    _summary("anomaly", records_in=counts.records, users=len(streams), flagged=flagged)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clicktrees", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="normalize, filter and deduplicate a click log")
    _ingest_args(p)
    p.add_argument("--out", default="clean.log")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("sessionize", help="segment click streams into sessions")
    _ingest_args(p)
    p.add_argument("--out", default="sessions.jsonl")
    p.add_argument("--mechanism", choices=MECHANISMS, default="logical")
    p.add_argument("--timeout", type=float, help="seconds (timeout, logical_timeout)")
    p.add_argument("--window", type=float, help="rolling window in seconds")
    p.add_argument("--threshold", type=float, help="rolling clicks-per-window threshold")
    p.add_argument("--full", action="store_true", help="include every tree node")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sessionize)

    p = sub.add_parser("stats", help="per-host and per-user statistics")
    _ingest_args(p)
    p.add_argument("--hosts-out", default="hosts.csv")
    p.add_argument("--users-out", default="users.csv")
    p.add_argument("--portal", help="comma-separated portal hosts")
    p.add_argument("--portal-out", default="portal.csv")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("fit", help="fit distributions of every measured quantity")
    _ingest_args(p)
    p.add_argument("--out", default="fits.json")
    p.add_argument("--histograms", help="directory for log-binned histogram CSVs")
    p.add_argument("--bins-per-decade", type=int, default=DEFAULT_BINS_PER_DECADE)
    p.add_argument("--min-samples", type=int, default=EXPONENT_MIN_SAMPLES)
    p.add_argument("--scan-xmin", action="store_true", help="choose power-law x_min by KS scan")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("sweep", help="session statistics across a timeout grid")
    _ingest_args(p)
    p.add_argument("--out", default="sweep.csv")
    p.add_argument("--mechanism", choices=("timeout", "logical_timeout", "both"), default="both")
    p.add_argument("--timeouts", type=_timeouts, default=list(DEFAULT_TIMEOUTS_S),
                   help="comma-separated seconds, ascending")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="generate a seeded synthetic click log")
    p.add_argument("--out", default="clicks.log")
    p.add_argument("--truth", help="ground-truth sidecar TSV (user, line_no, session_id)")
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--users", type=int)
    p.add_argument("--jump-prob", type=float)
    p.add_argument("--branch-prob", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--requests-mu", type=float)
    p.add_argument("--requests-sigma", type=float)
    p.add_argument("--tau-mean", type=float)
    p.add_argument("--tau-sd", type=float)
    p.add_argument("--x-min-s", type=float)
    p.add_argument("--url-pool", type=int)
    p.add_argument("--paths-per-host", type=int)
    p.add_argument("--max-gap-s", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("anomaly", help="score users against the population")
    _ingest_args(p)
    p.add_argument("--out", default="anomalies.jsonl")
    p.add_argument("--z-threshold", type=float, default=DEFAULT_Z_THRESHOLD)
    p.add_argument("--cv-threshold", type=float, default=DEFAULT_CV_THRESHOLD)
    p.set_defaults(func=cmd_anomaly)

    _apply_env(parser)
    return parser


def _apply_env(parser: argparse.ArgumentParser, environ=None) -> None:
    """Replace option defaults with WSS_* environment values."""
    environ = os.environ if environ is None else environ
    subparsers = [a for a in parser._actions if isinstance(a, argparse._SubParsersAction)]
    for sp in subparsers:
        for sub in sp.choices.values():
            for action in sub._actions:
                if not action.option_strings or action.dest in ("help",):
                    continue
                key = ENV_PREFIX + action.option_strings[-1].lstrip("-").replace("-", "_").upper()
                if key not in environ:
                    continue
                raw = environ[key]
                if isinstance(action, argparse._StoreTrueAction):
                    action.default = raw.strip().lower() in ("1", "true", "yes", "on")
                    continue
                try:
                    action.default = action.type(raw) if action.type else raw
                except (ValueError, argparse.ArgumentTypeError):
                    sub.error(f"invalid value {raw!r} in {key}")
                action.required = False


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(levelname)s: %(message)s")
    np.seterr(all="ignore")
    try:
        if getattr(args, "input", None) is not None:
            _check_input(args.input)
        args.func(args)
    except (UsageError, ArgumentError) as exc:
        print(f"clicktrees {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"clicktrees {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except ClickTreesError as exc:
        print(f"clicktrees {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
