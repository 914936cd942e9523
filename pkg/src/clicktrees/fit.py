"""Distribution estimators for heavy-tailed and log-normal quantities.

Power laws are fitted by least squares on log-binned densities (the
primary estimator) and cross-checked with the continuous maximum
likelihood estimator. All standard deviations are population form
(``ddof=0``).
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DegenerateSampleError, InsufficientDataError

DEFAULT_BINS_PER_DECADE = 10
EXPONENT_MIN_SAMPLES = 500
# per-user fits drop bins this sparse; single-count tail bins bias the slope shallow
EXPONENT_MIN_BIN_COUNT = 3
EM_TOL = 1e-9
EM_MAX_ITER = 500


@dataclass(frozen=True)
class Bin:
    lo: float
    hi: float
    count: int
    pdf: float


@dataclass
class LogHistogram:
    edges: np.ndarray
    counts: np.ndarray
    pdf: np.ndarray
    n: int

    @property
    def x_min(self) -> float:
        return float(self.edges[0])

    @property
    def x_max(self) -> float:
        return float(self.edges[-1])

    @property
    def centers(self) -> np.ndarray:
        """Geometric bin centres."""
        return np.sqrt(self.edges[:-1] * self.edges[1:])

    @property
    def bins(self) -> list[Bin]:
        return [
            Bin(float(lo), float(hi), int(c), float(p))
            for lo, hi, c, p in zip(self.edges[:-1], self.edges[1:], self.counts, self.pdf)
        ]


@dataclass
class FitResult:
    family: str
    params: dict[str, float]
    n: int
    x_min_used: float | None = None
    r2: float | None = None
    degenerate: bool = False

    @property
    def exponent(self) -> float:
        return self.params["exponent"]

    @property
    def mu(self) -> float:
        return self.params["mu"]

    @property
    def sigma(self) -> float:
        return self.params["sigma"]

    @property
    def mean(self) -> float:
        """Mean of the fitted distribution (not of the log values)."""
        if self.family == "lognormal":
            return math.exp(self.mu + self.sigma**2 / 2)
        if self.family == "normal":
            return self.mu
        a = self.exponent
        if a <= 2:
            return math.inf
        return self.x_min_used * (a - 1) / (a - 2)

    @property
    def median(self) -> float:
        if self.family == "lognormal":
            return math.exp(self.mu)
        if self.family == "normal":
            return self.mu
        return self.x_min_used * 2 ** (1 / (self.exponent - 1))

    def to_dict(self, quantity: str | None = None) -> dict:
        d = {"family": self.family, "params": dict(self.params), "x_min": self.x_min_used,
             "r2": self.r2, "n": self.n}
        if quantity is not None:
            d = {"quantity": quantity, **d}
        return d


@dataclass
class BimodalFit:
    comp1: FitResult
    comp2: FitResult
    weight1: float
    converged: bool
    iterations: int
    log_likelihood: float

    @property
    def weight2(self) -> float:
        return 1.0 - self.weight1


@dataclass
class UserExponents:
    exponents: dict[str, float]
    r2: dict[str, float]
    fit: FitResult
    skipped: list[str] = field(default_factory=list)

    @property
    def mean_r2(self) -> float:
        return float(np.mean(list(self.r2.values())))


def _positive_array(samples, what="samples") -> np.ndarray:
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ArgumentError(f"{what} must be non-empty")
    if not np.all(x > 0):
        raise ArgumentError(f"{what} must be strictly positive")
    return x


def log_binned_pdf(samples, bins_per_decade: int = DEFAULT_BINS_PER_DECADE) -> LogHistogram:
    """Histogram with geometric bins starting at the sample minimum.

    Bin k covers ``[min*10**(k/b), min*10**((k+1)/b))``; enough bins are
    laid down to contain the maximum. ``pdf = count / (n * width)``.
    """
    if bins_per_decade < 1:
        raise ArgumentError("bins_per_decade must be >= 1")
    x = _positive_array(samples)
    lo, hi = float(x.min()), float(x.max())
    nbins = int(math.floor(math.log10(hi / lo) * bins_per_decade)) + 1
    edges = lo * 10.0 ** (np.arange(nbins + 1) / bins_per_decade)
    while edges[-1] <= hi:
        edges = np.append(edges, lo * 10.0 ** (len(edges) / bins_per_decade))
    while len(edges) > 2 and edges[-2] > hi:
        edges = edges[:-1]
    idx = np.searchsorted(edges, x, side="right") - 1
    counts = np.bincount(idx, minlength=len(edges) - 1)
    pdf = counts / (x.size * np.diff(edges))
    return LogHistogram(edges, counts, pdf, int(x.size))


def _r2(y: np.ndarray, pred: np.ndarray) -> float:
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else 0.0
    return 1.0 - ss_res / ss_tot


def fit_powerlaw_lsq(h: LogHistogram, min_count: int = 1) -> FitResult:
    """Regress log pdf on log bin centre over bins holding >= ``min_count`` samples."""
    mask = h.counts >= max(min_count, 1)
    if np.count_nonzero(mask) < 3:
        raise InsufficientDataError("power-law regression needs at least 3 occupied bins")
    lx = np.log(h.centers[mask])
    ly = np.log(h.pdf[mask])
    slope, intercept = np.polyfit(lx, ly, 1)
    return FitResult(
        "powerlaw",
        {"exponent": float(-slope), "intercept": float(intercept)},
        n=h.n,
        x_min_used=h.x_min,
        r2=_r2(ly, slope * lx + intercept),
    )


def _mle_exponent(tail: np.ndarray, x_min: float) -> float:
    s = float(np.sum(np.log(tail / x_min)))
    if s == 0:
        raise DegenerateSampleError("all samples equal x_min; exponent undefined")
    return 1.0 + tail.size / s


def _ks_distance(tail_sorted: np.ndarray, x_min: float, alpha: float) -> float:
    n = tail_sorted.size
    model = 1.0 - (tail_sorted / x_min) ** (1.0 - alpha)
    upper = np.arange(1, n + 1) / n
    return float(max(np.max(np.abs(upper - model)), np.max(np.abs(upper - 1.0 / n - model))))


def scan_x_min(samples, max_candidates: int = 200, min_tail: int = 10) -> tuple[float, float]:
    """Pick the x_min minimizing the Kolmogorov-Smirnov distance of the tail fit.

    Returns ``(x_min, ks_distance)``.
    """
    x = np.sort(_positive_array(samples))
    uniq = np.unique(x[: max(x.size - min_tail, 1)])
    if uniq.size > max_candidates:
        uniq = uniq[np.linspace(0, uniq.size - 1, max_candidates).astype(int)]
    best = (math.inf, float(x[0]))
    for xm in uniq:
        tail = x[np.searchsorted(x, xm, side="left"):]
        if tail.size < 2:
            continue
        try:
            alpha = _mle_exponent(tail, xm)
        except DegenerateSampleError:
            continue
        d = _ks_distance(tail, xm, alpha)
        if d < best[0]:
            best = (d, float(xm))
    if math.isinf(best[0]):
        raise InsufficientDataError("no usable x_min candidate")
    return best[1], best[0]


def fit_powerlaw_mle(samples, x_min: float | None = None, scan: bool = False) -> FitResult:
    """Continuous power-law MLE: ``alpha = 1 + n / sum(ln(x / x_min))``.

    ``x_min`` defaults to the sample minimum; ``scan=True`` chooses it by
    the KS criterion instead.
    """
    x = _positive_array(samples)
    ks = None
    if scan:
        x_min, ks = scan_x_min(x)
    elif x_min is None:
        x_min = float(x.min())
    if x_min <= 0:
        raise ArgumentError("x_min must be positive")
    tail = x[x >= x_min]
    if tail.size < 2:
        raise InsufficientDataError("need at least 2 samples >= x_min")
    params = {"exponent": _mle_exponent(tail, x_min)}
    if ks is not None:
        params["ks"] = ks
    return FitResult("powerlaw", params, n=int(tail.size), x_min_used=float(x_min))


def fit_lognormal(samples) -> FitResult:
    x = _positive_array(samples)
    if x.size < 2:
        raise InsufficientDataError("log-normal fit needs at least 2 samples")
    y = np.log(x)
    degenerate = bool(np.all(y == y[0]))
    # identical samples must give exactly zero spread, not rounding noise
    mu, sigma = (float(y[0]), 0.0) if degenerate else (float(y.mean()), float(y.std()))
    r2 = None
    if x.size >= 30 and not degenerate:
        h = log_binned_pdf(x)
        m = h.counts > 0
        c = h.centers[m]
        model = -np.log(c * sigma * math.sqrt(2 * math.pi)) - (np.log(c) - mu) ** 2 / (2 * sigma**2)
        r2 = _r2(np.log(h.pdf[m]), model)
    return FitResult("lognormal", {"mu": mu, "sigma": sigma}, n=int(x.size), r2=r2, degenerate=degenerate)


def fit_normal(samples) -> FitResult:
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2:
        raise InsufficientDataError("normal fit needs at least 2 samples")
    degenerate = bool(np.all(x == x[0]))
    mu, sigma = (float(x[0]), 0.0) if degenerate else (float(x.mean()), float(x.std()))
    return FitResult("normal", {"mu": mu, "sigma": sigma}, n=int(x.size), degenerate=degenerate)


def _normal_logpdf(y, mu, sigma):
    return -0.5 * ((y - mu) / sigma) ** 2 - math.log(sigma) - 0.5 * math.log(2 * math.pi)


def _em(y: np.ndarray, resp: np.ndarray, tol: float, max_iter: int):
    """Two-component Gaussian EM from initial responsibilities of component 1."""
    n = y.size
    floor = 1e-8 * max(float(y.std()), 1e-300)
    best = None
    prev = -math.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        nk = np.array([resp.sum(), n - resp.sum()])
        if np.any(nk < 1.0):
            raise DegenerateSampleError("mixture component lost all its mass")
        w = nk[0] / n
        mus = np.array([resp @ y / nk[0], (1 - resp) @ y / nk[1]])
        sig = np.sqrt(np.array([resp @ (y - mus[0]) ** 2 / nk[0], (1 - resp) @ (y - mus[1]) ** 2 / nk[1]]))
        if np.any(sig <= floor):
            raise DegenerateSampleError("mixture component collapsed to zero width")
        l1 = math.log(w) + _normal_logpdf(y, mus[0], sig[0])
        l2 = math.log(1 - w) + _normal_logpdf(y, mus[1], sig[1])
        top = np.maximum(l1, l2)
        lse = top + np.log(np.exp(l1 - top) + np.exp(l2 - top))
        ll = float(lse.sum())
        if best is None or ll > best[0]:
            best = (ll, w, mus.copy(), sig.copy())
        resp = np.exp(l1 - lse)
        if ll - prev < tol:
            converged = True
            break
        prev = ll
    return best, converged, it


def fit_bimodal_lognormal(
    samples, tol: float = EM_TOL, max_iter: int = EM_MAX_ITER, seed: int = 0
) -> BimodalFit:
    """Two-component log-normal mixture by EM on the log values.

    Starts from a split at the median of the log samples. If a component
    degenerates, EM is restarted once from seeded random responsibilities
    before giving up with :class:`DegenerateSampleError`. Non-convergence
    within ``max_iter`` is reported through ``converged=False`` with the
    best parameters seen.
    """
    x = _positive_array(samples)
    if x.size < 50:
        raise InsufficientDataError("bimodal fit needs at least 50 samples")
    y = np.log(x)
    resp = (y <= np.median(y)).astype(float)
    try:
        best, converged, it = _em(y, resp, tol, max_iter)
    except DegenerateSampleError:
        rng = np.random.default_rng(seed)
        best, converged, it = _em(y, rng.random(y.size), tol, max_iter)
    ll, w, mus, sig = best
    comps = [(float(mus[0]), float(sig[0]), float(w)), (float(mus[1]), float(sig[1]), float(1 - w))]
    comps.sort(key=lambda c: c[0])
    (m1, s1, w1), (m2, s2, w2) = comps
    n1 = int(round(w1 * x.size))
    return BimodalFit(
        FitResult("lognormal", {"mu": m1, "sigma": s1}, n=n1),
        FitResult("lognormal", {"mu": m2, "sigma": s2}, n=int(x.size) - n1),
        weight1=w1,
        converged=converged,
        iterations=it,
        log_likelihood=ll,
    )


def exponents_from_samples(
    samples_by_user: Mapping[str, Sequence[float]],
    min_samples: int = EXPONENT_MIN_SAMPLES,
    bins_per_decade: int = DEFAULT_BINS_PER_DECADE,
    min_count: int = EXPONENT_MIN_BIN_COUNT,
) -> UserExponents:
    """Fit a power law to each user's sample and a normal to the exponents.

    Non-positive values are discarded before binning. Users with fewer than
    ``min_samples`` usable values, or too few populated bins, are skipped.
    """
    exps: dict[str, float] = {}
    r2s: dict[str, float] = {}
    skipped = []
    for user in sorted(samples_by_user):
        x = np.asarray(samples_by_user[user], dtype=float)
        x = x[x > 0]
        if x.size < min_samples:
            skipped.append(user)
            continue
        try:
            res = fit_powerlaw_lsq(log_binned_pdf(x, bins_per_decade), min_count=min_count)
        except InsufficientDataError:
            skipped.append(user)
            continue
        exps[user] = res.exponent
        r2s[user] = res.r2
    if not exps:
        raise InsufficientDataError("no user has enough samples for an exponent fit")
    return UserExponents(exps, r2s, fit_normal(list(exps.values())), skipped)


def per_user_exponents(
    profiles: Iterable,
    quantity: str = "interclick",
    sessions: Mapping[str, Iterable] | None = None,
    **kwargs,
) -> UserExponents:
    """Exponent distribution across users for interclick times or session durations.

    ``quantity="session_duration"`` needs ``sessions``: user -> iterable of
    session summaries or metrics (anything with ``duration_ms`` or a
    ``metrics.duration_ms``). Durations are converted to seconds.
    """
    samples: dict[str, np.ndarray] = {}
    if quantity == "interclick":
        for p in profiles:
            samples[p.user] = p.interclicks_s
    elif quantity == "session_duration":
        if sessions is None:
            raise ArgumentError("session_duration exponents need per-user sessions")
        for p in profiles:
            durs = [getattr(s, "metrics", s).duration_ms / 1000.0 for s in sessions.get(p.user, ())]
            samples[p.user] = np.asarray(durs, dtype=float)
    else:
        raise ArgumentError(f"unknown quantity {quantity!r}")
    return exponents_from_samples(samples, **kwargs)
