"""Population-relative anomaly scoring of users.

Behavioural features are log-normal across the human population, so a
user is scored by how many log-space standard deviations each feature sits
from the population's log mean. Separately, human interclick times are
heavy-tailed and irregular; a tiny coefficient of variation of a client's
interclick times marks it as machine-paced.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, InsufficientDataError
from .fit import FitResult, fit_lognormal
from .stats import SessionProfile, UserProfile, session_profile

FEATURES = ("rate_rps", "jump_ratio", "ref_host_ratio", "mean_session_requests", "mean_session_depth")
MIN_USERS = 10
DEFAULT_Z_THRESHOLD = 3.0
DEFAULT_CV_THRESHOLD = 0.1


@dataclass
class PopulationModel:
    fits: dict[str, FitResult]
    n_users: int

    @property
    def degenerate(self) -> list[str]:
        return [f for f, r in self.fits.items() if r.degenerate]


@dataclass
class AnomalyReport:
    user: str
    z_scores: dict[str, float]
    max_abs_z: float
    regularity_cv: float | None
    flags: list[str]
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "user": self.user,
            "z_scores": self.z_scores,
            "max_abs_z": self.max_abs_z,
            "regularity_cv": self.regularity_cv,
            "flags": self.flags,
            "notes": self.notes,
        }


def _session_profile(x, user: str) -> SessionProfile:
    return x if isinstance(x, SessionProfile) else session_profile(x, user=user)


def user_features(profile: UserProfile, sessions: SessionProfile | Iterable) -> dict[str, float | None]:
    sp = _session_profile(sessions, profile.user)
    return {
        "rate_rps": profile.rate_rps,
        "jump_ratio": profile.jump_ratio,
        "ref_host_ratio": profile.ref_host_ratio,
        "mean_session_requests": sp.mean_requests,
        "mean_session_depth": sp.mean_depth,
    }


def regularity_cv(interclicks_s) -> float | None:
    """Coefficient of variation of interclick times; None with fewer than 2 gaps."""
    x = np.asarray(interclicks_s, dtype=float)
    if x.size < 2 or x.mean() <= 0:
        return None
    return float(x.std() / x.mean())


def build_population_model(
    profiles: Iterable[UserProfile], session_metrics: Mapping[str, SessionProfile | Iterable]
) -> PopulationModel:
    """Fit a log-normal per feature over users whose value is positive."""
    values: dict[str, list[float]] = {f: [] for f in FEATURES}
    complete = 0
    for p in profiles:
        feats = user_features(p, session_metrics.get(p.user, ()))
        if all(v is not None and v > 0 for v in feats.values()):
            complete += 1
        for f, v in feats.items():
            if v is not None and v > 0:
                values[f].append(v)
    if complete < MIN_USERS:
        raise InsufficientDataError(f"need at least {MIN_USERS} users with complete features, got {complete}")
    return PopulationModel({f: fit_lognormal(v) for f, v in values.items()}, complete)


def score_user(
    profile: UserProfile,
    metrics: SessionProfile | Iterable,
    model: PopulationModel,
    z_threshold: float = DEFAULT_Z_THRESHOLD,
    cv_threshold: float = DEFAULT_CV_THRESHOLD,
) -> AnomalyReport:
    if z_threshold <= 0 or cv_threshold <= 0:
        raise ArgumentError("thresholds must be positive")
    feats = user_features(profile, metrics)
    z: dict[str, float] = {}
    notes = []
    for f in FEATURES:
        v = feats[f]
        fit = model.fits[f]
        if v is None or v <= 0:
            notes.append(f"missing:{f}")
        elif fit.degenerate:
            notes.append(f"degenerate:{f}")
        else:
            z[f] = (math.log(v) - fit.mu) / fit.sigma
    max_abs = max((abs(v) for v in z.values()), default=0.0)
    cv = regularity_cv(profile.interclicks_s)
    flags = []
    if max_abs > z_threshold:
        flags.append("outlier")
    if cv is not None and cv < cv_threshold:
        flags.append("too_regular")
    return AnomalyReport(profile.user, z, max_abs, cv, flags, notes)
