"""Core data containers: raw site data, shareable summaries, coefficient bundles.

``StudyData`` never leaves the site that owns it.  ``LocalSummary`` is the
only object that crosses the site boundary: the triple (n, H, g) plus
provenance metadata.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DataError
from .families import LossFamily, as_family, symmetrize_upper

SUMMARY_SCHEMA_VERSION = 1


def check_design(X) -> np.ndarray:
    """Validate a design matrix: float64, finite, leading all-ones column."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DataError("design matrix must be 2-dimensional")
    n, p = X.shape
    if n < 2 or p < 2:
        raise DataError(f"design must be at least 2x2, got {n}x{p}")
    if not np.isfinite(X).all():
        raise DataError("design matrix contains non-finite entries")
    if not (X[:, 0] == 1.0).all():
        raise DataError("first design column must be the all-ones intercept")
    return X


@dataclass
class StudyData:
    """One site's raw design matrix (intercept first column) and response."""

    X: np.ndarray
    Y: np.ndarray
    site_id: str = "site"

    def __post_init__(self):
        self.X = check_design(self.X)
        self.Y = np.ascontiguousarray(self.Y, dtype=np.float64).ravel()
        if self.Y.shape[0] != self.X.shape[0]:
            raise DataError(
                f"response length {self.Y.shape[0]} does not match design rows {self.X.shape[0]}")
        if not np.isfinite(self.Y).all():
            raise DataError("response contains non-finite entries")
        self.X.setflags(write=False)
        self.Y.setflags(write=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


@dataclass
class LocalSummary:
    """The shareable per-site triple (n, H, g) plus provenance metadata."""

    site_id: str
    n: int
    H: np.ndarray
    g: np.ndarray
    family: LossFamily
    lambda_m: float = 0.0
    schema_version: int = SUMMARY_SCHEMA_VERSION

    def __post_init__(self):
        self.family = as_family(self.family)
        self.H = np.ascontiguousarray(self.H, dtype=np.float64)
        self.g = np.ascontiguousarray(self.g, dtype=np.float64).ravel()
        p = self.g.shape[0]
        if self.H.shape != (p, p):
            raise DataError(f"H has shape {self.H.shape}, expected ({p}, {p})")
        if not (np.isfinite(self.H).all() and np.isfinite(self.g).all()):
            raise DataError("summary contains non-finite entries")
        scale = max(np.abs(self.H).max(), 1.0)
        if np.abs(self.H - self.H.T).max() > 1e-10 * scale:
            raise DataError("H is not symmetric")
        self.H = symmetrize_upper(self.H)
        if self.n < 1:
            raise DataError("observation count must be positive")
        self.n = int(self.n)
        self.lambda_m = float(self.lambda_m)
        self.H.setflags(write=False)
        self.g.setflags(write=False)

    @property
    def p(self) -> int:
        return self.g.shape[0]


def check_summaries(summaries) -> list[LocalSummary]:
    """Validate a collection of summaries destined for one aggregation."""
    summaries = list(summaries)
    if not summaries:
        raise ContractViolation("at least one summary is required")
    p = summaries[0].p
    family = summaries[0].family
    seen = set()
    for s in summaries:
        if s.p != p:
            raise ContractViolation(
                f"summary from site {s.site_id!r} has p={s.p}, expected p={p}")
        if s.family != family:
            raise ContractViolation(
                f"summary from site {s.site_id!r} has family {s.family}, expected {family}")
        if s.site_id in seen:
            raise ContractViolation(f"duplicate site_id {s.site_id!r}")
        seen.add(s.site_id)
    return summaries


@dataclass
class CoefficientBundle:
    """Joint estimate: shared effect mu, per-site deviations alpha, beta = mu + alpha."""

    mu: np.ndarray
    alpha: np.ndarray  # M x p, rows sum to zero columnwise

    def __post_init__(self):
        self.mu = np.ascontiguousarray(self.mu, dtype=np.float64).ravel()
        self.alpha = np.ascontiguousarray(self.alpha, dtype=np.float64)
        if self.alpha.ndim != 2 or self.alpha.shape[1] != self.mu.shape[0]:
            raise ContractViolation(
                f"alpha has shape {self.alpha.shape}, expected (M, {self.mu.shape[0]})")

    @property
    def n_sites(self) -> int:
        return self.alpha.shape[0]

    @property
    def p(self) -> int:
        return self.mu.shape[0]

    @property
    def beta(self) -> np.ndarray:
        """M x p matrix of per-site coefficients, row m is mu + alpha[m]."""
        return self.mu[None, :] + self.alpha

    @property
    def active_mu(self) -> np.ndarray:
        """Indices j >= 1 (0-based, past the intercept) with mu_j != 0."""
        nz = np.flatnonzero(self.mu != 0.0)
        return nz[nz >= 1]

    @property
    def active_alpha(self) -> np.ndarray:
        """Indices j >= 1 with a nonzero deviation group ||alpha_j||_2."""
        norms = np.linalg.norm(self.alpha, axis=0)
        nz = np.flatnonzero(norms != 0.0)
        return nz[nz >= 1]

    def max_constraint_violation(self) -> float:
        return float(np.abs(self.alpha.sum(axis=0)).max())


class GammaSchedule(str, enum.Enum):
    AIC = "aic"
    BIC = "bic"
    MBIC = "mbic"
    RIC = "ric"


@dataclass
class PenaltyConfig:
    """Aggregator penalty state: overall weight, group weight, GIC schedule."""

    lam: float
    lambda_g: float
    gamma_schedule: GammaSchedule = GammaSchedule.BIC

    def __post_init__(self):
        if self.lam < 0 or self.lambda_g < 0:
            raise ContractViolation("penalty weights must be nonnegative")
        self.gamma_schedule = GammaSchedule(self.gamma_schedule)

    @staticmethod
    def default_lambda_g(n_sites: int) -> float:
        # the group weight lives on the M^(-1/2) scale
        return 1.0 / np.sqrt(n_sites)


def gamma_value(schedule, N: int, p: int) -> float:
    """Per-parameter information-criterion weight for a design of size N x p."""
    schedule = GammaSchedule(schedule)
    if schedule is GammaSchedule.AIC:
        return 2.0 / N
    if schedule is GammaSchedule.BIC:
        return np.log(N) / N
    if schedule is GammaSchedule.MBIC:
        return np.log(np.log(p)) * np.log(N) / N
    return 2.0 * np.log(p) / N
