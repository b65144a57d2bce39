"""Piecewise-exponential survival model with conjugate Gamma MAP.

The hazard is constant on ``[a_{j-1}, a_j)``. The likelihood is handled through
its Poisson expansion: each subject contributes an event indicator ``N_ij`` and
a risk time ``T_ij`` per interval, and the Gamma(a, b) prior on each interval
hazard is conjugate.
"""
import math
from dataclasses import dataclass
from typing import Hashable

import numpy as np
from scipy import optimize
from scipy.special import gammaln

from .exceptions import ChangepointOrderError, GridCoverageError

@dataclass(frozen=True)
class SurvivalRecord:
    subject_id: Hashable
    t: float
    d: int

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError(f"survival time must be positive, got {self.t} "
                             f"for subject {self.subject_id!r}")
        if self.d not in (0, 1):
            raise ValueError(f"event indicator must be 0 or 1, got {self.d!r}")


@dataclass(frozen=True)
class ChangepointGrid:
    """Changepoints ``a_1 < ... < a_J``; ``a_0 = 0`` is implicit."""

    cuts: tuple

    def __post_init__(self):
        cuts = tuple(float(c) for c in self.cuts)
        if not cuts:
            raise ValueError("a grid needs at least one changepoint")
        if cuts[0] <= 0 or any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise ChangepointOrderError(f"changepoints must be positive and strictly "
                                        f"increasing: {cuts}")
        object.__setattr__(self, "cuts", cuts)

    @property
    def J(self):
        return len(self.cuts)

    @property
    def edges(self):
        return np.concatenate([[0.0], self.cuts])

    @classmethod
    def regular(cls, width, max_time):
        """Cuts every ``width`` time units until ``max_time`` is covered."""
        if not width > 0:
            raise ValueError("grid width must be positive")
        n = max(1, int(math.ceil(max_time / width - 1e-12)))
        cuts = [width * (j + 1) for j in range(n)]
        if cuts[-1] < max_time:
            cuts.append(cuts[-1] + width)
        return cls(tuple(cuts))


@dataclass(frozen=True)
class PoissonRow:
    subject_id: Hashable
    interval: int
    N: int
    T: float


@dataclass(frozen=True)
class HazardParams:
    lambdas: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=float)
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ValueError("hazards must be finite and nonnegative")
        object.__setattr__(self, "lambdas", lam)

    def to_dict(self):
        return {"model": "bpe", "lambdas": self.lambdas.tolist()}


@dataclass(frozen=True)
class GammaPrior:
    a: float = 1.0
    b: float = 0.1

    def __post_init__(self):
        if self.a < 1:
            raise ValueError("Gamma prior shape must be >= 1 for a nonnegative MAP")
        if not self.b > 0:
            raise ValueError("Gamma prior rate must be positive")

    def logpdf(self, lambdas):
        lam = np.asarray(lambdas, dtype=float)
        with np.errstate(divide="ignore"):
            log_lam = np.where(lam > 0, np.log(np.where(lam > 0, lam, 1.0)),
                               0.0 if self.a == 1 else -np.inf)
        return (self.a * np.log(self.b) - gammaln(self.a)
                + (self.a - 1) * log_lam - self.b * lam)


def _as_records(records):
    out = []
    for r in records:
        out.append(r if isinstance(r, SurvivalRecord) else SurvivalRecord(*r))
    return out


def adjust_changepoints(grid, times, eps):
    """Shift any changepoint equal to an observed time by ``+eps``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    observed = set(float(t) for t in times)
    cuts = list(grid.cuts)
    for j, c in enumerate(cuts):
        if c in observed:
            shifted = c + eps
            upper = cuts[j + 1] if j + 1 < len(cuts) else math.inf
            if not shifted < upper or shifted in observed:
                raise ChangepointOrderError(
                    f"shifting changepoint {c} by {eps} collides with {upper}")
            cuts[j] = shifted
    return ChangepointGrid(tuple(cuts))


def default_eps(times):
    return 1e-9 * max(float(np.max(times)), 1.0)


def exposure_matrix(t, d, grid):
    """Dense Poisson expansion: event counts and risk times, both ``n x J``."""
    t = np.asarray(t, dtype=float)
    d = np.asarray(d, dtype=int)
    edges = grid.edges
    if t.size and t.max() > edges[-1]:
        raise GridCoverageError(f"time {t.max()} exceeds the last changepoint "
                                f"{edges[-1]}")
    lo, hi = edges[:-1], edges[1:]
    T = np.clip(np.minimum(t[:, None], hi[None, :]) - lo[None, :], 0.0, None)
    # interval j holds t when a_{j-1} < t <= a_j
    idx = np.searchsorted(hi, t, side="left")
    N = np.zeros_like(T)
    N[np.arange(t.size), np.minimum(idx, grid.J - 1)] = d
    return N, T


def expand_poisson(records, grid):
    """Poisson rows per subject and interval; rows with zero risk time omitted."""
    records = _as_records(records)
    t = np.array([r.t for r in records])
    d = np.array([r.d for r in records])
    N, T = exposure_matrix(t, d, grid)
    rows = []
    for i, r in enumerate(records):
        for j in range(grid.J):
            if T[i, j] > 0:
                rows.append(PoissonRow(r.subject_id, j + 1, int(N[i, j]), float(T[i, j])))
    return rows


def poisson_loglik(N, T, lambdas):
    """Per-subject Poisson-kernel log-likelihood ``sum_j N log(lambda) - lambda T``.

    Returns ``-inf`` for a subject with an event in a zero-hazard interval.
    The ``N log T`` and ``log N!`` terms of the full Poisson density are
    constant in the hazards and omitted.
    """
    lam = np.asarray(lambdas, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_lam = np.log(lam)
        ev = np.where(N > 0, N * log_lam[None, :], 0.0)
    return ev.sum(axis=1) - T @ lam


def bpe_loglik(records, params, grid):
    """Right-censored piecewise-exponential log-likelihood.

    ``sum_i [d_i log lambda(t_i) - Lambda(t_i)]``; ``-inf`` if an event falls in
    an interval with zero hazard.
    """
    records = _as_records(records)
    t = np.array([r.t for r in records])
    d = np.array([r.d for r in records])
    N, T = exposure_matrix(t, d, grid)
    return float(np.sum(poisson_loglik(N, T, params.lambdas)))


def bpe_posterior_params(records, grid, prior):
    """Per-interval Gamma posterior ``(a + sum N, b + sum T)``."""
    records = _as_records(records)
    t = np.array([r.t for r in records], dtype=float)
    d = np.array([r.d for r in records], dtype=int)
    N, T = exposure_matrix(t, d, grid)
    return prior.a + N.sum(0), prior.b + T.sum(0)


def bpe_map_from_totals(events, exposure, prior):
    return HazardParams((prior.a - 1 + np.asarray(events)) / (prior.b + np.asarray(exposure)))


def bpe_map(records, grid, prior=None):
    """Conjugate MAP hazards ``(a - 1 + sum N) / (b + sum T)``.

    Intervals nobody is at risk in get the prior mode ``(a - 1) / b``.
    """
    prior = GammaPrior() if prior is None else prior
    shape, rate = bpe_posterior_params(records, grid, prior)
    return HazardParams((shape - 1) / rate)


def bpe_log_prior(params, prior):
    return float(np.sum(prior.logpdf(params.lambdas)))


def kaplan_meier(records):
    """Product-limit survival estimate.

    Returns a list of ``(time, survival, at_risk, events)`` tuples, one per
    distinct observed time. Censorings tied with events at the same time are
    counted as still at risk for those events.
    """
    records = _as_records(records)
    if not records:
        raise ValueError("kaplan_meier needs at least one record")
    t = np.array([r.t for r in records], dtype=float)
    d = np.array([r.d for r in records], dtype=int)
    times = np.unique(t)
    out = []
    surv = 1.0
    for u in times:
        at_risk = int(np.sum(t >= u))
        events = int(np.sum((t == u) & (d == 1)))
        if events:
            surv *= 1.0 - events / at_risk
        out.append((float(u), surv, at_risk, events))
    return out


def km_survival_at(table, time):
    """Evaluate a Kaplan-Meier table (right-continuous step function)."""
    s = 1.0
    for u, surv, _, _ in table:
        if u <= time:
            s = surv
        else:
            break
    return s


@dataclass(frozen=True)
class WeibullParams:
    """Single Weibull with ``S(t) = exp(-(t / scale) ** shape)``."""

    shape: float
    scale: float

    def to_dict(self):
        return {"model": "weibull", "shape": float(self.shape), "scale": float(self.scale)}


def weibull_loglik_terms(t, d, params):
    t = np.asarray(t, dtype=float)
    d = np.asarray(d, dtype=float)
    k, s = params.shape, params.scale
    z = t / s
    return d * (np.log(k / s) + (k - 1) * np.log(z)) - z ** k


def fit_weibull(t, d):
    """Maximum-likelihood Weibull fit for right-censored data."""
    t = np.asarray(t, dtype=float)
    d = np.asarray(d, dtype=float)
    if d.sum() == 0:
        # no events: likelihood increases without bound in scale
        return WeibullParams(1.0, float(t.max()) * 1e6)
    f = lambda th: -np.sum(weibull_loglik_terms(t, d, WeibullParams(*np.exp(th))))
    x0 = np.array([0.0, np.log(np.mean(t))])
    res = optimize.minimize(f, x0, method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000})
    return WeibullParams(*(float(v) for v in np.exp(res.x)))
