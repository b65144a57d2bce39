"""Marginalized mixture log posterior and the hard-assignment rule.

With component weights integrated out under a symmetric Dirichlet(alpha), the
objective for a partition ``Z`` and component parameters is

    sum_k sum_{i in k} log f(subject_i | theta_k)
    + sum_{nonempty k} log pi_1(theta_k) + sum_{empty k} log pi_0
    + log DM(n_1, ..., n_K; alpha)

up to an additive constant. ``f`` multiplies the matrix-normal LMM
likelihood with one survival likelihood per time-to-event variable.
"""
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .bpe import (ChangepointGrid, GammaPrior, HazardParams, WeibullParams,
                  adjust_changepoints, bpe_log_prior, bpe_map_from_totals,
                  default_eps, exposure_matrix, fit_weibull, poisson_loglik,
                  weibull_loglik_terms)
from .exceptions import UnassignableSubjectError
from .lmm import (DesignSpec, LmmParams, LmmPriors, LmmStats, build_design,
                  fit_lmm_map, lmm_log_prior)


@dataclass(frozen=True)
class ClusterParams:
    lmm: LmmParams
    hazards: tuple = ()

    def to_dict(self):
        return {"lmm": None if self.lmm is None else self.lmm.to_dict(),
                "hazards": [h.to_dict() for h in self.hazards]}


@dataclass(frozen=True)
class MixtureConfig:
    """Hyperparameters of the overfitted mixture.

    ``K=None`` means one component per subject. ``pi0_log_density`` is the log
    density of the flat prior on an empty component's parameters.
    """

    alpha: float = 1.0
    K: int = None
    lmm_priors: LmmPriors = None
    gamma_priors: tuple = ()
    pi0_log_density: float = 0.0
    survival_model: str = "bpe"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.K is not None and self.K < 1:
            raise ValueError("K must be at least 1")
        if self.survival_model not in ("bpe", "weibull"):
            raise ValueError(f"unknown survival model {self.survival_model!r}")

    def gamma_prior(self, e):
        return self.gamma_priors[e] if e < len(self.gamma_priors) else GammaPrior()

    def with_alpha(self, alpha):
        return MixtureConfig(alpha, self.K, self.lmm_priors, self.gamma_priors,
                             self.pi0_log_density, self.survival_model)


@dataclass(frozen=True)
class Subject:
    """One subject's prepared data: LMM statistics plus survival exposures."""

    lmm_stats: LmmStats
    N: tuple  # per event variable: events per interval, shape (J,)
    T: tuple  # per event variable: risk time per interval, shape (J,)
    t: tuple = ()
    d: tuple = ()


def _event_loglik_terms(hazard, N, T, t, d):
    if isinstance(hazard, WeibullParams):
        return weibull_loglik_terms(t, d, hazard)
    return poisson_loglik(N, T, hazard.lambdas)


class CohortData:
    """Cohort in model-ready form: design statistics and survival exposures.

    Parameters
    ----------
    cohort : Cohort
    design : DesignSpec, optional
    grid_width : float
        Width of the regular hazard grid for every event variable.
    grids : sequence of ChangepointGrid, optional
        Explicit grids (override ``grid_width``); adjusted so no cut equals an
        observed time.
    """

    def __init__(self, cohort, design=None, grid_width=0.5, grids=None):
        self.cohort = cohort
        self.design = DesignSpec() if design is None else design
        subjects = []
        for t, y in zip(cohort.times, cohort.Y):
            if len(t):
                X, W = build_design(t, self.design)
            else:
                X = np.zeros((0, self.design.p))
                W = np.zeros((0, self.design.q))
            subjects.append((np.asarray(y, dtype=float).reshape(len(t), cohort.H), X, W))
        self.stats = LmmStats.from_subjects(subjects)
        self.grids = []
        self.N, self.T, self.t, self.d = [], [], [], []
        for e, name in enumerate(cohort.event_names):
            t, d = cohort.survival[name]
            t = np.asarray(t, dtype=float)
            d = np.asarray(d, dtype=int)
            if grids is not None:
                grid = grids[e]
                if grid.cuts[-1] < t.max():
                    raise ValueError(f"grid for {name} does not cover time {t.max()}")
            else:
                grid = ChangepointGrid.regular(grid_width, t.max())
            grid = adjust_changepoints(grid, t, default_eps(t))
            N, T = exposure_matrix(t, d, grid)
            self.grids.append(grid)
            self.N.append(N)
            self.T.append(T)
            self.t.append(t)
            self.d.append(d)

    def __len__(self):
        return self.stats.m

    @property
    def n_events(self):
        return len(self.grids)

    def subject(self, i):
        return Subject(self.stats.subset([i]), tuple(N[i] for N in self.N),
                       tuple(T[i] for T in self.T), tuple(t[i] for t in self.t),
                       tuple(d[i] for d in self.d))

    def subject_logliks(self, params, idx=None):
        """Per-subject log-likelihood under one cluster's parameters."""
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        out = self.stats.subset(idx).subject_logliks(params.lmm)
        for e, hz in enumerate(params.hazards):
            out = out + _event_loglik_terms(hz, self.N[e][idx], self.T[e][idx],
                                            self.t[e][idx], self.d[e][idx])
        return out

    def loglik_matrix(self, candidates, idx=None):
        """``m x len(candidates)`` matrix of subject log-likelihoods."""
        return np.column_stack([self.subject_logliks(p, idx) for p in candidates])


def subject_loglik(subject, params):
    """LMM log-likelihood plus one survival term per event variable.

    A subject without longitudinal rows contributes only its survival terms.
    """
    total = float(subject.lmm_stats.subject_logliks(params.lmm)[0]) if subject.lmm_stats.n[0] else 0.0
    for e, hz in enumerate(params.hazards):
        term = _event_loglik_terms(hz, np.atleast_2d(subject.N[e]),
                                   np.atleast_2d(subject.T[e]),
                                   np.atleast_1d(subject.t[e]) if subject.t else None,
                                   np.atleast_1d(subject.d[e]) if subject.d else None)
        total += float(np.sum(term))
    return total


def log_dirichlet_multinomial(counts, alpha):
    """``log[ G(K a) / G(a)^K * prod G(n_k + a) / G(N + K a) ]`` for counts over ``K`` components."""
    counts = np.asarray(counts, dtype=float)
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    K = counts.size
    N = counts.sum()
    return float(gammaln(K * alpha) - K * gammaln(alpha)
                 + np.sum(gammaln(counts + alpha)) - gammaln(N + K * alpha))


def log_dm_from_sizes(sizes, K, alpha):
    """Dirichlet-multinomial term for nonempty cluster ``sizes`` padded to ``K``."""
    sizes = np.asarray(sizes, dtype=float)
    n_empty = K - sizes.size
    if n_empty < 0:
        raise ValueError(f"{sizes.size} nonempty clusters exceed K={K}")
    N = sizes.sum()
    return float(gammaln(K * alpha) - sizes.size * gammaln(alpha)
                 + np.sum(gammaln(sizes + alpha)) - gammaln(N + K * alpha))


def cluster_log_prior(params, config):
    """``log pi_1(theta)`` for a nonempty component."""
    lp = lmm_log_prior(params.lmm, config.lmm_priors) if params.lmm is not None else 0.0
    for e, hz in enumerate(params.hazards):
        if isinstance(hz, HazardParams):
            lp += bpe_log_prior(hz, config.gamma_prior(e))
    return float(lp)


def _groups(labels):
    labels = np.asarray(labels)
    return {lab: np.flatnonzero(labels == lab) for lab in np.unique(labels)}


def log_posterior(data, labels, all_params, config):
    """Marginalized log posterior of a hard partition (additive constant dropped).

    Parameters
    ----------
    data : CohortData
    labels : sequence of cluster labels, one per subject
    all_params : dict label -> ClusterParams
        Parameters of the nonempty clusters; parameters for empty components
        are irrelevant since their prior is flat.
    config : MixtureConfig
    """
    labels = np.asarray(labels)
    if labels.size != len(data):
        raise ValueError(f"{labels.size} labels for {len(data)} subjects")
    K = len(data) if config.K is None else config.K
    groups = _groups(labels)
    total = 0.0
    for lab, idx in groups.items():
        params = all_params[lab]
        total += float(np.sum(data.subject_logliks(params, idx)))
        total += cluster_log_prior(params, config)
    total += (K - len(groups)) * config.pi0_log_density
    total += log_dm_from_sizes([idx.size for idx in groups.values()], K, config.alpha)
    return total


def assignment_scores(logliks, counts_excluding, alpha):
    """``loglik + log(n_k^{-i} + alpha)`` per candidate (rows: subjects)."""
    return np.asarray(logliks, dtype=float) + np.log(np.asarray(counts_excluding, dtype=float)
                                                     + alpha)


def assign_subject(subject, candidate_params, counts_excluding_subject, alpha):
    """Best cluster for one subject with the others held fixed.

    Moving the subject into cluster ``k`` changes the objective by its
    log-likelihood under ``theta_k`` plus ``log(n_k^{-i} + alpha)``. Ties go to
    the lower index.
    """
    if not candidate_params:
        raise ValueError("at least one candidate is required")
    ll = np.array([subject_loglik(subject, p) for p in candidate_params])
    scores = assignment_scores(ll, counts_excluding_subject, alpha)
    if not np.any(np.isfinite(scores)):
        raise UnassignableSubjectError("every candidate gives zero likelihood")
    return int(np.argmax(scores))


def fit_cluster(data, idx, config, init=None, tol=1e-6, max_iter=200):
    """MAP parameters of one cluster; returns ``(ClusterParams, log_posterior, trace)``.

    ``log_posterior`` is the cluster's summed log-likelihood plus
    ``log pi_1``; ``trace`` is the LMM coordinate-ascent trace.
    """
    idx = np.asarray(idx)
    stats = data.stats.subset(idx)
    fit = fit_lmm_map(stats, config.lmm_priors, init=None if init is None else init.lmm,
                      tol=tol, max_iter=max_iter)
    hazards = []
    for e in range(data.n_events):
        if config.survival_model == "weibull":
            hazards.append(fit_weibull(data.t[e][idx], data.d[e][idx]))
        else:
            hazards.append(bpe_map_from_totals(data.N[e][idx].sum(0), data.T[e][idx].sum(0),
                                               config.gamma_prior(e)))
    params = ClusterParams(fit.params, tuple(hazards))
    lp = float(np.sum(data.subject_logliks(params, idx))) + cluster_log_prior(params, config)
    return params, lp, fit.trace
