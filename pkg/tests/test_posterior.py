import itertools

import numpy as np
import pytest

from dhbclt.bpe import HazardParams
from dhbclt.data import simulate_cohort, two_cluster_scenario
from dhbclt.exceptions import UnassignableSubjectError
from dhbclt.lmm import LmmPriors, build_design
from dhbclt.oracles import (oracle_best_placement, oracle_log_dm, oracle_partition_objective,
                            oracle_small_partition_search, oracle_subject_loglik)
from dhbclt.posterior import (ClusterParams, CohortData, MixtureConfig, assign_subject,
                              assignment_scores, cluster_log_prior, fit_cluster,
                              log_dirichlet_multinomial, log_dm_from_sizes, log_posterior,
                              subject_loglik)


@pytest.fixture(scope="module")
def planted():
    sc = two_cluster_scenario(n_subjects=8, seed=1)
    cohort, labels = simulate_cohort(sc)
    data = CohortData(cohort)
    J = len(data.grids[0].cuts)
    params = [ClusterParams(c.lmm, (HazardParams(np.full(J, c.lambdas[0][0])),))
              for c in sc.clusters]
    return data, labels, params


def config(K=None, alpha=1.0):
    return MixtureConfig(alpha=alpha, K=K, lmm_priors=LmmPriors.default(2))


def test_dm_examples():
    assert log_dirichlet_multinomial([1, 1], 1.0) == pytest.approx(np.log(1 / 6), abs=1e-12)
    assert log_dirichlet_multinomial([1, 1], 1.0) == pytest.approx(-1.791759469228055)
    for alpha in (0.01, 1.0, 50.0):
        assert log_dirichlet_multinomial([7], alpha) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        log_dirichlet_multinomial([1, 2], 0.0)


def test_dm_matches_oracle_and_permutation(rng):
    for _ in range(30):
        counts = rng.integers(0, 6, size=rng.integers(1, 6))
        alpha = float(np.exp(rng.uniform(-5, 4)))
        val = log_dirichlet_multinomial(counts, alpha)
        assert val == pytest.approx(oracle_log_dm(list(counts), alpha), abs=1e-9)
        assert log_dirichlet_multinomial(rng.permutation(counts), alpha) == pytest.approx(
            val, abs=1e-9)
        K = counts.size + 3
        padded = np.r_[counts, np.zeros(3)]
        nonzero = counts[counts > 0]
        assert log_dm_from_sizes(nonzero, K, alpha) == pytest.approx(
            log_dirichlet_multinomial(padded, alpha), abs=1e-9)


def test_dm_sizes_exceeding_K():
    with pytest.raises(ValueError):
        log_dm_from_sizes([1, 2, 3], 2, 1.0)


def test_subject_loglik_matches_oracle(planted):
    data, _, params = planted
    cohort = data.cohort
    for i in range(len(data)):
        t = cohort.times[i]
        X, W = build_design(t)
        st, sd = cohort.survival["event"]
        for p in params:
            want = oracle_subject_loglik(cohort.Y[i], X, W, p.lmm, [(st[i], sd[i])],
                                         [data.grids[0].cuts], [p.hazards[0].lambdas])
            assert subject_loglik(data.subject(i), p) == pytest.approx(want, abs=1e-8)
            assert data.subject_logliks(p, [i])[0] == pytest.approx(want, abs=1e-8)


def test_assignment_rule_matches_oracle():
    rng = np.random.default_rng(7)
    for _ in range(200):
        n, K = 8, 3
        lls = rng.normal(-5, 3, size=(n, K))
        priors = list(rng.normal(-2, 1, size=K))
        alpha = float(np.exp(rng.uniform(-4, 3)))
        i = int(rng.integers(n))
        others = [j for j in range(n) if j != i]
        # every component keeps at least one other member
        part = np.empty(n, dtype=int)
        part[others] = np.r_[np.arange(K), rng.integers(0, K, size=n - 1 - K)]
        part[i] = 0
        counts = np.bincount(part[others], minlength=K)
        ours = int(np.argmax(assignment_scores(lls[i], counts, alpha)))
        assert ours == oracle_best_placement(i, list(part), lls.tolist(), priors, K, alpha)


def test_assign_subject(planted):
    data, _, params = planted
    for i in range(len(data)):
        counts = np.array([3.0, 4.0])
        ll = data.loglik_matrix(params, [i])[0]
        want = int(np.argmax(ll + np.log(counts + 0.5)))
        assert assign_subject(data.subject(i), params, counts, 0.5) == want
    with pytest.raises(ValueError):
        assign_subject(data.subject(0), [], [], 1.0)


def test_unassignable_subject(planted):
    data, _, params = planted
    i = int(np.flatnonzero(data.d[0])[0])
    dead = [ClusterParams(p.lmm, (HazardParams(np.zeros(len(data.grids[0].cuts))),))
            for p in params]
    with pytest.raises(UnassignableSubjectError):
        assign_subject(data.subject(i), dead, [1.0, 1.0], 1.0)


def test_incremental_move_matches_full_recompute(planted):
    data, _, params = planted
    cfg = config()
    labels = np.array([0, 0, 0, 1, 1, 1, 0, 1])
    pmap = dict(enumerate(params))
    base = log_posterior(data, labels, pmap, cfg)
    for i in range(len(data)):
        a, b = labels[i], 1 - labels[i]
        moved = labels.copy()
        moved[i] = b
        counts = np.bincount(np.delete(labels, i), minlength=2)
        ll = data.loglik_matrix(params, [i])[0]
        delta = ll[b] - ll[a] + np.log(counts[b] + cfg.alpha) - np.log(counts[a] + cfg.alpha)
        assert log_posterior(data, moved, pmap, cfg) - base == pytest.approx(delta, abs=1e-9)


def test_relabel_invariance_and_empty_components(planted):
    data, _, params = planted
    cfg = config()
    labels = np.array([0, 0, 0, 1, 1, 1, 0, 1])
    a = log_posterior(data, labels, {0: params[0], 1: params[1]}, cfg)
    b = log_posterior(data, np.where(labels == 0, 7, 3), {7: params[0], 3: params[1]}, cfg)
    assert a == pytest.approx(b, abs=1e-12)
    # parameters of empty components never enter
    c = log_posterior(data, labels, {0: params[0], 1: params[1], 2: params[0]}, cfg)
    assert a == c
    with pytest.raises(ValueError):
        log_posterior(data, labels[:-1], {0: params[0], 1: params[1]}, cfg)


def test_objective_matches_oracle_on_all_partitions(planted):
    data, labels, params = planted
    cfg = config(K=2, alpha=0.7)
    lls = data.loglik_matrix(params).tolist()
    priors = [cluster_log_prior(p, cfg) for p in params]
    best, best_val = None, -np.inf
    for lab in itertools.product(range(2), repeat=len(data)):
        ours = log_posterior(data, lab, dict(enumerate(params)), cfg)
        assert ours == pytest.approx(oracle_partition_objective(lls, lab, priors, 2, 0.7),
                                     abs=1e-8)
        if ours > best_val:
            best, best_val = list(lab), ours
    want, want_val = oracle_small_partition_search(lls, priors, 0.7, K=2)
    assert best == want and best_val == pytest.approx(want_val, abs=1e-8)
    # the planted grouping is recovered by the exhaustive optimum
    truth = (np.asarray(labels) - 1).tolist()
    assert best == truth or best == [1 - x for x in truth]


def test_fit_cluster_returns_consistent_posterior(planted):
    data, _, _ = planted
    cfg = config()
    idx = np.arange(len(data))
    params, lp, trace = fit_cluster(data, idx, cfg)
    want = float(np.sum(data.subject_logliks(params, idx))) + cluster_log_prior(params, cfg)
    assert lp == pytest.approx(want, abs=1e-9)
    assert np.all(np.diff(trace) >= -1e-9)


def test_mixture_config_validation():
    with pytest.raises(ValueError):
        MixtureConfig(alpha=0.0)
    with pytest.raises(ValueError):
        MixtureConfig(K=0)
    with pytest.raises(ValueError):
        MixtureConfig(survival_model="cox")
    assert config().with_alpha(3.0).alpha == 3.0
