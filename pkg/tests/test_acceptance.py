"""Acceptance suite: one test and one printed PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the criterion lines are
written straight to the terminal.
"""
import time
import warnings

import numpy as np
import pytest

from conftest import random_spd
from dhbclt import DHBCLT
from dhbclt.bpe import (ChangepointGrid, GammaPrior, HazardParams, bpe_loglik, bpe_map,
                        exposure_matrix, expand_poisson, kaplan_meier)
from dhbclt.cli import main as cli_main
from dhbclt.data import (adjusted_rand_index, homogeneous_scenario, membership_diff,
                         read_labels, simulate_cohort, two_cluster_scenario, write_cohort)
from dhbclt.divisive import Node, RunConfig, attempt_split
from dhbclt.lmm import LmmPriors, fit_lmm_map
from dhbclt.matnorm import MatNormParams, matnorm_logpdf, woodbury_inverse, woodbury_logdet
from dhbclt.oracles import (oracle_best_placement, oracle_bpe_map, oracle_kaplan_meier,
                            oracle_vecnormal_logpdf)
from dhbclt.posterior import (CohortData, MixtureConfig, assign_subject, cluster_log_prior,
                              fit_cluster)
from test_lmm import omega_stationarity_gap, planted_subjects

SEEDS = range(20)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {n} failed: {detail}"
    return emit


def test_c01_matnorm_equivalence(report):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        n, h = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        R, C = random_spd(rng, n), random_spd(rng, h)
        M, Y = rng.standard_normal((n, h)), rng.standard_normal((n, h))
        got = matnorm_logpdf(Y, MatNormParams(M, R, C))
        worst = max(worst, abs(got - oracle_vecnormal_logpdf(Y, M, (R, C))))
    dt = time.perf_counter() - t0
    report(1, worst < 1e-8 and dt < 5, f"max err {worst:.2e}, {dt:.2f} s")


def test_c02_woodbury(report):
    rng = np.random.default_rng(102)
    t0 = time.perf_counter()
    worst_inv = worst_ld = 0.0
    for _ in range(100):
        N, q = int(rng.integers(1, 21)), int(rng.integers(1, 4))
        W = rng.standard_normal((N, q))
        G = random_spd(rng, q)
        s2 = float(rng.uniform(0.2, 3.0))
        V = W @ G @ W.T + s2 * np.eye(N)
        worst_inv = max(worst_inv, np.max(np.abs(woodbury_inverse(W, G, s2) - np.linalg.inv(V))))
        worst_ld = max(worst_ld, abs(woodbury_logdet(W, G, s2) - np.linalg.slogdet(V)[1]))
    dt = time.perf_counter() - t0
    ok = worst_inv < 1e-10 and worst_ld < 1e-10 and dt < 5
    report(2, ok, f"inverse err {worst_inv:.2e}, logdet err {worst_ld:.2e}, {dt:.2f} s")


def test_c03_bpe_conjugacy(report):
    rng = np.random.default_rng(103)
    t0 = time.perf_counter()
    worst_oracle = worst_poisson = 0.0
    exact = True
    for _ in range(50):
        n, J = int(rng.integers(1, 31)), int(rng.integers(1, 5))
        cuts = tuple(np.cumsum(rng.uniform(0.3, 1.5, size=J)))
        grid = ChangepointGrid(cuts)
        t = rng.uniform(0.01, cuts[-1], size=n)
        d = rng.integers(0, 2, size=n)
        recs = list(zip(range(n), t, d))
        a, b = float(rng.uniform(1, 3)), float(rng.uniform(0.05, 2))
        lam = bpe_map(recs, grid, GammaPrior(a, b)).lambdas
        N, T = exposure_matrix(t, d, grid)
        exact &= np.array_equal(lam, (a + N.sum(0) - 1) / (b + T.sum(0)))
        worst_oracle = max(worst_oracle, np.max(np.abs(lam - oracle_bpe_map(recs, cuts, a, b))))
        l1, l2 = rng.uniform(0.1, 2, J), rng.uniform(0.1, 2, J)
        direct = bpe_loglik(recs, HazardParams(l1), grid) - bpe_loglik(recs, HazardParams(l2), grid)
        pois = sum(r.N * (np.log(l1[r.interval - 1]) - np.log(l2[r.interval - 1]))
                   - (l1[r.interval - 1] - l2[r.interval - 1]) * r.T
                   for r in expand_poisson(recs, grid))
        worst_poisson = max(worst_poisson, abs(direct - pois))
    dt = time.perf_counter() - t0
    ok = worst_oracle < 1e-6 and exact and worst_poisson < 1e-10 and dt < 10
    report(3, ok, f"oracle err {worst_oracle:.2e}, closed form exact={bool(exact)}, "
                  f"Poisson err {worst_poisson:.2e}, {dt:.2f} s")


def test_c04_omega_stationarity(report):
    gaps = [omega_stationarity_gap(seed) for seed in range(100, 120)]
    report(4, max(gaps) < 1e-4, f"max gradient norm {max(gaps):.2e} over 20 instances")


def test_c05_monotone_ascent(report):
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        fit = fit_lmm_map(planted_subjects(rng, m=int(rng.integers(6, 20))),
                          LmmPriors.default(2))
        worst = min(worst, float(np.min(np.diff(fit.trace), initial=0.0)))
    mix = MixtureConfig(lmm_priors=LmmPriors.default(2))
    n_split = 0
    for seed in SEEDS:
        scen = (two_cluster_scenario if seed % 2 else homogeneous_scenario)(n_subjects=30,
                                                                           seed=seed)
        data = CohortData(simulate_cohort(scen)[0])
        idx = np.arange(len(data))
        params, lp, _ = fit_cluster(data, idx, mix)
        res = attempt_split(data, Node("r", idx, params, lp), mix, RunConfig(seed=seed))
        n_split += len(res.trace) > 0
        worst = min(worst, float(np.min(np.diff(res.trace), initial=0.0)))
    report(5, worst >= -1e-9 and n_split == 20,
           f"largest decrease {abs(worst):.2e} over 20 LMM fits + {n_split} split refinements")


def test_c06_assignment_optimality(report):
    rng = np.random.default_rng(106)
    data = CohortData(simulate_cohort(two_cluster_scenario(n_subjects=24, seed=6))[0])
    # shape 2 keeps every fitted hazard positive, so no candidate is impossible
    mix = MixtureConfig(lmm_priors=LmmPriors.default(2), gamma_priors=(GammaPrior(2.0, 1.0),))
    # a pool of candidate components fitted to random subsets
    pool = [fit_cluster(data, rng.choice(len(data), 12, replace=False), mix)[0]
            for _ in range(6)]
    agree = 0
    for _ in range(200):
        n, K = int(rng.integers(4, 9)), int(rng.integers(2, 4))
        subjects = rng.choice(len(data), n, replace=False)
        comps = [pool[j] for j in rng.choice(len(pool), K, replace=False)]
        alpha = float(np.exp(rng.uniform(-5, 4)))
        i = int(rng.integers(n))
        others = np.delete(np.arange(n), i)
        # every component keeps a member besides subject i
        part = np.zeros(n, dtype=int)
        part[others] = np.r_[np.arange(K), rng.integers(0, K, size=n - 1 - K)]
        counts = np.bincount(part[others], minlength=K)
        lls = data.loglik_matrix(comps, subjects).tolist()
        priors = [cluster_log_prior(c, mix) for c in comps]
        ours = assign_subject(data.subject(int(subjects[i])), comps, counts, alpha)
        agree += ours == oracle_best_placement(i, list(part), lls, priors, K, alpha)
    report(6, agree == 200, f"{agree}/200 placements agree")


@pytest.fixture(scope="module")
def recovery_runs():
    runs = {"planted": [], "null": []}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for seed in SEEDS:
            cohort, truth = simulate_cohort(two_cluster_scenario(n_subjects=60, seed=seed))
            t0 = time.perf_counter()
            est = DHBCLT(random_state=seed).fit(cohort)
            runs["planted"].append((est, truth, time.perf_counter() - t0))
        for seed in SEEDS:
            cohort, _ = simulate_cohort(homogeneous_scenario(n_subjects=40, seed=seed))
            est = DHBCLT(random_state=seed).fit(cohort)
            runs["null"].append((est, None, None))
    return runs


def test_c07_planted_recovery(report, recovery_runs):
    runs = recovery_runs["planted"]
    good = sum(est.n_clusters_ == 2 and adjusted_rand_index(est.labels_, truth) >= 0.9
               for est, truth, _ in runs)
    slowest = max(dt for _, _, dt in runs)
    report(7, good >= 18 and slowest < 60,
           f"{good}/20 seeds give K=2 with ARI >= 0.9, slowest run {slowest:.1f} s")


def test_c08_null_stability(report, recovery_runs):
    split = sum(est.n_clusters_ > 1 for est, _, _ in recovery_runs["null"])
    report(8, split <= 4, f"{split}/20 null seeds accept a split")


def test_c09_nesting_and_guards(report, recovery_runs):
    bad = 0
    for est, _, _ in recovery_runs["planted"] + recovery_runs["null"]:
        hist = est.history_
        for prev, cur in zip(hist, hist[1:]):
            for k in np.unique(cur["labels"]):
                bad += np.unique(prev["labels"][cur["labels"] == k]).size != 1
        for rec in hist:
            bad += int(np.bincount(rec["labels"])[1:].min() < est.min_cluster_size_) \
                if rec["n_clusters"] > 1 else 0
    report(9, bad == 0, f"{bad} nesting or size violations over 40 runs")


def test_c10_kaplan_meier(report):
    table = kaplan_meier([("a", 1.0, 1), ("b", 2.0, 0), ("c", 3.0, 1)])
    hand = [(u, n, e) for u, _, n, e in table] == [(1.0, 3, 1), (2.0, 2, 0), (3.0, 1, 1)]
    hand &= [s for _, s, _, _ in table] == [1 - 1 / 3, 1 - 1 / 3, 0.0]
    rng = np.random.default_rng(110)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 40))
        t = np.round(rng.uniform(0.1, 5, size=n), 1)
        d = rng.integers(0, 2, size=n)
        got = [s for _, s, _, _ in kaplan_meier(list(zip(range(n), t, d)))]
        want = [s for _, s in oracle_kaplan_meier(t, d)]
        worst = max(worst, np.max(np.abs(np.array(got) - np.array(want))))
    report(10, hand and worst < 1e-12, f"hand example exact={hand}, max err {worst:.1e}")


@pytest.fixture(scope="module")
def planted_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    cohort, truth = simulate_cohort(two_cluster_scenario(n_subjects=60, seed=0))
    write_cohort(cohort, root / "in", truth)
    return root


def _fit(root, out, *extra):
    code = cli_main(["fit", "--long", str(root / "in" / "longitudinal.csv"),
                     "--surv", str(root / "in" / "survival.csv"), "--out", str(root / out),
                     *extra])
    assert code == 0
    return root / out / "assignments.csv"


def test_c11_reproducibility(report, planted_files):
    a = _fit(planted_files, "t1", "--threads", "1").read_bytes()
    b = _fit(planted_files, "t1b", "--threads", "1").read_bytes()
    c = _fit(planted_files, "t4", "--threads", "4").read_bytes()
    report(11, a == b == c, f"assignment files identical: {a == b == c} ({len(a)} bytes)")


def test_c12_sensitivity(report, planted_files):
    base = read_labels(_fit(planted_files, "base"))
    diffs = {}
    for tag, extra in (("drop y2", ("--drop-variable", "y2")),
                       ("grid 0.25", ("--grid-width", "0.25")),
                       ("grid 1.0", ("--grid-width", "1.0"))):
        other = read_labels(_fit(planted_files, tag.replace(" ", "_"), *extra))
        diffs[tag] = membership_diff(base, other)[1]
    detail = ", ".join(f"{k}: {v:.3f}" for k, v in diffs.items())
    report(12, max(diffs.values()) <= 0.15, f"membership diff fraction {detail}")
