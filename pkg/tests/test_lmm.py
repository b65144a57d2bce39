import numpy as np
import pytest
from scipy import optimize, stats
from scipy.linalg import block_diag

from conftest import random_spd
from dhbclt.exceptions import DegenerateCovarianceError
from dhbclt.lmm import (DesignSpec, LmmParams, LmmPriors, LmmStats, build_design,
                        dense_subject_loglik, fit_given_omega, fit_lmm_map,
                        lmm_log_posterior, lmm_subject_loglik, update_omega)
from dhbclt.matnorm import inv_sqrt_spd, logdet_spd
from dhbclt.oracles import oracle_vecnormal_logpdf


def planted_subjects(rng, m=12, H=2, B=None, G=0.4, sigma2=0.5, omega=None, n=4):
    B = np.array([[1.0, -0.5], [0.8, 0.3]])[:, :H] if B is None else B
    omega = np.array([[1.0, 0.4], [0.4, 0.8]])[:H, :H] if omega is None else omega
    lo = np.linalg.cholesky(omega)
    subjects = []
    for _ in range(m):
        t = np.arange(n, dtype=float)
        X, W = build_design(t)
        u = np.sqrt(G) * rng.standard_normal((1, H)) @ lo.T
        e = np.sqrt(sigma2) * rng.standard_normal((n, H)) @ lo.T
        subjects.append((X @ B + W @ u + e, X, W))
    return subjects


def test_build_design_examples():
    X, W = build_design([0, 1, 2])
    assert np.array_equal(X, [[1, 0], [1, 1], [1, 2]])
    assert np.array_equal(W, [[1], [1], [1]])
    X, W = build_design([0])
    assert np.array_equal(X, [[1, 0]]) and np.array_equal(W, [[1]])
    X, _ = build_design([0, 0.5], DesignSpec.polynomial(2, 0))
    assert np.allclose(X, [[1, 0, 0], [1, 0.5, 0.25]])
    with pytest.raises(ValueError):
        build_design([])


def test_scalar_subject_loglik():
    p = LmmParams(np.zeros((1, 1)), np.eye(1), 1.0, np.eye(1))
    got = lmm_subject_loglik([[0.0]], [[1.0]], [[1.0]], p)
    assert got == pytest.approx(-0.5 * np.log(4 * np.pi), abs=1e-12)
    assert got == pytest.approx(-1.2655121234846454, abs=1e-12)


def test_subject_loglik_zero_residual(rng):
    X, W = build_design([0.0, 1.0, 3.0])
    B, G, om = rng.standard_normal((2, 2)), random_spd(rng, 1), random_spd(rng, 2)
    p = LmmParams(B, G, 0.3, om)
    V = W @ G @ W.T + 0.3 * np.eye(3)
    want = -0.5 * (6 * np.log(2 * np.pi) + 2 * np.linalg.slogdet(V)[1]
                   + 3 * np.linalg.slogdet(om)[1])
    assert lmm_subject_loglik(X @ B, X, W, p) == pytest.approx(want, abs=1e-10)


def test_subject_loglik_matches_kronecker_oracle(rng):
    X, W = build_design([0.0, 0.7, 2.0], DesignSpec.polynomial(1, 1))
    B, G, om = rng.standard_normal((2, 2)), random_spd(rng, 2), random_spd(rng, 2)
    p = LmmParams(B, G, 0.6, om)
    y = rng.standard_normal((3, 2))
    V = W @ G @ W.T + 0.6 * np.eye(3)
    want = oracle_vecnormal_logpdf(y, X @ B, (V, om))
    assert lmm_subject_loglik(y, X, W, p) == pytest.approx(want, abs=1e-8)
    assert dense_subject_loglik(y, X, W, p) == pytest.approx(want, abs=1e-8)


def test_update_omega_zero_residuals():
    pri = LmmPriors(Psi=np.eye(2), nu=4.0, g_Psi=np.eye(1), g_nu=3.0)
    out = update_omega(np.zeros((3, 2)), lambda x: x, pri, 3)
    assert np.allclose(out, 0.1 * np.eye(2), atol=1e-15)


def test_update_omega_scalar_collapse():
    pri = LmmPriors(Psi=np.eye(1) * 2.0, nu=3.0, g_Psi=np.eye(1), g_nu=3.0)
    r = np.array([[1.0], [2.0]])
    out = update_omega(r, lambda x: x, pri, 2)
    # inverse-gamma mode (beta + S/2) / (alpha + 1) with alpha = (nu + N)/2, beta = Psi/2
    assert out[0, 0] == pytest.approx((1.0 + 2.5) / ((3 + 2) / 2 + 1), abs=1e-14)


def _omega_instance(seed, H=2):
    rng = np.random.default_rng(seed)
    subs = planted_subjects(rng, m=3, H=H, n=int(rng.integers(2, 5)))
    p = LmmParams(rng.standard_normal((2, H)), random_spd(rng, 1), 0.4 + rng.random(),
                  random_spd(rng, H))
    pri = LmmPriors(Psi=random_spd(rng, H), nu=H + 1.5, g_Psi=np.eye(1), g_nu=3.0)
    return subs, p, pri


def _omega_conditional(subs, p, pri, omega):
    """Independent dense objective: vec-normal likelihoods + scipy inverse-Wishart."""
    total = 0.0
    for y, X, W in subs:
        V = W @ p.G @ W.T + p.sigma2 * np.eye(len(y))
        total += oracle_vecnormal_logpdf(y, X @ p.B, (V, omega))
    return total + stats.invwishart(df=pri.nu, scale=pri.Psi).logpdf(omega)


def omega_stationarity_gap(seed):
    subs, p, pri = _omega_instance(seed)
    R = np.vstack([y - X @ p.B for y, X, _ in subs])
    Vs = block_diag(*[W @ p.G @ W.T + p.sigma2 * np.eye(len(y)) for y, _, W in subs])
    om = update_omega(R, lambda x: np.linalg.solve(Vs, x), pri, len(R))
    H = om.shape[0]
    h = 1e-6 * np.max(np.abs(om))
    grad = []
    for i in range(H):
        for j in range(i, H):
            E = np.zeros((H, H))
            E[i, j] = E[j, i] = 1.0
            f = lambda s: _omega_conditional(subs, p, pri, om + s * E)
            grad.append((f(h) - f(-h)) / (2 * h) * np.max(np.abs(om)))
    return float(np.max(np.abs(grad)))


@pytest.mark.parametrize("seed", range(5))
def test_update_omega_stationary(seed):
    assert omega_stationarity_gap(seed) < 1e-4


def test_noiseless_recovery():
    B0 = np.array([[2.0, -1.0], [0.5, 1.5]])
    subs = []
    for k in range(6):
        t = np.array([0.0, 1.0, 2.5, 4.0]) + 0.1 * k
        X, W = build_design(t)
        subs.append((X @ B0, X, W))
    fit = fit_lmm_map(subs, LmmPriors.default(2))
    assert np.max(np.abs(fit.params.B - B0)) < 1e-6


def test_single_variable_matches_brute_force():
    rng = np.random.default_rng(3)
    subs = planted_subjects(rng, m=8, H=1, B=np.array([[1.0], [0.5]]), omega=np.eye(1))
    pri = LmmPriors.default(1)
    got = fit_given_omega(subs, pri, np.eye(1))

    def negpost(th):
        B = th[:2].reshape(2, 1)
        G, s2 = np.exp(th[2]), np.exp(th[3])
        ll = sum(stats.multivariate_normal(X @ B[:, 0], G * W @ W.T + s2 * np.eye(len(y)))
                 .logpdf(y[:, 0]) for y, X, W in subs)
        lp = (stats.invwishart(df=pri.g_nu, scale=pri.g_Psi).logpdf(np.array([[G]]))
              + stats.invgamma(pri.sigma2_shape, scale=pri.sigma2_rate).logpdf(s2))
        return -(ll + lp)

    x0 = np.r_[got.B.ravel() + 0.1, np.log(got.G[0, 0]) + 0.2, np.log(got.sigma2) - 0.2]
    res = optimize.minimize(negpost, x0, method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000})
    ref = res.x
    assert np.max(np.abs(got.B.ravel() - ref[:2])) < 1e-4
    assert abs(got.G[0, 0] - np.exp(ref[2])) < 1e-4
    assert abs(got.sigma2 - np.exp(ref[3])) < 1e-4


def test_degenerate_cluster_rejected():
    X, W = build_design([1.0])
    with pytest.raises(DegenerateCovarianceError):
        fit_lmm_map([(np.ones((1, 2)), X, W)], LmmPriors.default(2))


@pytest.mark.parametrize("seed", range(4))
def test_trace_nondecreasing(seed):
    rng = np.random.default_rng(seed)
    fit = fit_lmm_map(planted_subjects(rng), LmmPriors.default(2))
    assert fit.converged
    assert np.all(np.diff(fit.trace) >= -1e-9)


def test_whitening_consistency():
    rng = np.random.default_rng(5)
    st = LmmStats.from_subjects(planted_subjects(rng))
    p = LmmParams(rng.standard_normal((2, 2)), np.eye(1) * 0.3, 0.7, random_spd(rng, 2))
    r = inv_sqrt_spd(p.Omega)
    white = st.whitened(r).loglik(LmmParams(p.B @ r, p.G, p.sigma2, np.eye(2)))
    jac = 0.5 * st.N * logdet_spd(p.Omega)
    assert white - jac == pytest.approx(st.loglik(p), abs=1e-8)


def test_permutation_invariance():
    rng = np.random.default_rng(9)
    subs = planted_subjects(rng, m=10)
    perm = rng.permutation(len(subs))
    a = fit_lmm_map(subs, LmmPriors.default(2)).params
    b = fit_lmm_map([subs[i] for i in perm], LmmPriors.default(2)).params
    for x, y in ((a.B, b.B), (a.G, b.G), (a.sigma2, b.sigma2), (a.Omega, b.Omega)):
        assert np.max(np.abs(np.asarray(x) - np.asarray(y))) < 1e-9


def test_fit_improves_on_truth_posterior():
    rng = np.random.default_rng(11)
    subs = planted_subjects(rng, m=20)
    pri = LmmPriors.default(2)
    fit = fit_lmm_map(subs, pri)
    st = LmmStats.from_subjects(subs)
    truth = LmmParams(np.array([[1.0, -0.5], [0.8, 0.3]]), np.eye(1) * 0.4, 0.5,
                      np.array([[1.0, 0.4], [0.4, 0.8]]))
    assert fit.log_posterior >= lmm_log_posterior(st, truth, pri)
    assert np.max(np.abs(fit.params.B - truth.B)) < 0.5


def test_prior_validation():
    with pytest.raises(ValueError):
        LmmPriors(Psi=np.eye(2), nu=0.5, g_Psi=np.eye(1), g_nu=3.0)
    with pytest.raises(ValueError):
        LmmPriors(Psi=np.eye(2), nu=4.0, g_Psi=np.eye(1), g_nu=3.0, sigma2_rate=0.0)
