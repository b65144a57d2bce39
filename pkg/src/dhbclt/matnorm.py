"""Dense linear-algebra kernel for matrix-normal models.

All densities are returned on the log scale. Inverse square roots come from
the symmetric eigendecomposition so they stay symmetric; log-determinants use
Cholesky factors.
"""
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .exceptions import DegenerateCovarianceError, DimensionMismatchError

LOG_2PI = np.log(2.0 * np.pi)
EIG_FLOOR = 1e-10


@dataclass(frozen=True)
class MatNormParams:
    """Parameters of MN(mean, row_cov, col_cov) for an ``n x H`` matrix."""

    mean: np.ndarray
    row_cov: np.ndarray
    col_cov: np.ndarray

    def __post_init__(self):
        n, h = np.shape(self.mean)
        if np.shape(self.row_cov) != (n, n) or np.shape(self.col_cov) != (h, h):
            raise DimensionMismatchError(
                f"mean is {n}x{h} but row_cov is {np.shape(self.row_cov)} "
                f"and col_cov is {np.shape(self.col_cov)}")


def cholesky(m):
    """Lower Cholesky factor, raising :class:`DegenerateCovarianceError`."""
    m = np.asarray(m, dtype=float)
    try:
        return linalg.cholesky(m, lower=True)
    except linalg.LinAlgError as exc:
        raise DegenerateCovarianceError(
            f"covariance of shape {m.shape} is not positive definite") from exc


def logdet_spd(m):
    chol = cholesky(m)
    return 2.0 * np.sum(np.log(np.diag(chol)))


def _checked_eigh(m):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatchError(f"expected a square matrix, got {m.shape}")
    vals, vecs = linalg.eigh(0.5 * (m + m.T))
    top = vals[-1]
    if not np.all(np.isfinite(vals)) or top <= 0 or vals[0] < EIG_FLOOR * top:
        raise DegenerateCovarianceError(
            f"eigenvalues {vals[0]:.3e}..{top:.3e} fall below the relative floor "
            f"{EIG_FLOOR:g}")
    return vals, vecs


def inv_sqrt_spd(m):
    """Symmetric inverse square root ``R`` with ``R @ m @ R == I``."""
    vals, vecs = _checked_eigh(m)
    return (vecs / np.sqrt(vals)) @ vecs.T


def sqrt_spd(m):
    """Symmetric (forward) square root of an SPD matrix."""
    vals, vecs = _checked_eigh(m)
    return (vecs * np.sqrt(vals)) @ vecs.T


def whiten(y, omega):
    """Right-multiply ``y`` by ``omega^{-1/2}`` so its columns decorrelate."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    omega = np.atleast_2d(omega)
    if y.shape[1] != omega.shape[0]:
        raise DimensionMismatchError(
            f"y has {y.shape[1]} columns but omega is {omega.shape}")
    return y @ inv_sqrt_spd(omega)


def unwhiten(y_white, omega):
    """Inverse of :func:`whiten`: multiply by the forward square root."""
    return np.asarray(y_white, dtype=float) @ sqrt_spd(omega)


def matnorm_logpdf(y, params):
    """Log-density of ``y`` under a matrix-normal distribution.

    Equal to the log-density of ``vec(y)`` under
    ``N(vec(mean), col_cov kron row_cov)``, computed without forming the
    Kronecker product.

    Parameters
    ----------
    y : (n, H) array_like
    params : MatNormParams

    Returns
    -------
    float
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.shape != np.shape(params.mean):
        raise DimensionMismatchError(
            f"y is {y.shape} but mean is {np.shape(params.mean)}")
    n, h = y.shape
    lr = cholesky(params.row_cov)
    lc = cholesky(params.col_cov)
    resid = y - params.mean
    # tr(C^{-1} E' R^{-1} E) = ||Lr^{-1} E Lc^{-T}||_F^2
    a = linalg.solve_triangular(lr, resid, lower=True)
    b = linalg.solve_triangular(lc, a.T, lower=True)
    quad = np.sum(b * b)
    logdet_r = 2.0 * np.sum(np.log(np.diag(lr)))
    logdet_c = 2.0 * np.sum(np.log(np.diag(lc)))
    return -0.5 * (n * h * LOG_2PI + h * logdet_r + n * logdet_c + quad)


def matnorm_sample(params, rng, size=None):
    """Draw from MN(mean, row_cov, col_cov).

    Positive semidefinite covariances are allowed here (a zero random-effect
    covariance is a legitimate simulation setting).
    """
    mean = np.asarray(params.mean, dtype=float)
    a = _psd_factor(params.row_cov)
    b = _psd_factor(params.col_cov)
    shape = mean.shape if size is None else (size,) + mean.shape
    z = rng.standard_normal(shape)
    return mean + a @ z @ b.T


def _psd_factor(m):
    m = np.atleast_2d(np.asarray(m, dtype=float))
    vals, vecs = linalg.eigh(0.5 * (m + m.T))
    if vals[0] < -1e-10 * max(1.0, abs(vals[-1])):
        raise DegenerateCovarianceError("covariance has a negative eigenvalue")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _woodbury_parts(w, g, sigma2):
    w = np.atleast_2d(np.asarray(w, dtype=float))
    g = np.atleast_2d(np.asarray(g, dtype=float))
    if not sigma2 > 0:
        raise DegenerateCovarianceError(f"sigma2 must be positive, got {sigma2}")
    if w.shape[1] != g.shape[0]:
        raise DimensionMismatchError(f"w is {w.shape} but g is {g.shape}")
    lg = cholesky(g)
    wl = w @ lg
    # M = I + L' W' W L / sigma2 is well conditioned even when G is small
    core = np.eye(g.shape[0]) + (wl.T @ wl) / sigma2
    return w, wl, cholesky(core)


def woodbury_inverse(w, g, sigma2):
    """``(w g w' + sigma2 I)^{-1}`` via the Woodbury identity."""
    w, wl, lm = _woodbury_parts(w, g, sigma2)
    t = linalg.solve_triangular(lm, wl.T, lower=True)
    return np.eye(w.shape[0]) / sigma2 - (t.T @ t) / sigma2 ** 2


def woodbury_logdet(w, g, sigma2):
    """``log det(w g w' + sigma2 I)`` via the matrix determinant lemma."""
    w, _, lm = _woodbury_parts(w, g, sigma2)
    return w.shape[0] * np.log(sigma2) + 2.0 * np.sum(np.log(np.diag(lm)))


def woodbury_quadform(x, w, g, sigma2, y=None):
    """``x' (w g w' + sigma2 I)^{-1} y`` without forming the ``N x N`` inverse.

    ``y`` defaults to ``x``. Vectors are treated as single columns.
    """
    w, wl, lm = _woodbury_parts(w, g, sigma2)
    x = np.asarray(x, dtype=float)
    x2 = x.reshape(len(x), -1)
    y2 = x2 if y is None else np.asarray(y, dtype=float).reshape(len(y), -1)
    tx = linalg.solve_triangular(lm, wl.T @ x2, lower=True)
    ty = tx if y is None else linalg.solve_triangular(lm, wl.T @ y2, lower=True)
    out = (x2.T @ y2) / sigma2 - (tx.T @ ty) / sigma2 ** 2
    if x.ndim == 1 and (y is None or np.ndim(y) == 1):
        return float(out[0, 0])
    return out
