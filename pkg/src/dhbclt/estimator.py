"""scikit-learn style front end.

:class:`DHBCLT` wraps the divisive search as a clusterer with ``fit`` /
``predict`` / ``fit_predict`` and the usual ``get_params`` / ``set_params``.
:class:`CovariateProjector` is the matching preprocessing transformer, so
``make_pipeline(CovariateProjector(["age"]), DHBCLT())`` works on a Cohort.
"""
import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .bpe import GammaPrior
from .data import (_projection_coef, _replace_blocks, _stack_design, check_cohort,
                   check_covariates)
from .divisive import RunConfig, canonical_labels, run_dhbc
from .exceptions import CohortValidationError
from .lmm import OMEGA_PSI_SCALE, DesignSpec, LmmPriors
from .posterior import CohortData, MixtureConfig, assignment_scores

_DESIGNS = {
    "linear": lambda: DesignSpec(),
    "quadratic": lambda: DesignSpec.polynomial(2, 0),
    "linear_slope": lambda: DesignSpec.polynomial(1, 1),
}


def resolve_design(design):
    if isinstance(design, DesignSpec):
        return design
    try:
        return _DESIGNS[design]()
    except KeyError:
        raise ValueError(f"unknown design {design!r}; choose from {sorted(_DESIGNS)}") from None


class DHBCLT(ClusterMixin, BaseEstimator):
    """Divisive hierarchical Bayesian clustering of longitudinal + survival data.

    Parameters
    ----------
    max_clusters : int, default=10
    min_cluster_size : int, optional
        Defaults to the number of free LMM parameters per cluster.
    alpha_grid : sequence of float, optional
        Increasing Dirichlet concentrations; default 16 geometric points in
        ``[1e-3, 1e2]``.
    split_init : {"two_means", "two_medoids"}
    split_features : tuple of {"all", "longitudinal"}
        Feature blocks for split initialization. Each block seeds one
        refinement and the best refined split is kept.
    design : {"linear", "quadratic", "linear_slope"} or DesignSpec
        ``"linear"``: intercept + time fixed effects, random intercept.
    grid_width : float, default=0.5
        Width of the regular hazard grid.
    survival_model : {"bpe", "weibull"}
    gamma_a, gamma_b : float
        Gamma prior on every interval hazard.
    omega_psi_scale, omega_nu : float
        Inverse-Wishart prior on the between-variable covariance,
        ``IW(omega_psi_scale * I, omega_nu)``; defaults ``100 * I`` and ``H + 2``.
    g_psi_scale, g_nu : float
        Inverse-Wishart prior on the random-effect covariance (default
        ``IW(I, q + 2)``).
    sigma2_shape, sigma2_rate : float
        Inverse-gamma prior on the residual variance.
    b_precision : float
        Precision of the coefficient prior; 0 means flat.
    K : int, optional
        Number of mixture components; defaults to the number of subjects.
    random_state : int
    n_jobs : int
        Worker threads for split attempts on different leaves.

    Attributes
    ----------
    labels_ : ndarray of int
        Final partition (labels from 1).
    result_ : DHBCResult
    cluster_params_ : dict
        Label -> ClusterParams for the final leaves.
    """

    def __init__(self, max_clusters=10, min_cluster_size=None, alpha_grid=None,
                 split_init="two_means", design="linear", grid_width=0.5,
                 survival_model="bpe", gamma_a=1.0, gamma_b=0.1, omega_psi_scale=OMEGA_PSI_SCALE,
                 omega_nu=None, g_psi_scale=1.0, g_nu=None, sigma2_shape=2.0,
                 sigma2_rate=1.0, b_precision=0.0, pi0_log_density=0.0, K=None,
                 tol=1e-6, max_iter=200, max_sweeps=50, split_alpha=1.0,
                 split_features=("all", "longitudinal"), random_state=0, n_jobs=1):
        self.max_clusters = max_clusters
        self.min_cluster_size = min_cluster_size
        self.alpha_grid = alpha_grid
        self.split_init = split_init
        self.design = design
        self.grid_width = grid_width
        self.survival_model = survival_model
        self.gamma_a = gamma_a
        self.gamma_b = gamma_b
        self.omega_psi_scale = omega_psi_scale
        self.omega_nu = omega_nu
        self.g_psi_scale = g_psi_scale
        self.g_nu = g_nu
        self.sigma2_shape = sigma2_shape
        self.sigma2_rate = sigma2_rate
        self.b_precision = b_precision
        self.pi0_log_density = pi0_log_density
        self.K = K
        self.tol = tol
        self.max_iter = max_iter
        self.max_sweeps = max_sweeps
        self.split_alpha = split_alpha
        self.split_features = split_features
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _priors(self, H, q):
        return LmmPriors(
            Psi=self.omega_psi_scale * np.eye(H),
            nu=H + 2.0 if self.omega_nu is None else float(self.omega_nu),
            g_Psi=self.g_psi_scale * np.eye(q),
            g_nu=q + 2.0 if self.g_nu is None else float(self.g_nu),
            sigma2_shape=self.sigma2_shape, sigma2_rate=self.sigma2_rate,
            B_prior_precision=self.b_precision)

    def _mixture(self, cohort, design):
        gp = GammaPrior(self.gamma_a, self.gamma_b)
        return MixtureConfig(alpha=1.0, K=self.K, lmm_priors=self._priors(cohort.H, design.q),
                             gamma_priors=(gp,) * len(cohort.event_names),
                             pi0_log_density=self.pi0_log_density,
                             survival_model=self.survival_model)

    def _run_config(self):
        return RunConfig(max_clusters=self.max_clusters,
                         min_cluster_size=self.min_cluster_size,
                         alpha_grid=None if self.alpha_grid is None else tuple(self.alpha_grid),
                         split_init=self.split_init, seed=int(self.random_state),
                         tol=self.tol, max_iter=self.max_iter, max_sweeps=self.max_sweeps,
                         split_alpha=self.split_alpha,
                         split_features=tuple(self.split_features), n_jobs=int(self.n_jobs))

    def fit(self, X, y=None):
        """Grow the dendrogram on a :class:`~dhbclt.data.Cohort`. ``y`` is ignored."""
        cohort = check_cohort(X)
        design = resolve_design(self.design)
        data = CohortData(cohort, design=design, grid_width=self.grid_width)
        self.mixture_ = self._mixture(cohort, design)
        self.run_config_ = self._run_config()
        self.result_ = run_dhbc(data, self.mixture_, self.run_config_)
        self._set_fitted(data, self.result_)
        return self

    def _set_fitted(self, data, result):
        self.data_ = data
        self.grids_ = tuple(data.grids)
        self.design_ = data.design
        self.subject_ids_ = data.cohort.subject_ids
        self.variable_names_ = data.cohort.variable_names
        leaves = result.leaves()
        self.labels_ = canonical_labels(leaves, len(data))
        order = sorted(leaves, key=lambda nd: int(nd.subjects.min()))
        self.cluster_params_ = {k: nd.params for k, nd in enumerate(order, start=1)}
        self.cluster_sizes_ = {k: nd.size for k, nd in enumerate(order, start=1)}
        self.n_clusters_ = len(leaves)
        self.min_cluster_size_ = result.min_cluster_size
        self.history_ = result.history
        self.dendrogram_ = result.root

    def labels_for(self, n_clusters):
        check_is_fitted(self, "result_")
        return self.result_.labels_for(n_clusters)

    def predict(self, X):
        """Assign each subject of a new cohort to the best fitted cluster."""
        check_is_fitted(self, "result_")
        cohort = check_cohort(X)
        if cohort.variable_names != self.variable_names_:
            raise CohortValidationError(
                "variables differ from the fitted cohort",
                [f"fitted {self.variable_names_}, got {cohort.variable_names}"])
        data = CohortData(cohort, design=self.design_, grids=self.grids_)
        labels = sorted(self.cluster_params_)
        ll = data.loglik_matrix([self.cluster_params_[k] for k in labels])
        counts = np.array([self.cluster_sizes_[k] for k in labels], dtype=float)
        scores = assignment_scores(ll, np.tile(counts, (len(data), 1)), self.mixture_.alpha)
        return np.asarray(labels)[np.argmax(scores, axis=1)]

    def fit_predict(self, X, y=None):
        return self.fit(X).labels_

    def dendrogram_dict(self):
        """JSON-compatible nested representation of the dendrogram."""
        check_is_fitted(self, "result_")
        return dendrogram_to_dict(self.dendrogram_, self.subject_ids_)


def dendrogram_to_dict(root, subject_ids):
    """Nested dict of nodes with members, fitted parameters and objectives."""

    def node(nd):
        return {
            "id": nd.node_id,
            "size": nd.size,
            "subjects": [subject_ids[i] for i in nd.subjects],
            "alpha": nd.alpha,
            "log_posterior": nd.log_posterior,
            "objective": nd.objective,
            "split_note": nd.split_note,
            "params": nd.params.to_dict(),
            "children": [node(c) for c in nd.children],
        }

    return node(root)


class CovariateProjector(TransformerMixin, BaseEstimator):
    """Remove static-covariate effects from every longitudinal variable.

    ``fit`` regresses all stacked visits on ``[1, covariates]``; ``transform``
    subtracts the fitted effect. On the training cohort this is the
    orthogonal projection onto the complement of the covariate column space.
    """

    def __init__(self, covariates=()):
        self.covariates = covariates

    def _names(self):
        cov = self.covariates
        return [c for c in cov.split(",") if c] if isinstance(cov, str) else list(cov)

    def fit(self, X, y=None):
        cohort = check_cohort(X)
        names = self._names()
        check_covariates(cohort, names)
        C, Ystack = _stack_design(cohort, names)
        self.coef_ = _projection_coef(C, Ystack)
        self.covariate_names_ = tuple(names)
        return self

    def transform(self, X):
        check_is_fitted(self, "coef_")
        cohort = check_cohort(X)
        C, Ystack = _stack_design(cohort, list(self.covariate_names_))
        return _replace_blocks(cohort, Ystack - C @ self.coef_)
