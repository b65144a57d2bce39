"""Divisive hierarchical Bayesian clustering of longitudinal and time-to-event data."""
from .bpe import (ChangepointGrid, GammaPrior, HazardParams, SurvivalRecord, bpe_loglik,
                  bpe_map, expand_poisson, kaplan_meier)
from .data import (Cohort, SimScenario, adjusted_rand_index, load_cohort, membership_diff,
                   project_out_covariates, simulate_cohort)
from .divisive import RunConfig, run_dhbc
from .estimator import DHBCLT, CovariateProjector
from .exceptions import (CohortValidationError, DegenerateCovarianceError, DHBCError,
                         NumericalFailure)
from .lmm import DesignSpec, LmmParams, LmmPriors, fit_lmm_map
from .posterior import ClusterParams, CohortData, MixtureConfig, log_posterior

__version__ = "0.1.0"

__all__ = [
    "ChangepointGrid", "ClusterParams", "Cohort", "CohortData", "CohortValidationError",
    "CovariateProjector", "DHBCError", "DHBCLT", "DegenerateCovarianceError", "DesignSpec",
    "GammaPrior", "HazardParams", "LmmParams", "LmmPriors", "MixtureConfig",
    "NumericalFailure", "RunConfig", "SimScenario", "SurvivalRecord", "adjusted_rand_index",
    "bpe_loglik", "bpe_map", "expand_poisson", "fit_lmm_map", "kaplan_meier", "load_cohort",
    "log_posterior", "membership_diff", "project_out_covariates", "run_dhbc",
    "simulate_cohort",
]
