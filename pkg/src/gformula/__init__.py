"""Parametric g-formula, frequentist (bootstrap) and Bayesian (posterior predictive)."""

from .core import (
    ALWAYS, NEVER, CovariateModel, DoubleExponential, EffectEstimate, ExposureModel, Fixed, Flat,
    ModelSpec, Normal, OutcomeModel, Panel, PriorSpec, Regime, TermList, build_design,
    default_priors, read_panel_csv, validate_panel, write_panel_csv,
)
from .estimate import (
    GFormulaResult, bayesian_gformula, frequentist_gformula, standardize_exact, standardize_mc,
    summarize_effect,
)
from .glm import FitResult, expit, fit_mle, loglik_bernoulli, loglik_gaussian
from .mcmc import ChainOutput, SamplerConfig, log_posterior, prior_logdensity, sample_chain

__version__ = "0.1.0"
