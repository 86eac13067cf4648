"""Penalized exponentially tilted empirical likelihood posteriors."""
from .baselines import OptimizerConfig, bootstrap, calibrated_gibbs, stochastic_approximation
from .bench import GeneratorSpec, MethodConfig, run_coverage
from .etel import EtelSolution, log_etel_at, solve_lambda
from .exceptions import *  # noqa: F401,F403
from .inference import diagnostics_report, effective_sample_size, gelman_rubin, summarize
from .loss import (
    Dataset,
    check_loss,
    cubic_regression,
    empirical_risk,
    hinge_svm,
    huber_sigmoid,
    make_loss,
    moment_matrix,
    smoothed_hinge_svm,
    squared_loss,
)
from .optim import minimize_risk
from .posterior import PosteriorSpec, Prior, default_alpha, log_density, tune_alpha
from .rng import make_rng, substream_seed
from .sampler import Chain, ProposalConfig, run_chain, run_chains
from .sparse import SparsePrior, default_sparse_prior, run_sparse_chain, stepwise_search

__version__ = "0.1.0"
