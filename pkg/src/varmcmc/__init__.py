"""Variational approximations as proposals for Metropolis-Hastings samplers
on logistic belief networks."""

from varmcmc.model import (
    BeliefNetwork,
    Dataset,
    GaussianPrior,
    LogPosterior,
    generate,
    log_conditional,
    log_likelihood,
    log_posterior_unnorm,
    log_prior,
    logistic,
)
from varmcmc.variational import VariationalState, fit_variational, lower_bound
from varmcmc.kernels import (
    BlockPartition,
    ChainTrace,
    GaussianProposal,
    KernelSpec,
    estimate,
    run_chain,
)
from varmcmc.adaptive import AdaptiveState, run_adaptive_chain
from varmcmc.oracle import GridPosterior, build_grid

__version__ = "0.1.0"

__all__ = [
    "AdaptiveState",
    "BeliefNetwork",
    "BlockPartition",
    "ChainTrace",
    "Dataset",
    "GaussianPrior",
    "GaussianProposal",
    "GridPosterior",
    "KernelSpec",
    "LogPosterior",
    "VariationalState",
    "build_grid",
    "estimate",
    "fit_variational",
    "generate",
    "log_conditional",
    "log_likelihood",
    "log_posterior_unnorm",
    "log_prior",
    "logistic",
    "lower_bound",
    "run_adaptive_chain",
    "run_chain",
]
