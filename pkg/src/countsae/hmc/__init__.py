"""Gradient-based MCMC sampler and convergence diagnostics."""

from .diagnostics import (
    diagnostics,
    ess_bulk,
    mcse_mean,
    posterior_summary,
    rank_normalize,
    split_rhat,
)
from .nuts import (
    DIVERGENCE_THRESHOLD,
    Chains,
    SamplerConfig,
    find_reasonable_step_size,
    metric_windows,
    sample,
)
