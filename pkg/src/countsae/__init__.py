"""Small-domain estimation engine for survey count data.

Pieces: a finite-population simulator (`popgen`), stratified sampling and
direct ratio estimation (`survey`), three hierarchical Bayesian count
models as differentiable log posteriors (`model`), a self-contained
gradient-based MCMC sampler with diagnostics (`hmc`), a Monte Carlo
evaluation harness (`mceval`), and a command-line front end (`cli`).
"""

__version__ = "0.1.0"
