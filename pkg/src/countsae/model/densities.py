"""Summed log-density terms on autodiff variables.

Purely additive constants are dropped except for the Poisson ``y!`` term,
which is data-dependent and precomputable, so the Poisson contribution is
the exact summed log-pmf.
"""

from __future__ import annotations

import numpy as np
from scipy import special

from .. import autodiff as ad
from ..autodiff import Var


def _size(x):
    return int(np.size(x.value if isinstance(x, Var) else x))


def normal_lpdf_sum(x, mu, sigma):
    """Sum of Normal(mu, sigma) log densities; any argument may be a Var."""
    diff = x - mu if isinstance(x, Var) else ad.sub(x, mu)
    z = diff / sigma
    quad = ad.vsum(ad.square(z)) * -0.5
    n = _size(x)
    if isinstance(sigma, Var):
        k = n // _size(sigma)
        return quad + ad.vsum(ad.log(sigma)) * (-float(k))
    sig = np.asarray(sigma, dtype=float)
    k = n // sig.size
    return quad - k * float(np.sum(np.log(sig)))


def std_normal_lpdf_sum(x):
    return ad.vsum(ad.square(x)) * -0.5


def half_student_t3_lpdf_sum(x):
    """Half-Student-t with 3 df, location 0, scale 1 (constants dropped)."""
    return ad.vsum(ad.log1p(ad.square(x) / 3.0)) * -2.0


def normal0_lpdf_sum(x, sigma):
    """Normal(0, sigma) with constant sigma (constants dropped)."""
    return ad.vsum(ad.square(x)) * (-0.5 / (sigma * sigma))


def poisson_lpmf_sum(y, mu):
    """Exact summed Poisson log-pmf for integer data ``y`` at mean Var ``mu``."""
    y = np.asarray(y, dtype=float)
    const = -float(special.gammaln(y + 1.0).sum())
    return ad.vsum(ad.log(mu) * y) - ad.vsum(mu) + const


def gamma_lpdf_sum(x, log_x, shape, rate):
    """Summed Gamma(shape, rate) log density of constant data ``x``.

    ``log_x`` is the precomputed ``log(x)`` vector (the part multiplying
    ``shape - 1``).
    """
    t = ad.vsum(shape * ad.log(rate)) - ad.vsum(ad.gammaln(shape))
    t = t + ad.vsum((shape - 1.0) * log_x)
    return t - ad.vsum(rate * x)
