"""Moment algebra of the Poisson-lognormal mixture.

The mixture ``y ~ Poisson(theta * eps)`` with ``eps ~ LN(-phi2/2, phi2)``
has mean ``theta`` and marginal variance ``theta + theta^2 (e^{phi2}-1)``.
Solving that variance expression for ``phi2`` given a target variance
``v`` pins the overdispersion needed to reproduce ``v`` exactly, and the
squared coefficient of variation of the mixture follows as
``1/theta + (e^{phi2}-1)``.
"""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad

MATCH_FLOOR = 1e-12
_SQRT_GUARD = 1e-300


def variance_match_phi2(theta, v, floor=MATCH_FLOOR):
    """Overdispersion ``phi2`` that makes the mixture variance equal ``v``.

    ``phi2 = log((v - theta)/theta^2 + 1)``.  Inputs with ``v <= theta``
    (at or below the Poisson floor) have no valid solution; they clamp to
    the equidispersed limit ``phi2 = 0`` and are flagged.

    Returns ``(phi2, clamped)`` elementwise.
    """
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(theta <= 0) or np.any(v <= 0):
        raise ValueError("theta and v must be strictly positive")
    z = (v - theta) / (theta * theta)
    clamped = z <= 0.0
    phi2 = np.maximum(np.log1p(np.maximum(z, floor - 1.0)), 0.0)
    return phi2, clamped


def fitted_cv2(theta, phi2):
    """Squared CV of the mixture: ``1/theta + (e^{phi2} - 1)``."""
    theta = np.asarray(theta, dtype=float)
    if np.any(theta <= 0):
        raise ValueError("theta must be strictly positive")
    if np.any(np.asarray(phi2) < 0):
        raise ValueError("phi2 must be non-negative")
    return 1.0 / theta + np.expm1(phi2)


def mixture_variance(theta, phi2):
    """Marginal variance ``theta + theta^2 (e^{phi2} - 1)``."""
    theta = np.asarray(theta, dtype=float)
    return theta + theta * theta * np.expm1(phi2)


def match_phi2_var(theta_var, v_const, floor=MATCH_FLOOR):
    """Graph version of :func:`variance_match_phi2` (clamps carry zero grad)."""
    z = (v_const - theta_var) / ad.square(theta_var)
    phi2 = ad.maximum(ad.log1p(ad.maximum(z, floor - 1.0)), 0.0)
    return phi2


def sqrt_phi2_var(phi2_var):
    """``sqrt(phi2)`` guarded so clamped-to-zero cells stay differentiable."""
    return ad.sqrt(ad.maximum(phi2_var, _SQRT_GUARD))
