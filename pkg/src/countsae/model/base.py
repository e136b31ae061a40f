"""Shared scaffolding for the three log-posterior models.

Every model is a pure function of (unconstrained parameter vector, data
block): ``logp_and_grad`` returns the unnormalized joint log density on
the unconstrained scale (constraint log-Jacobians included) and its exact
gradient.  Overflowing evaluations come back as ``-inf`` with a zero
gradient, which the sampler treats as a rejection, never a crash.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import autodiff as ad
from .input import ModelInput


@dataclass(frozen=True)
class ModelConfig:
    """Model options.

    phi_prior_scale
        Scale of the half-normal overdispersion priors in the
        cross-sectional joint model (the executable-script value is 1.0;
        0.1 reproduces the prose variant).
    use_vbias
        Include the >=1 multiplicative bias factor on the regional and
        national fitted squared CVs (scripts include it).
    phi_match_floor
        Floor on the variance-matching log argument before clamping.
    fast_gradient
        Use the fused hand-written gradient where a model provides one
        (tested to agree with the tape to machine precision); the tape
        path stays available as ``logp_and_grad_ad``.
    """

    phi_prior_scale: float = 1.0
    use_vbias: bool = True
    phi_match_floor: float = 1e-12
    fast_gradient: bool = True


@dataclass
class DerivedQuantities:
    """Per-draw derived quantities at all resolutions.

    Arrays carry a leading draw axis; entries that a model does not define
    (e.g. fixed-variance fits on unobserved domains) are NaN.
    """

    theta: np.ndarray       # fitted_y = Emp * exp(lambda)
    mean_y: np.ndarray      # theta * epsilon
    epsilon: np.ndarray
    cv2: np.ndarray         # fitted squared CV
    vrnc: np.ndarray        # theta^2 * cv2
    theta_r: np.ndarray
    vrnc_r: np.ndarray
    theta_nat: np.ndarray
    vrnc_nat: np.ndarray
    clamped_frac: float = 0.0


class BaseModel:
    """Differentiable unnormalized log posterior over a block layout."""

    name = "base"

    def __init__(self, data: ModelInput, config: ModelConfig = None):
        data.validate()
        if np.any(data.n_resp_r <= 0):
            raise ValueError(
                "every region needs at least one observed domain per month")
        self.data = data
        self.config = config if config is not None else ModelConfig()
        self._setup()

    # subclasses define _setup(), _graph(u_leaf) and derived_draws()

    @property
    def dim(self):
        return self.layout.dim

    def logp_and_grad(self, u):
        u = np.asarray(u, dtype=float)
        fused = getattr(self, "_fused_logp_grad", None)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            if fused is not None and self.config.fast_gradient:
                val, g = fused(u)
                if not (np.isfinite(val) and np.all(np.isfinite(g))):
                    return -np.inf, np.zeros_like(u)
                return val, g
        return self.logp_and_grad_ad(u)

    def logp_and_grad_ad(self, u):
        """Tape-differentiated path (reference implementation)."""
        u = np.asarray(u, dtype=float)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            leaf = ad.Var(u)
            root = self._graph(leaf)
            val = float(root.value)
            if not np.isfinite(val):
                return -np.inf, np.zeros_like(u)
            ad.backward(root)
            g = leaf.grad if leaf.grad is not None else np.zeros_like(u)
            if not np.all(np.isfinite(g)):
                return -np.inf, np.zeros_like(u)
        return val, np.asarray(g, dtype=float)

    def logp(self, u):
        u = np.asarray(u, dtype=float)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            val = float(self._graph(ad.Var(u)).value)
        return val if np.isfinite(val) else -np.inf

    def constrain(self, u):
        values, _ = self.layout.constrain(u)
        return values

    def unconstrain(self, values):
        return self.layout.unconstrain(values)

    def derived(self, u):
        """Derived quantities at a single unconstrained point."""
        d = self.derived_draws(np.asarray(u, dtype=float)[None, :])
        return DerivedQuantities(
            **{k: (v[0] if isinstance(v, np.ndarray) else v)
               for k, v in vars(d).items()})

    def _lambda_start(self):
        """Log-rate start values: observed ratios, regional rates elsewhere."""
        data = self.data
        n, t = data.n_domains, data.n_months
        reg_of_dom = np.argmax(data.region, axis=1)
        y = data.y.astype(float)
        cum = data.ind_cum_obs
        total_rate = 0.1
        if len(cum) and data.emp[cum].sum() > 0:
            total_rate = max(y[cum].sum(), 0.5) / data.emp[cum].sum()
        lam = np.empty(n * t)
        for month, obs in enumerate(data.ind_obs):
            sl = slice(month * n, (month + 1) * n)
            ym, em = y[sl], data.emp[sl]
            rate = np.full(data.n_regions, total_rate)
            for r in range(data.n_regions):
                sel = obs[reg_of_dom[obs] == r]
                if len(sel) and em[sel].sum() > 0:
                    rate[r] = max(ym[sel].sum(), 0.5) / em[sel].sum()
            start = np.log(rate[reg_of_dom])
            if len(obs):
                start[obs] = np.log(np.maximum(ym[obs], 0.5) / em[obs])
            lam[sl] = start
        return lam

    def _beta_start(self, lam):
        coef, *_ = np.linalg.lstsq(np.log(self.data.x), lam, rcond=None)
        return coef

    def initial_inv_metric(self):
        """Crude data-informed starting metric (posterior variance guesses).

        The log-rate of an observed domain is pinned by its count to roughly
        Poisson curvature, ``var(lambda_d) ~ 1/(y_d + 2)``; everything else
        starts at unit scale and the warm-up windows refine from there.
        """
        m = np.ones(self.layout.dim)
        lam_var = np.ones(len(self.data.y))
        obs = self.data.ind_cum_obs
        lam_var[obs] = 1.0 / (self.data.y[obs].astype(float) + 2.0)
        m[self.layout.slices["lambda"]] = lam_var
        return m

    def manifest(self):
        return {
            "model": self.name,
            "dim": self.layout.dim,
            "blocks": self.layout.manifest(),
            "config": asdict(self.config),
        }


def floored_inv_sqrt(n):
    """``1/sqrt(n)`` with the count floored at one respondent.

    Unsampled domains carry a zero respondent count in the data block but
    still need a finite overdispersion prior mean; treating them as a
    single respondent keeps the prior proper without touching the
    regional rollup counts.
    """
    return 1.0 / np.sqrt(np.maximum(np.asarray(n, dtype=float), 1.0))
