"""Time-series extension: a stack of monthly cross-sectional models whose
regression and overdispersion hyperparameters drift as first-order random
walks.

All domain-indexed arrays are stacked month-major (T blocks of N).  The
walks are non-centered: standard half-normal raw increments are cumulated
and scaled by a per-column innovation scale, so ``coef[t] - coef[t-1]``
recovers ``raw[t] * scale`` exactly.  Overdispersion prior means regress
on ``(1, 1/sqrt(n))`` with month-specific coefficients at every level.
"""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from . import densities as dens
from .base import BaseModel, DerivedQuantities, floored_inv_sqrt
from .transforms import Block, ParamLayout


class MVModel(BaseModel):
    name = "mv"

    def _setup(self):
        data = self.data
        n, r, p, t = data.n_domains, data.n_regions, data.n_pred, data.n_months
        self._n, self._r, self._p, self._t = n, r, p, t

        self.layout = ParamLayout([
            Block("sqrt_shape", 1, "exp"),
            Block("sqrt_shape_r", 1, "exp"),
            Block("sqrt_shape_nat", 1, "exp"),
            Block("sigma_sphi", 1, "exp"),
            Block("sigma_sphir", 1, "exp"),
            Block("sigma_sphinat", 1, "exp"),
            Block("vbias", 1, "exp1p"),
            Block("sigma_lam", 1, "exp"),
            Block("lambda", n * t),
            Block("log_epsilon_raw", n * t),
            Block("sqrt_phi", n * t, "exp"),
            Block("sqrt_phi_r", r * t, "exp"),
            Block("sqrt_phi_nat", t, "exp"),
            # column-major (T fast): column p occupies p*T:(p+1)*T
            Block("phi_beta_raw", 2 * t, "exp"),
            Block("sigma_phi", 2, "exp"),
            Block("phir_beta_raw", 2 * t, "exp"),
            Block("sigma_phir", 2, "exp"),
            Block("phinat_beta_raw", 2 * t, "exp"),
            Block("sigma_phinat", 2, "exp"),
            Block("beta_raw", p * t),
            Block("sigma_b", p, "exp"),
            Block("log_epsilonr_raw", r * t),
            Block("log_epsilon_nat_raw", t),
        ])
        if not self.config.use_vbias:
            raise ValueError("the time-series model always carries vbias")

        self._logx = np.log(data.x)                      # (N*T, P)
        self._emp = data.emp
        self._region_mv = np.kron(np.eye(t), data.region)   # (N*T, R*T)
        self._nat_mv = np.kron(np.eye(t), np.ones((r, 1)))  # (R*T, T)
        self._obs = data.ind_cum_obs
        self._y_obs = data.y[self._obs].astype(float)
        self._cv2_obs = data.cv2_y[self._obs]
        self._log_cv2_obs = np.log(self._cv2_obs)
        self._half_n_obs = 0.5 * data.n_resp[self._obs]
        self._x_phi1 = floored_inv_sqrt(data.n_resp)         # (N*T,)
        n_resp_r = data.n_resp_r
        self._x_phir1 = floored_inv_sqrt(n_resp_r)           # (R*T,)
        self._half_n_r = 0.5 * n_resp_r
        self._y_r = data.y_r.astype(float)
        self._cv2_r = data.cv2_y_r
        self._log_cv2_r = np.log(self._cv2_r)
        n_resp_nat = data.n_resp_nat
        self._x_phinat1 = floored_inv_sqrt(n_resp_nat)       # (T,)
        self._half_n_nat = 0.5 * n_resp_nat
        self._y_nat = data.y_nat.astype(float)
        self._cv2_nat = data.cv2_y_nat
        self._log_cv2_nat = np.log(self._cv2_nat)
        # month index expanders for per-month coefficients
        self._month_of_domain = np.repeat(np.arange(t), n)
        self._month_of_region = np.repeat(np.arange(t), r)

    def _walk(self, raw, scale, p, t):
        """Columns of a random walk: cumulated raws scaled per column."""
        return [ad.cumsum(raw[slice(j * t, (j + 1) * t)]) * scale[slice(j, j + 1)]
                for j in range(p)]

    def _graph(self, u):
        c = self.config
        t = self._t
        b, lp = self.layout.constrain_vars(u)

        # hyperpriors
        for name in ("sigma_lam", "sigma_b", "sigma_phi", "sigma_phir",
                     "sigma_phinat", "sigma_sphi", "sigma_sphir", "sigma_sphinat"):
            lp = lp + dens.half_student_t3_lpdf_sum(b[name])
        for name in ("sqrt_shape", "sqrt_shape_r", "sqrt_shape_nat"):
            lp = lp + dens.std_normal_lpdf_sum(b[name])
        lp = lp + dens.normal0_lpdf_sum(b["vbias"], 10.0)
        for name in ("beta_raw", "phi_beta_raw", "phir_beta_raw",
                     "phinat_beta_raw", "log_epsilon_raw", "log_epsilonr_raw",
                     "log_epsilon_nat_raw"):
            lp = lp + dens.std_normal_lpdf_sum(b[name])

        # random-walk regression coefficients, expanded to stacked arrays
        beta_cols = self._walk(b["beta_raw"], b["sigma_b"], self._p, t)
        xb = None
        for j, col in enumerate(beta_cols):
            term = col[self._month_of_domain] * self._logx[:, j]
            xb = term if xb is None else xb + term
        lp = lp + dens.normal_lpdf_sum(b["lambda"], xb, b["sigma_lam"])

        # overdispersion prior means regress on (1, 1/sqrt(n)) per month
        pb = self._walk(b["phi_beta_raw"], b["sigma_phi"], 2, t)
        fitted_sqrtphi = (pb[0][self._month_of_domain]
                          + pb[1][self._month_of_domain] * self._x_phi1)
        lp = lp + dens.normal_lpdf_sum(b["sqrt_phi"], fitted_sqrtphi, b["sigma_sphi"])
        pbr = self._walk(b["phir_beta_raw"], b["sigma_phir"], 2, t)
        fitted_sqrtphi_r = (pbr[0][self._month_of_region]
                            + pbr[1][self._month_of_region] * self._x_phir1)
        lp = lp + dens.normal_lpdf_sum(b["sqrt_phi_r"], fitted_sqrtphi_r, b["sigma_sphir"])
        pbn = self._walk(b["phinat_beta_raw"], b["sigma_phinat"], 2, t)
        fitted_sqrtphi_nat = pbn[0] + pbn[1] * self._x_phinat1
        lp = lp + dens.normal_lpdf_sum(b["sqrt_phi_nat"], fitted_sqrtphi_nat,
                                       b["sigma_sphinat"])

        # domain level
        phi = ad.square(b["sqrt_phi"])
        log_eps = b["log_epsilon_raw"] * b["sqrt_phi"] - phi * 0.5
        fitted_y = ad.exp(b["lambda"]) * self._emp
        mean_y = fitted_y * ad.exp(log_eps)
        lp = lp + dens.poisson_lpmf_sum(self._y_obs, mean_y[self._obs])
        fitted_cv2 = 1.0 / fitted_y + (ad.exp(phi) - 1.0)
        shape = ad.square(b["sqrt_shape"])
        a_d = shape * self._half_n_obs
        lp = lp + dens.gamma_lpdf_sum(
            self._cv2_obs, self._log_cv2_obs, a_d, a_d / fitted_cv2[self._obs])

        # regional level (exact member sums per month)
        phi_r = ad.square(b["sqrt_phi_r"])
        log_eps_r = b["log_epsilonr_raw"] * b["sqrt_phi_r"] - phi_r * 0.5
        fitted_y_r = ad.matvec(fitted_y, self._region_mv)
        mean_y_r = fitted_y_r * ad.exp(log_eps_r)
        lp = lp + dens.poisson_lpmf_sum(self._y_r, mean_y_r)
        fitted_cv2_r = 1.0 / fitted_y_r + (ad.exp(phi_r) - 1.0)
        shape_r = ad.square(b["sqrt_shape_r"])
        a_r = shape_r * self._half_n_r
        lp = lp + dens.gamma_lpdf_sum(
            self._cv2_r, self._log_cv2_r, a_r, a_r * b["vbias"] / fitted_cv2_r)

        # national level
        phi_nat = ad.square(b["sqrt_phi_nat"])
        log_eps_nat = b["log_epsilon_nat_raw"] * b["sqrt_phi_nat"] - phi_nat * 0.5
        fitted_y_nat = ad.matvec(fitted_y_r, self._nat_mv)
        mean_y_nat = fitted_y_nat * ad.exp(log_eps_nat)
        lp = lp + dens.poisson_lpmf_sum(self._y_nat, mean_y_nat)
        fitted_cv2_nat = 1.0 / fitted_y_nat + (ad.exp(phi_nat) - 1.0)
        shape_nat = ad.square(b["sqrt_shape_nat"])
        a_nat = shape_nat * self._half_n_nat
        lp = lp + dens.gamma_lpdf_sum(
            self._cv2_nat, self._log_cv2_nat, a_nat,
            a_nat * b["vbias"] / fitted_cv2_nat)
        return lp

    def initial_point(self):
        """Data-informed chain start on the unconstrained scale."""
        n, r, p, t = self._n, self._r, self._p, self._t
        lam = self._lambda_start()
        coef = self._beta_start(lam)
        beta_raw = np.zeros((p, t))
        beta_raw[:, 0] = coef          # flat walk at the pooled coefficient
        walk_raw = np.full((2, t), 0.01)
        walk_raw[:, 0] = 0.3
        return self.unconstrain({
            "sqrt_shape": [1.0], "sqrt_shape_r": [1.0], "sqrt_shape_nat": [1.0],
            "sigma_sphi": [0.5], "sigma_sphir": [0.5], "sigma_sphinat": [0.5],
            "vbias": [1.5], "sigma_lam": [0.5], "lambda": lam,
            "log_epsilon_raw": np.zeros(n * t),
            "sqrt_phi": np.full(n * t, 0.2), "sqrt_phi_r": np.full(r * t, 0.2),
            "sqrt_phi_nat": np.full(t, 0.2),
            "phi_beta_raw": walk_raw.ravel(), "sigma_phi": [0.5, 0.5],
            "phir_beta_raw": walk_raw.ravel(), "sigma_phir": [0.5, 0.5],
            "phinat_beta_raw": walk_raw.ravel(), "sigma_phinat": [0.5, 0.5],
            "beta_raw": beta_raw.ravel(), "sigma_b": np.ones(p),
            "log_epsilonr_raw": np.zeros(r * t),
            "log_epsilon_nat_raw": np.zeros(t),
        })

    def walk_coefficients(self, u):
        """Constrained per-month regression coefficients beta[t, p]."""
        c = self.constrain(u)
        t = self._t
        cols = [np.cumsum(c["beta_raw"][j * t:(j + 1) * t]) * c["sigma_b"][j]
                for j in range(self._p)]
        return np.stack(cols, axis=1)

    def derived_draws(self, draws):
        c, _ = self.layout.constrain(np.atleast_2d(draws))
        theta = self._emp * np.exp(c["lambda"])
        phi = c["sqrt_phi"] ** 2
        epsilon = np.exp(c["log_epsilon_raw"] * c["sqrt_phi"] - 0.5 * phi)
        cv2 = 1.0 / theta + np.expm1(phi)
        theta_r = theta @ self._region_mv
        phi_r = c["sqrt_phi_r"] ** 2
        cv2_r = 1.0 / theta_r + np.expm1(phi_r)
        theta_nat = theta_r @ self._nat_mv
        phi_nat = c["sqrt_phi_nat"] ** 2
        cv2_nat = 1.0 / theta_nat + np.expm1(phi_nat)
        return DerivedQuantities(
            theta=theta, mean_y=theta * epsilon, epsilon=epsilon, cv2=cv2,
            vrnc=theta ** 2 * cv2,
            theta_r=theta_r, vrnc_r=theta_r ** 2 * cv2_r,
            theta_nat=theta_nat, vrnc_nat=theta_nat ** 2 * cv2_nat)
