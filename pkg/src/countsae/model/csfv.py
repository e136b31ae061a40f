"""Cross-sectional model treating the observed variances as known truth.

No variance likelihood and no free overdispersion parameters: the
overdispersion of each Poisson-lognormal mixture is the deterministic
variance-matching function of the fitted mean and the fixed input
variance, recomputed inside the density so the marginal-variance identity
holds at every parameter point.  The regional and national levels use
their own fixed variances the same way.
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln

from .. import autodiff as ad
from . import _kernels
from . import densities as dens
from . import ops
from .base import BaseModel, DerivedQuantities
from .transforms import Block, ParamLayout


def _matched_poisson(y, v, theta, raw, floor):
    """Log-pmf sum of ``y ~ Poisson(theta * eps)`` with matched phi2.

    ``eps`` is the lognormal disturbance with variance-matched
    overdispersion ``phi2(theta, v)``; returns the contribution and its
    partials with respect to ``theta`` and ``raw`` (clamped cells carry
    zero gradient through the match).
    """
    z = v / theta ** 2 - 1.0 / theta
    zf = np.maximum(z, floor - 1.0)
    phi2 = np.maximum(np.log1p(zf), 0.0)
    unclamped = phi2 > 0
    phi = np.sqrt(np.maximum(phi2, 1e-300))
    log_eps = raw * phi - 0.5 * phi2
    my = theta * np.exp(log_eps)
    lp = float((y * np.log(my)).sum() - my.sum() - gammaln(y + 1.0).sum())
    gmy = y - my                          # dlp / dlog(mean)
    d_theta = gmy / theta
    d_raw = gmy * phi
    phi_safe = np.where(unclamped, phi, 1.0)
    d_phi2 = np.where(unclamped, gmy * (raw / (2.0 * phi_safe) - 0.5), 0.0)
    d_z = np.where(unclamped, d_phi2 / (1.0 + zf), 0.0)
    d_theta = d_theta + d_z * (1.0 / theta ** 2 - 2.0 * v / theta ** 3)
    return lp, d_theta, d_raw


class CSFVModel(BaseModel):
    name = "cs-fv"

    def _setup(self):
        data = self.data
        if data.is_mv:
            raise ValueError("fixed-variance model needs single-month input")
        n, r, p = data.n_domains, data.n_regions, data.n_pred
        self.layout = ParamLayout([
            Block("sigma_lam", 1, "exp"),
            Block("lambda", n),
            Block("log_epsilon_raw", n),
            Block("beta", p),
            Block("sigma_b", p, "exp"),
            Block("log_epsilonr_raw", r),
            Block("log_epsilon_nat_raw", 1),
        ])

        self._logx = np.log(data.x)
        self._emp = data.emp
        self._region = data.region
        self._obs = data.ind_obs[0]
        self._y_obs = data.y[self._obs].astype(float)
        # a zero input variance (a zero estimate with floored cv2) lands on
        # the clamped equidispersed branch, i.e. a plain Poisson cell
        self._v_obs = np.maximum(data.cv2_y[self._obs] * self._y_obs ** 2, 1e-12)
        self._y_r = data.y_r.astype(float)
        self._v_r = np.maximum(data.cv2_y_r * self._y_r ** 2, 1e-12)
        self._y_nat = data.y_nat.astype(float)
        self._v_nat = np.maximum(data.cv2_y_nat * self._y_nat ** 2, 1e-12)
        self._nat_mat = np.ones((data.n_regions, 1))
        self._reg_of_dom = np.argmax(data.region, axis=1).astype(np.int64)

    def _mixture_mean(self, theta, v_const, raw):
        """Poisson mean ``theta * eps`` with variance-matched overdispersion."""
        phi2 = ops.match_phi2_var(theta, v_const, self.config.phi_match_floor)
        phi = ops.sqrt_phi2_var(phi2)
        log_eps = raw * phi - phi2 * 0.5
        return theta * ad.exp(log_eps)

    def _graph(self, u):
        b, lp = self.layout.constrain_vars(u)

        lp = lp + dens.half_student_t3_lpdf_sum(b["sigma_lam"])
        lp = lp + dens.half_student_t3_lpdf_sum(b["sigma_b"])
        lp = lp + dens.normal_lpdf_sum(b["beta"], 0.0, b["sigma_b"])
        xb = ad.matvec_left(self._logx, b["beta"])
        lp = lp + dens.normal_lpdf_sum(b["lambda"], xb, b["sigma_lam"])
        lp = lp + dens.std_normal_lpdf_sum(b["log_epsilon_raw"])
        lp = lp + dens.std_normal_lpdf_sum(b["log_epsilonr_raw"])
        lp = lp + dens.std_normal_lpdf_sum(b["log_epsilon_nat_raw"])

        fitted_y = ad.exp(b["lambda"]) * self._emp
        mean_y_obs = self._mixture_mean(
            fitted_y[self._obs], self._v_obs, b["log_epsilon_raw"][self._obs])
        lp = lp + dens.poisson_lpmf_sum(self._y_obs, mean_y_obs)

        fitted_y_r = ad.matvec(fitted_y, self._region)
        mean_y_r = self._mixture_mean(fitted_y_r, self._v_r, b["log_epsilonr_raw"])
        lp = lp + dens.poisson_lpmf_sum(self._y_r, mean_y_r)

        fitted_y_nat = ad.matvec(fitted_y_r, self._nat_mat)
        mean_y_nat = self._mixture_mean(
            fitted_y_nat, self._v_nat, b["log_epsilon_nat_raw"])
        lp = lp + dens.poisson_lpmf_sum(self._y_nat, mean_y_nat)
        return lp

    def _fused_logp_grad(self, u):
        """Hand-fused value+gradient; mirrors ``_graph`` term for term."""
        if _kernels.HAVE_NUMBA:
            g = np.zeros_like(u)
            val = _kernels.csfv_kernel(
                u, g, self.data.n_domains, self.data.n_regions,
                self.data.n_pred, self.config.phi_match_floor,
                self._logx, self._emp, self._reg_of_dom, self._obs,
                self._y_obs, self._v_obs, self._y_r, self._v_r,
                self._y_nat[0], self._v_nat[0])
            return float(val), g
        return self._fused_numpy(u)

    def _fused_numpy(self, u):
        sl = self.layout.slices
        obs = self._obs
        floor = self.config.phi_match_floor

        siglam = np.exp(u[sl["sigma_lam"].start])
        lam = u[sl["lambda"]]
        re = u[sl["log_epsilon_raw"]]
        beta = u[sl["beta"]]
        sb = np.exp(u[sl["sigma_b"]])
        rer = u[sl["log_epsilonr_raw"]]
        ren = u[sl["log_epsilon_nat_raw"]]
        n_dom = len(lam)

        logp = u[sl["sigma_lam"].start] + u[sl["sigma_b"]].sum()
        logp += -2.0 * np.log1p(siglam * siglam / 3.0)
        d_siglam = -4.0 * siglam / (3.0 + siglam * siglam)
        logp += -2.0 * np.log1p(sb * sb / 3.0).sum()
        d_sb = -4.0 * sb / (3.0 + sb * sb)
        logp += -np.log(sb).sum() - 0.5 * ((beta / sb) ** 2).sum()
        d_beta = -beta / sb ** 2
        d_sb += -1.0 / sb + beta ** 2 / sb ** 3

        xb = self._logx @ beta
        resid = (lam - xb) / (siglam * siglam)
        logp += -n_dom * np.log(siglam) - 0.5 * ((lam - xb) ** 2).sum() / (siglam * siglam)
        d_lam = -resid
        d_beta += self._logx.T @ resid
        d_siglam += -n_dom / siglam + ((lam - xb) ** 2).sum() / siglam ** 3
        logp += -0.5 * ((re * re).sum() + (rer * rer).sum() + (ren * ren).sum())
        d_re = -re.copy()

        fy = self._emp * np.exp(lam)
        lp_o, d_th_o, d_raw_o = _matched_poisson(
            self._y_obs, self._v_obs, fy[obs], re[obs], floor)
        fy_r = fy @ self._region
        lp_r, d_th_r, d_raw_r = _matched_poisson(
            self._y_r, self._v_r, fy_r, rer, floor)
        fy_n = np.array([fy_r.sum()])
        lp_n, d_th_n, d_raw_n = _matched_poisson(
            self._y_nat, self._v_nat, fy_n, ren, floor)
        logp += lp_o + lp_r + lp_n

        d_fy = np.zeros(n_dom)
        d_fy[obs] = d_th_o
        d_fy += self._region @ (d_th_r + d_th_n[0])
        d_lam += d_fy * fy
        d_re[obs] += d_raw_o

        g = np.empty_like(u)
        g[sl["sigma_lam"]] = d_siglam * siglam + 1.0
        g[sl["lambda"]] = d_lam
        g[sl["log_epsilon_raw"]] = d_re
        g[sl["beta"]] = d_beta
        g[sl["sigma_b"]] = d_sb * sb + 1.0
        g[sl["log_epsilonr_raw"]] = -rer + d_raw_r
        g[sl["log_epsilon_nat_raw"]] = -ren + d_raw_n
        return float(logp), g

    def initial_point(self):
        """Data-informed chain start on the unconstrained scale."""
        n, r, p = self.data.n_domains, self.data.n_regions, self.data.n_pred
        lam = self._lambda_start()
        return self.unconstrain({
            "sigma_lam": [0.5], "lambda": lam,
            "log_epsilon_raw": np.zeros(n),
            "beta": self._beta_start(lam), "sigma_b": np.ones(p),
            "log_epsilonr_raw": np.zeros(r), "log_epsilon_nat_raw": [0.0],
        })

    def derived_draws(self, draws):
        c, _ = self.layout.constrain(np.atleast_2d(draws))
        floor = self.config.phi_match_floor
        theta = self._emp * np.exp(c["lambda"])
        n_draws, n = theta.shape

        theta_obs = theta[:, self._obs]
        phi2, clamped = ops.variance_match_phi2(
            theta_obs, np.broadcast_to(self._v_obs, theta_obs.shape), floor)
        eps_obs = np.exp(c["log_epsilon_raw"][:, self._obs] * np.sqrt(phi2)
                         - 0.5 * phi2)
        cv2 = np.full((n_draws, n), np.nan)
        vrnc = np.full((n_draws, n), np.nan)
        mean_y = np.full((n_draws, n), np.nan)
        epsilon = np.full((n_draws, n), np.nan)
        cv2[:, self._obs] = ops.fitted_cv2(theta_obs, phi2)
        vrnc[:, self._obs] = ops.mixture_variance(theta_obs, phi2)
        epsilon[:, self._obs] = eps_obs
        mean_y[:, self._obs] = theta_obs * eps_obs

        theta_r = theta @ self._region
        phi2_r, clamped_r = ops.variance_match_phi2(
            theta_r, np.broadcast_to(self._v_r, theta_r.shape), floor)
        vrnc_r = ops.mixture_variance(theta_r, phi2_r)
        theta_nat = theta_r.sum(axis=-1, keepdims=True)
        phi2_nat, clamped_nat = ops.variance_match_phi2(
            theta_nat, np.broadcast_to(self._v_nat, theta_nat.shape), floor)
        vrnc_nat = ops.mixture_variance(theta_nat, phi2_nat)

        n_cells = clamped.size + clamped_r.size + clamped_nat.size
        frac = (clamped.sum() + clamped_r.sum() + clamped_nat.sum()) / max(n_cells, 1)
        return DerivedQuantities(
            theta=theta, mean_y=mean_y, epsilon=epsilon, cv2=cv2, vrnc=vrnc,
            theta_r=theta_r, vrnc_r=vrnc_r,
            theta_nat=theta_nat, vrnc_nat=vrnc_nat,
            clamped_frac=float(frac))
