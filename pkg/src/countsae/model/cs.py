"""Cross-sectional joint model for point estimates and squared CVs.

Observed domain counts follow a Poisson-lognormal mixture around the
offset-linked mean; observed squared CVs follow a gamma likelihood whose
mean is the mixture's fitted squared CV, with precision growing in the
respondent count.  Regional totals are benchmarked exactly inside the
model (theta_r is the member-domain sum) and carry their own mixture and
gamma terms, as does the national total; the regional/national gamma
means divide by a shared >=1 bias factor for the observed variances.
Unsampled domains keep their parameters with prior-only contributions,
which is what makes their fitted values imputable.
"""

from __future__ import annotations

import numpy as np
from scipy.special import digamma, gammaln

from .. import autodiff as ad
from . import _kernels
from . import densities as dens
from .base import BaseModel, DerivedQuantities, floored_inv_sqrt
from .transforms import Block, ParamLayout


class CSModel(BaseModel):
    name = "cs"

    def _setup(self):
        data = self.data
        if data.is_mv:
            raise ValueError("cross-sectional model needs single-month input")
        n, r, p = data.n_domains, data.n_regions, data.n_pred

        blocks = [
            Block("sqrt_shape", 1, "exp"),
            Block("sqrt_shape_r", 1, "exp"),
            Block("sqrt_shape_nat", 1, "exp"),
        ]
        if self.config.use_vbias:
            blocks.append(Block("vbias", 1, "exp1p"))
        blocks += [
            Block("sigma_lam", 1, "exp"),
            Block("lambda", n),
            Block("log_epsilon_raw", n),
            Block("sqrt_phi", n, "exp"),
            Block("sqrt_phi_r", r, "exp"),
            Block("sqrt_phi_nat", 1, "exp"),
            Block("phi_beta", 1, "exp"),
            Block("beta", p),
            Block("sigma_b", p, "exp"),
            Block("log_epsilonr_raw", r),
            Block("log_epsilon_nat_raw", 1),
        ]
        self.layout = ParamLayout(blocks)

        self._logx = np.log(data.x)
        self._emp = data.emp
        self._region = data.region
        self._obs = data.ind_obs[0]
        self._y_obs = data.y[self._obs].astype(float)
        self._cv2_obs = data.cv2_y[self._obs]
        self._log_cv2_obs = np.log(self._cv2_obs)
        self._half_n_obs = 0.5 * data.n_resp[self._obs]
        self._inv_sqrt_n = floored_inv_sqrt(data.n_resp)
        self._n_resp_r = data.n_resp_r
        self._inv_sqrt_n_r = floored_inv_sqrt(self._n_resp_r)
        self._half_n_r = 0.5 * self._n_resp_r
        self._y_r = data.y_r.astype(float)
        self._cv2_r = data.cv2_y_r
        self._log_cv2_r = np.log(self._cv2_r)
        self._n_resp_nat = data.n_resp_nat
        self._inv_sqrt_n_nat = floored_inv_sqrt(self._n_resp_nat)
        self._half_n_nat = 0.5 * self._n_resp_nat
        self._y_nat = data.y_nat.astype(float)
        self._cv2_nat = data.cv2_y_nat
        self._log_cv2_nat = np.log(self._cv2_nat)
        self._nat_mat = np.ones((data.n_regions, 1))
        self._pois_const = -float(gammaln(self._y_obs + 1.0).sum())
        self._pois_const_r = -float(gammaln(self._y_r + 1.0).sum())
        self._pois_const_nat = -float(gammaln(self._y_nat + 1.0).sum())
        self._reg_of_dom = np.argmax(data.region, axis=1).astype(np.int64)

    def _graph(self, u):
        c = self.config
        b, lp = self.layout.constrain_vars(u)

        # hyperpriors
        lp = lp + dens.half_student_t3_lpdf_sum(b["sigma_lam"])
        lp = lp + dens.half_student_t3_lpdf_sum(b["sigma_b"])
        lp = lp + dens.normal_lpdf_sum(b["beta"], 0.0, b["sigma_b"])
        lp = lp + dens.std_normal_lpdf_sum(b["sqrt_shape"])
        lp = lp + dens.std_normal_lpdf_sum(b["sqrt_shape_r"])
        lp = lp + dens.std_normal_lpdf_sum(b["sqrt_shape_nat"])
        lp = lp + dens.std_normal_lpdf_sum(b["phi_beta"])
        if c.use_vbias:
            lp = lp + dens.normal0_lpdf_sum(b["vbias"], 10.0)

        # overdispersion priors shrink with respondent counts
        lp = lp + dens.normal_lpdf_sum(
            b["sqrt_phi"], b["phi_beta"] * self._inv_sqrt_n, c.phi_prior_scale)
        lp = lp + dens.normal_lpdf_sum(
            b["sqrt_phi_r"], b["phi_beta"] * self._inv_sqrt_n_r, c.phi_prior_scale)
        lp = lp + dens.normal_lpdf_sum(
            b["sqrt_phi_nat"], b["phi_beta"] * self._inv_sqrt_n_nat, c.phi_prior_scale)

        # linking prior
        xb = ad.matvec_left(self._logx, b["beta"])
        lp = lp + dens.normal_lpdf_sum(b["lambda"], xb, b["sigma_lam"])
        lp = lp + dens.std_normal_lpdf_sum(b["log_epsilon_raw"])
        lp = lp + dens.std_normal_lpdf_sum(b["log_epsilonr_raw"])
        lp = lp + dens.std_normal_lpdf_sum(b["log_epsilon_nat_raw"])

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

        # regional level, benchmarked through the exact member sum
        phi_r = ad.square(b["sqrt_phi_r"])
        log_eps_r = b["log_epsilonr_raw"] * b["sqrt_phi_r"] - phi_r * 0.5
        fitted_y_r = ad.matvec(fitted_y, self._region)
        mean_y_r = fitted_y_r * ad.exp(log_eps_r)
        lp = lp + dens.poisson_lpmf_sum(self._y_r, mean_y_r)
        fitted_cv2_r = 1.0 / fitted_y_r + (ad.exp(phi_r) - 1.0)
        shape_r = ad.square(b["sqrt_shape_r"])
        a_r = shape_r * self._half_n_r
        rate_r = a_r / fitted_cv2_r
        if c.use_vbias:
            rate_r = rate_r * b["vbias"]
        lp = lp + dens.gamma_lpdf_sum(self._cv2_r, self._log_cv2_r, a_r, rate_r)

        # national level
        phi_nat = ad.square(b["sqrt_phi_nat"])
        log_eps_nat = b["log_epsilon_nat_raw"] * b["sqrt_phi_nat"] - phi_nat * 0.5
        fitted_y_nat = ad.matvec(fitted_y_r, self._nat_mat)
        mean_y_nat = fitted_y_nat * ad.exp(log_eps_nat)
        lp = lp + dens.poisson_lpmf_sum(self._y_nat, mean_y_nat)
        fitted_cv2_nat = 1.0 / fitted_y_nat + (ad.exp(phi_nat) - 1.0)
        shape_nat = ad.square(b["sqrt_shape_nat"])
        a_nat = shape_nat * self._half_n_nat
        rate_nat = a_nat / fitted_cv2_nat
        if c.use_vbias:
            rate_nat = rate_nat * b["vbias"]
        lp = lp + dens.gamma_lpdf_sum(self._cv2_nat, self._log_cv2_nat, a_nat, rate_nat)
        return lp

    def _fused_logp_grad(self, u):
        """Hand-fused value+gradient; mirrors ``_graph`` term for term."""
        if _kernels.HAVE_NUMBA:
            g = np.zeros_like(u)
            val = _kernels.cs_kernel(
                u, g, self.data.n_domains, self.data.n_regions,
                self.data.n_pred, self.config.use_vbias,
                self.config.phi_prior_scale ** 2,
                self._logx, self._emp, self._reg_of_dom, self._obs,
                self._y_obs, self._cv2_obs, self._log_cv2_obs, self._half_n_obs,
                self._inv_sqrt_n, self._inv_sqrt_n_r, self._inv_sqrt_n_nat[0],
                self._y_r, self._cv2_r, self._log_cv2_r, self._half_n_r,
                self._y_nat[0], self._cv2_nat[0], self._log_cv2_nat[0],
                self._half_n_nat[0],
                self._pois_const + self._pois_const_r + self._pois_const_nat)
            return float(val), g
        return self._fused_numpy(u)

    def _fused_numpy(self, u):
        cfg = self.config
        sl = self.layout.slices
        obs = self._obs
        use_vb = cfg.use_vbias

        ss, ssr, ssn = np.exp(u[0]), np.exp(u[1]), np.exp(u[2])
        vb = 1.0 + np.exp(u[sl["vbias"].start]) if use_vb else 1.0
        siglam = np.exp(u[sl["sigma_lam"].start])
        lam = u[sl["lambda"]]
        re = u[sl["log_epsilon_raw"]]
        sp = np.exp(u[sl["sqrt_phi"]])
        spr = np.exp(u[sl["sqrt_phi_r"]])
        spn = np.exp(u[sl["sqrt_phi_nat"].start])
        pb = np.exp(u[sl["phi_beta"].start])
        beta = u[sl["beta"]]
        sb = np.exp(u[sl["sigma_b"]])
        rer = u[sl["log_epsilonr_raw"]]
        ren = u[sl["log_epsilon_nat_raw"].start]

        n_dom = len(lam)
        logp = u[0] + u[1] + u[2] + u[sl["sigma_lam"].start] \
            + u[sl["sqrt_phi"]].sum() + u[sl["sqrt_phi_r"]].sum() \
            + u[sl["sqrt_phi_nat"].start] + u[sl["phi_beta"].start] \
            + u[sl["sigma_b"]].sum()
        if use_vb:
            logp += u[sl["vbias"].start]

        d_ss = d_ssr = d_ssn = d_vb = d_spn = d_pb = d_ren = 0.0
        d_lam = np.zeros(n_dom)
        d_sp = np.zeros(n_dom)

        # hyperpriors
        logp += -2.0 * np.log1p(siglam * siglam / 3.0)
        d_siglam = -4.0 * siglam / (3.0 + siglam * siglam)
        logp += -2.0 * np.log1p(sb * sb / 3.0).sum()
        d_sb = -4.0 * sb / (3.0 + sb * sb)
        logp += -np.log(sb).sum() - 0.5 * ((beta / sb) ** 2).sum()
        d_beta = -beta / sb ** 2
        d_sb += -1.0 / sb + beta ** 2 / sb ** 3
        logp += -0.5 * (ss * ss + ssr * ssr + ssn * ssn + pb * pb)
        d_ss -= ss
        d_ssr -= ssr
        d_ssn -= ssn
        d_pb -= pb
        if use_vb:
            logp += -vb * vb / 200.0
            d_vb -= vb / 100.0

        # overdispersion priors
        s2 = cfg.phi_prior_scale ** 2
        r_d = (sp - pb * self._inv_sqrt_n) / s2
        logp += -0.5 * s2 * (r_d ** 2).sum()
        d_sp -= r_d
        d_pb += (r_d * self._inv_sqrt_n).sum()
        r_r = (spr - pb * self._inv_sqrt_n_r) / s2
        logp += -0.5 * s2 * (r_r ** 2).sum()
        d_spr = -r_r
        d_pb += (r_r * self._inv_sqrt_n_r).sum()
        r_n = (spn - pb * self._inv_sqrt_n_nat[0]) / s2
        logp += -0.5 * s2 * r_n ** 2
        d_spn -= r_n
        d_pb += r_n * self._inv_sqrt_n_nat[0]

        # linking prior
        xb = self._logx @ beta
        resid = (lam - xb) / (siglam * siglam)
        logp += -n_dom * np.log(siglam) - 0.5 * ((lam - xb) ** 2).sum() / (siglam * siglam)
        d_lam -= resid
        d_beta += self._logx.T @ resid
        d_siglam += -n_dom / siglam + ((lam - xb) ** 2).sum() / siglam ** 3
        logp += -0.5 * ((re * re).sum() + (rer * rer).sum() + ren * ren)
        d_re = -re.copy()
        d_rer = -rer.copy()
        d_ren -= ren

        # domain level
        phi = sp * sp
        log_eps = re * sp - 0.5 * phi
        fy = self._emp * np.exp(lam)
        my = fy * np.exp(log_eps)
        myo = my[obs]
        logp += (self._y_obs * np.log(myo)).sum() - myo.sum() + self._pois_const
        gmy = self._y_obs - myo                     # dlp/dlog(my) at obs
        fyo, phio = fy[obs], phi[obs]
        exp_phio = np.exp(phio)
        c_d = 1.0 / fyo + exp_phio - 1.0
        a_d = (ss * ss) * self._half_n_obs
        logp += (a_d * (np.log(a_d) - np.log(c_d)) - gammaln(a_d)
                 + (a_d - 1.0) * self._log_cv2_obs - a_d * self._cv2_obs / c_d).sum()
        d_a = np.log(a_d / c_d) + 1.0 - digamma(a_d) + self._log_cv2_obs \
            - self._cv2_obs / c_d
        d_c = a_d * (self._cv2_obs - c_d) / (c_d * c_d)
        d_ss += (d_a * self._half_n_obs).sum() * 2.0 * ss
        d_fy = np.zeros(n_dom)
        d_logeps = np.zeros(n_dom)
        d_fy[obs] = gmy / fyo - d_c / fyo ** 2
        d_logeps[obs] = gmy
        d_phi = np.zeros(n_dom)
        d_phi[obs] = d_c * exp_phio

        # regional level
        phir = spr * spr
        log_eps_r = rer * spr - 0.5 * phir
        fy_r = fy @ self._region
        my_r = fy_r * np.exp(log_eps_r)
        logp += (self._y_r * np.log(my_r)).sum() - my_r.sum() + self._pois_const_r
        gmyr = self._y_r - my_r
        exp_phir = np.exp(phir)
        c_r = 1.0 / fy_r + exp_phir - 1.0
        a_r = (ssr * ssr) * self._half_n_r
        logp += (a_r * (np.log(a_r * vb) - np.log(c_r)) - gammaln(a_r)
                 + (a_r - 1.0) * self._log_cv2_r - a_r * vb * self._cv2_r / c_r).sum()
        d_ar = np.log(a_r * vb / c_r) + 1.0 - digamma(a_r) + self._log_cv2_r \
            - vb * self._cv2_r / c_r
        d_cr = a_r * (vb * self._cv2_r - c_r) / (c_r * c_r)
        d_ssr += (d_ar * self._half_n_r).sum() * 2.0 * ssr
        if use_vb:
            d_vb += (a_r / vb - a_r * self._cv2_r / c_r).sum()
        d_fy_r = gmyr / fy_r - d_cr / fy_r ** 2
        d_logeps_r = gmyr
        d_phir = d_cr * exp_phir

        # national level
        phin = spn * spn
        log_eps_n = ren * spn - 0.5 * phin
        fy_n = fy_r.sum()
        my_n = fy_n * np.exp(log_eps_n)
        logp += self._y_nat[0] * np.log(my_n) - my_n + self._pois_const_nat
        gmyn = self._y_nat[0] - my_n
        exp_phin = np.exp(phin)
        c_n = 1.0 / fy_n + exp_phin - 1.0
        a_n = (ssn * ssn) * self._half_n_nat[0]
        cv2n, lcv2n = self._cv2_nat[0], self._log_cv2_nat[0]
        logp += a_n * (np.log(a_n * vb) - np.log(c_n)) - gammaln(a_n) \
            + (a_n - 1.0) * lcv2n - a_n * vb * cv2n / c_n
        d_an = np.log(a_n * vb / c_n) + 1.0 - digamma(a_n) + lcv2n - vb * cv2n / c_n
        d_cn = a_n * (vb * cv2n - c_n) / (c_n * c_n)
        d_ssn += d_an * self._half_n_nat[0] * 2.0 * ssn
        if use_vb:
            d_vb += a_n / vb - a_n * cv2n / c_n
        d_fy_n = gmyn / fy_n - d_cn / fy_n ** 2
        d_logeps_n = gmyn
        d_phin = d_cn * exp_phin

        # pull everything back to the domain rates
        d_fy_r += d_fy_n
        d_fy += self._region @ d_fy_r
        d_lam += d_fy * fy
        d_re += d_logeps * sp
        d_sp += d_logeps * (re - sp) + d_phi * 2.0 * sp
        d_rer += d_logeps_r * spr
        d_spr += d_logeps_r * (rer - spr) + d_phir * 2.0 * spr
        d_ren += d_logeps_n * spn
        d_spn += d_logeps_n * (ren - spn) + d_phin * 2.0 * spn

        g = np.empty_like(u)
        g[0] = d_ss * ss + 1.0
        g[1] = d_ssr * ssr + 1.0
        g[2] = d_ssn * ssn + 1.0
        if use_vb:
            g[sl["vbias"]] = d_vb * (vb - 1.0) + 1.0
        g[sl["sigma_lam"]] = d_siglam * siglam + 1.0
        g[sl["lambda"]] = d_lam
        g[sl["log_epsilon_raw"]] = d_re
        g[sl["sqrt_phi"]] = d_sp * sp + 1.0
        g[sl["sqrt_phi_r"]] = d_spr * spr + 1.0
        g[sl["sqrt_phi_nat"]] = d_spn * spn + 1.0
        g[sl["phi_beta"]] = d_pb * pb + 1.0
        g[sl["beta"]] = d_beta
        g[sl["sigma_b"]] = d_sb * sb + 1.0
        g[sl["log_epsilonr_raw"]] = d_rer
        g[sl["log_epsilon_nat_raw"]] = d_ren
        return float(logp), g

    def initial_point(self):
        """Data-informed chain start on the unconstrained scale."""
        n, r, p = self.data.n_domains, self.data.n_regions, self.data.n_pred
        lam = self._lambda_start()
        values = {
            "sqrt_shape": [1.0], "sqrt_shape_r": [1.0], "sqrt_shape_nat": [1.0],
            "sigma_lam": [0.5], "lambda": lam,
            "log_epsilon_raw": np.zeros(n),
            "sqrt_phi": np.full(n, 0.2), "sqrt_phi_r": np.full(r, 0.2),
            "sqrt_phi_nat": [0.2], "phi_beta": [0.3],
            "beta": self._beta_start(lam), "sigma_b": np.ones(p),
            "log_epsilonr_raw": np.zeros(r), "log_epsilon_nat_raw": [0.0],
        }
        if self.config.use_vbias:
            values["vbias"] = [1.5]
        return self.unconstrain(values)

    def derived_draws(self, draws):
        c, _ = self.layout.constrain(np.atleast_2d(draws))
        theta = self._emp * np.exp(c["lambda"])
        phi = c["sqrt_phi"] ** 2
        epsilon = np.exp(c["log_epsilon_raw"] * c["sqrt_phi"] - 0.5 * phi)
        cv2 = 1.0 / theta + np.expm1(phi)
        theta_r = theta @ self._region
        phi_r = c["sqrt_phi_r"] ** 2
        cv2_r = 1.0 / theta_r + np.expm1(phi_r)
        theta_nat = theta_r.sum(axis=-1, keepdims=True)
        phi_nat = c["sqrt_phi_nat"] ** 2
        cv2_nat = 1.0 / theta_nat + np.expm1(phi_nat)
        return DerivedQuantities(
            theta=theta, mean_y=theta * epsilon, epsilon=epsilon, cv2=cv2,
            vrnc=theta ** 2 * cv2,
            theta_r=theta_r, vrnc_r=theta_r ** 2 * cv2_r,
            theta_nat=theta_nat, vrnc_nat=theta_nat ** 2 * cv2_nat)
