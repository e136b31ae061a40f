"""Jitted log-posterior kernels for the cross-sectional models.

Straight-line translations of the fused numpy gradients into numba loops;
the tape-differentiated graph stays the reference implementation and the
test suite pins kernel agreement to machine precision.  Importing numba
is optional: without it the models fall back to the numpy fused path.
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a soft dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        return wrap if not args else args[0]


@njit(cache=True, fastmath=False, error_model="numpy")
def _digamma(x):
    # recurrence up to the asymptotic regime, then a Stirling series
    res = 0.0
    while x < 10.0:
        res -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    res += math.log(x) - 0.5 * inv \
        - inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0
                  - inv2 * (1.0 / 240.0 - inv2 / 132.0))))
    return res


@njit(cache=True, fastmath=False, error_model="numpy")
def cs_kernel(u, g, n, r, p, use_vb, scale2,
              logx, emp, reg_of_dom, obs,
              y_obs, cv2_obs, lcv2_obs, half_n_obs,
              isn, isn_r, isn_nat,
              y_r, cv2_r, lcv2_r, half_n_r,
              y_nat, cv2_nat, lcv2_nat, half_n_nat,
              pois_const):
    """Log posterior and gradient of the joint cross-sectional model.

    ``g`` is written in place; returns the log density.  Offsets follow
    the fixed block order of the CS layout.
    """
    # block offsets
    o_vb = 3
    o_sl = o_vb + (1 if use_vb else 0)
    o_lam = o_sl + 1
    o_re = o_lam + n
    o_sp = o_re + n
    o_spr = o_sp + n
    o_spn = o_spr + r
    o_pb = o_spn + 1
    o_beta = o_pb + 1
    o_sb = o_beta + p
    o_rer = o_sb + p
    o_ren = o_rer + r

    ss = math.exp(u[0])
    ssr = math.exp(u[1])
    ssn = math.exp(u[2])
    vb = 1.0 + math.exp(u[o_vb]) if use_vb else 1.0
    siglam = math.exp(u[o_sl])
    pb = math.exp(u[o_pb])
    spn = math.exp(u[o_spn])
    ren = u[o_ren]

    logp = u[0] + u[1] + u[2] + u[o_sl] + u[o_pb] + u[o_spn]
    if use_vb:
        logp += u[o_vb]
    for i in range(n):
        logp += u[o_sp + i]
    for j in range(r):
        logp += u[o_spr + j]
    for k in range(p):
        logp += u[o_sb + k]

    d_ss = -ss
    d_ssr = -ssr
    d_ssn = -ssn
    d_pb = -pb
    d_vb = 0.0
    logp += -0.5 * (ss * ss + ssr * ssr + ssn * ssn + pb * pb)
    if use_vb:
        logp += -vb * vb / 200.0
        d_vb = -vb / 100.0
    logp += -2.0 * math.log1p(siglam * siglam / 3.0)
    d_siglam = -4.0 * siglam / (3.0 + siglam * siglam)

    # beta priors and linking mean
    sig2 = siglam * siglam
    for k in range(p):
        sb = math.exp(u[o_sb + k])
        bk = u[o_beta + k]
        logp += -2.0 * math.log1p(sb * sb / 3.0) - math.log(sb) \
            - 0.5 * (bk / sb) ** 2
        g[o_sb + k] = (-4.0 * sb / (3.0 + sb * sb)
                       - 1.0 / sb + bk * bk / sb ** 3) * sb + 1.0
        g[o_beta + k] = -bk / (sb * sb)

    ssq = 0.0
    for i in range(n):
        xb = 0.0
        for k in range(p):
            xb += logx[i, k] * u[o_beta + k]
        diff = u[o_lam + i] - xb
        ssq += diff * diff
        resid = diff / sig2
        g[o_lam + i] = -resid
        for k in range(p):
            g[o_beta + k] += logx[i, k] * resid
    logp += -n * math.log(siglam) - 0.5 * ssq / sig2
    d_siglam += -n / siglam + ssq / (siglam * sig2)

    # raw disturbances
    for i in range(n):
        re = u[o_re + i]
        logp += -0.5 * re * re
        g[o_re + i] = -re
    for j in range(r):
        rr = u[o_rer + j]
        logp += -0.5 * rr * rr
        g[o_rer + j] = -rr
    logp += -0.5 * ren * ren
    d_ren = -ren

    # overdispersion priors
    d_sp = np.zeros(n)
    d_spr = np.zeros(r)
    d_spn = 0.0
    for i in range(n):
        sp = math.exp(u[o_sp + i])
        rd = (sp - pb * isn[i]) / scale2
        logp += -0.5 * scale2 * rd * rd
        d_sp[i] -= rd
        d_pb += rd * isn[i]
    for j in range(r):
        spr = math.exp(u[o_spr + j])
        rr = (spr - pb * isn_r[j]) / scale2
        logp += -0.5 * scale2 * rr * rr
        d_spr[j] -= rr
        d_pb += rr * isn_r[j]
    rn = (spn - pb * isn_nat) / scale2
    logp += -0.5 * scale2 * rn * rn
    d_spn -= rn
    d_pb += rn * isn_nat

    # domain level: Poisson over observed cells plus gamma for cv2
    fy = np.empty(n)
    d_fy = np.zeros(n)
    for i in range(n):
        fy[i] = emp[i] * math.exp(u[o_lam + i])
    ss2 = ss * ss
    d_re_like = np.zeros(n)
    for t in range(len(obs)):
        i = obs[t]
        sp = math.exp(u[o_sp + i])
        phi = sp * sp
        log_eps = u[o_re + i] * sp - 0.5 * phi
        my = fy[i] * math.exp(log_eps)
        logp += y_obs[t] * math.log(my) - my
        gmy = y_obs[t] - my
        exp_phi = math.exp(phi)
        c = 1.0 / fy[i] + exp_phi - 1.0
        a = ss2 * half_n_obs[t]
        logp += a * (math.log(a) - math.log(c)) - math.lgamma(a) \
            + (a - 1.0) * lcv2_obs[t] - a * cv2_obs[t] / c
        d_a = math.log(a / c) + 1.0 - _digamma(a) + lcv2_obs[t] - cv2_obs[t] / c
        d_c = a * (cv2_obs[t] - c) / (c * c)
        d_ss += d_a * half_n_obs[t] * 2.0 * ss
        d_fy[i] += gmy / fy[i] - d_c / (fy[i] * fy[i])
        d_re_like[i] = gmy * sp
        d_sp[i] += gmy * (u[o_re + i] - sp) + d_c * exp_phi * 2.0 * sp
    logp += pois_const

    # regional level
    fy_r = np.zeros(r)
    for i in range(n):
        fy_r[reg_of_dom[i]] += fy[i]
    ssr2 = ssr * ssr
    d_fy_r = np.zeros(r)
    for j in range(r):
        spr = math.exp(u[o_spr + j])
        phir = spr * spr
        log_eps_r = u[o_rer + j] * spr - 0.5 * phir
        my_r = fy_r[j] * math.exp(log_eps_r)
        logp += y_r[j] * math.log(my_r) - my_r
        gmyr = y_r[j] - my_r
        exp_phir = math.exp(phir)
        c = 1.0 / fy_r[j] + exp_phir - 1.0
        a = ssr2 * half_n_r[j]
        logp += a * (math.log(a * vb) - math.log(c)) - math.lgamma(a) \
            + (a - 1.0) * lcv2_r[j] - a * vb * cv2_r[j] / c
        d_a = math.log(a * vb / c) + 1.0 - _digamma(a) + lcv2_r[j] \
            - vb * cv2_r[j] / c
        d_c = a * (vb * cv2_r[j] - c) / (c * c)
        d_ssr += d_a * half_n_r[j] * 2.0 * ssr
        if use_vb:
            d_vb += a / vb - a * cv2_r[j] / c
        d_fy_r[j] += gmyr / fy_r[j] - d_c / (fy_r[j] * fy_r[j])
        g[o_rer + j] += gmyr * spr
        d_spr[j] += gmyr * (u[o_rer + j] - spr) + d_c * exp_phir * 2.0 * spr

    # national level
    fy_n = 0.0
    for j in range(r):
        fy_n += fy_r[j]
    phin = spn * spn
    my_n = fy_n * math.exp(ren * spn - 0.5 * phin)
    logp += y_nat * math.log(my_n) - my_n
    gmyn = y_nat - my_n
    exp_phin = math.exp(phin)
    c_n = 1.0 / fy_n + exp_phin - 1.0
    a_n = ssn * ssn * half_n_nat
    logp += a_n * (math.log(a_n * vb) - math.log(c_n)) - math.lgamma(a_n) \
        + (a_n - 1.0) * lcv2_nat - a_n * vb * cv2_nat / c_n
    d_an = math.log(a_n * vb / c_n) + 1.0 - _digamma(a_n) + lcv2_nat \
        - vb * cv2_nat / c_n
    d_cn = a_n * (vb * cv2_nat - c_n) / (c_n * c_n)
    d_ssn += d_an * half_n_nat * 2.0 * ssn
    if use_vb:
        d_vb += a_n / vb - a_n * cv2_nat / c_n
    d_fy_nat = gmyn / fy_n - d_cn / (fy_n * fy_n)
    d_ren += gmyn * spn
    d_spn += gmyn * (ren - spn) + d_cn * exp_phin * 2.0 * spn

    # pull back to domain rates and map to the unconstrained scale
    for j in range(r):
        d_fy_r[j] += d_fy_nat
    for i in range(n):
        d_fy[i] += d_fy_r[reg_of_dom[i]]
        g[o_lam + i] += d_fy[i] * fy[i]
        g[o_re + i] += d_re_like[i]
        sp = math.exp(u[o_sp + i])
        g[o_sp + i] = d_sp[i] * sp + 1.0
    for j in range(r):
        spr = math.exp(u[o_spr + j])
        g[o_spr + j] = d_spr[j] * spr + 1.0

    g[0] = d_ss * ss + 1.0
    g[1] = d_ssr * ssr + 1.0
    g[2] = d_ssn * ssn + 1.0
    if use_vb:
        g[o_vb] = d_vb * (vb - 1.0) + 1.0
    g[o_sl] = d_siglam * siglam + 1.0
    g[o_spn] = d_spn * spn + 1.0
    g[o_pb] = d_pb * pb + 1.0
    g[o_ren] = d_ren
    return logp


@njit(cache=True, fastmath=False, error_model="numpy")
def _fv_cell(y, v, theta, raw, floor):
    """Matched-overdispersion Poisson cell: (lp, d_theta, d_raw)."""
    z = v / (theta * theta) - 1.0 / theta
    zf = z if z > floor - 1.0 else floor - 1.0
    lz = math.log1p(zf)
    if lz > 0.0:
        phi2 = lz
        phi = math.sqrt(phi2)
        unclamped = True
    else:
        phi2 = 0.0
        phi = 1e-150
        unclamped = False
    log_eps = raw * phi - 0.5 * phi2
    my = theta * math.exp(log_eps)
    lp = y * math.log(my) - my - math.lgamma(y + 1.0)
    gmy = y - my
    d_theta = gmy / theta
    d_raw = gmy * phi
    if unclamped:
        d_phi2 = gmy * (raw / (2.0 * phi) - 0.5)
        d_z = d_phi2 / (1.0 + zf)
        d_theta += d_z * (1.0 / (theta * theta) - 2.0 * v / (theta ** 3))
    return lp, d_theta, d_raw


@njit(cache=True, fastmath=False, error_model="numpy")
def csfv_kernel(u, g, n, r, p, floor,
                logx, emp, reg_of_dom, obs,
                y_obs, v_obs, y_r, v_r, y_nat, v_nat):
    """Log posterior and gradient of the fixed-variance model."""
    o_sl = 0
    o_lam = 1
    o_re = o_lam + n
    o_beta = o_re + n
    o_sb = o_beta + p
    o_rer = o_sb + p
    o_ren = o_rer + r

    siglam = math.exp(u[o_sl])
    logp = u[o_sl]
    for k in range(p):
        logp += u[o_sb + k]
    logp += -2.0 * math.log1p(siglam * siglam / 3.0)
    d_siglam = -4.0 * siglam / (3.0 + siglam * siglam)

    for k in range(p):
        sb = math.exp(u[o_sb + k])
        bk = u[o_beta + k]
        logp += -2.0 * math.log1p(sb * sb / 3.0) - math.log(sb) \
            - 0.5 * (bk / sb) ** 2
        g[o_sb + k] = (-4.0 * sb / (3.0 + sb * sb)
                       - 1.0 / sb + bk * bk / sb ** 3) * sb + 1.0
        g[o_beta + k] = -bk / (sb * sb)

    sig2 = siglam * siglam
    ssq = 0.0
    for i in range(n):
        xb = 0.0
        for k in range(p):
            xb += logx[i, k] * u[o_beta + k]
        diff = u[o_lam + i] - xb
        ssq += diff * diff
        resid = diff / sig2
        g[o_lam + i] = -resid
        for k in range(p):
            g[o_beta + k] += logx[i, k] * resid
    logp += -n * math.log(siglam) - 0.5 * ssq / sig2
    d_siglam += -n / siglam + ssq / (siglam * sig2)
    g[o_sl] = d_siglam * siglam + 1.0

    for i in range(n):
        re = u[o_re + i]
        logp += -0.5 * re * re
        g[o_re + i] = -re
    for j in range(r):
        rr = u[o_rer + j]
        logp += -0.5 * rr * rr
        g[o_rer + j] = -rr
    ren = u[o_ren]
    logp += -0.5 * ren * ren
    g[o_ren] = -ren

    fy = np.empty(n)
    d_fy = np.zeros(n)
    for i in range(n):
        fy[i] = emp[i] * math.exp(u[o_lam + i])

    for t in range(len(obs)):
        i = obs[t]
        lp, d_theta, d_raw = _fv_cell(y_obs[t], v_obs[t], fy[i], u[o_re + i], floor)
        logp += lp
        d_fy[i] += d_theta
        g[o_re + i] += d_raw

    fy_r = np.zeros(r)
    for i in range(n):
        fy_r[reg_of_dom[i]] += fy[i]
    fy_n = 0.0
    d_fy_r = np.zeros(r)
    for j in range(r):
        fy_n += fy_r[j]
    lp, d_theta_n, d_raw_n = _fv_cell(y_nat, v_nat, fy_n, ren, floor)
    logp += lp
    g[o_ren] += d_raw_n
    for j in range(r):
        lp, d_theta_r, d_raw_r = _fv_cell(y_r[j], v_r[j], fy_r[j], u[o_rer + j], floor)
        logp += lp
        d_fy_r[j] += d_theta_r + d_theta_n
        g[o_rer + j] += d_raw_r

    for i in range(n):
        d_fy[i] += d_fy_r[reg_of_dom[i]]
        g[o_lam + i] += d_fy[i] * fy[i]
    return logp
