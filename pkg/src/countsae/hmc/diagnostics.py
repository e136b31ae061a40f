"""Convergence diagnostics and posterior summaries.

Split R-hat compares within- to between-half-chain variance per
coordinate; bulk ESS rank-normalizes the pooled draws, splits the chains
and sums paired autocorrelations with the initial-monotone truncation.
Coordinates with zero variance (constant chains) report NaN and are
flagged rather than crashing.
"""

from __future__ import annotations

import numpy as np
from scipy import fft as sp_fft
from scipy import special


def _split(draws):
    """(chains, n, ...) -> (2*chains, n//2, ...); drops an odd tail draw."""
    c, n = draws.shape[0], draws.shape[1]
    half = n // 2
    return np.concatenate([draws[:, :half], draws[:, n - half:]], axis=0)


def split_rhat(draws):
    """Split potential scale reduction per coordinate, (chains, n, dim)."""
    x = _split(np.asarray(draws, dtype=float))
    m, n = x.shape[0], x.shape[1]
    if n < 2:
        raise ValueError("need at least 4 draws per chain for split R-hat")
    chain_mean = x.mean(axis=1)
    chain_var = x.var(axis=1, ddof=1)
    w = chain_var.mean(axis=0)
    b_over_n = chain_mean.var(axis=0, ddof=1)
    var_plus = (n - 1) / n * w + b_over_n
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.sqrt(var_plus / w)
    rhat = np.where(w > 0, rhat, np.nan)
    return rhat


def rank_normalize(draws):
    """Fractional ranks of pooled draws mapped through the normal quantile."""
    x = np.asarray(draws, dtype=float)
    shape = x.shape
    flat = x.reshape(-1, shape[-1]) if x.ndim == 3 else x.reshape(-1, 1)
    s = flat.shape[0]
    ranks = np.empty_like(flat)
    order = np.argsort(flat, axis=0, kind="stable")
    rr = np.arange(1, s + 1, dtype=float)
    for j in range(flat.shape[1]):
        ranks[order[:, j], j] = rr
    z = special.ndtri((ranks - 0.375) / (s + 0.25))
    return z.reshape(shape)


def _autocovariance(x):
    """Biased autocovariance per chain via FFT, (m, n) -> (m, n)."""
    m, n = x.shape
    size = sp_fft.next_fast_len(2 * n)
    xc = x - x.mean(axis=1, keepdims=True)
    f = np.fft.rfft(xc, size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), size, axis=1)[:, :n].real
    return acov / n


def _ess_one(chains):
    """ESS of one coordinate from split (m, n) chains (Geyer truncation)."""
    m, n = chains.shape
    if n < 4:
        return np.nan
    acov = _autocovariance(chains)
    chain_var = acov[:, 0] * n / (n - 1.0)
    mean_var = chain_var.mean()
    if mean_var == 0:
        return np.nan
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += chains.mean(axis=1).var(ddof=1)

    rho_hat = np.zeros(n)
    rho_hat[0] = 1.0
    rho_hat[1] = 1.0 - (mean_var - acov[:, 1].mean()) / var_plus
    # paired sums must stay positive (initial positive sequence)
    t = 1
    while t < n - 3 and (rho_hat[t - 1] + rho_hat[t]) > 0:
        even = 1.0 - (mean_var - acov[:, t + 1].mean()) / var_plus
        odd = 1.0 - (mean_var - acov[:, t + 2].mean()) / var_plus
        if even + odd >= 0:
            rho_hat[t + 1] = even
            rho_hat[t + 2] = odd
        t += 2
    max_t = t - 2 if (rho_hat[t - 1] + rho_hat[t]) <= 0 else t
    # enforce monotone decreasing paired sums
    prev = rho_hat[0] + rho_hat[1]
    for k in range(2, max_t + 1, 2):
        pair = rho_hat[k] + rho_hat[k + 1] if k + 1 <= max_t else rho_hat[k]
        if pair > prev:
            rho_hat[k] = prev / 2.0
            if k + 1 <= max_t:
                rho_hat[k + 1] = prev / 2.0
            pair = prev
        prev = pair
    tau = -1.0 + 2.0 * rho_hat[:max_t + 1].sum()
    tau = max(tau, 1.0 / np.log10(m * n + 10))
    return m * n / tau


def ess_bulk(draws):
    """Rank-normalized bulk effective sample size per coordinate."""
    x = np.asarray(draws, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    z = rank_normalize(x)
    z = _split(z)
    out = np.empty(z.shape[-1])
    for j in range(z.shape[-1]):
        col = z[:, :, j]
        if np.allclose(col, col.ravel()[0]):
            out[j] = np.nan
        else:
            out[j] = _ess_one(col)
    return out


def diagnostics(chains_or_draws, coords=None):
    """Split R-hat, bulk ESS and divergence count for sampled chains.

    Accepts a :class:`~countsae.hmc.nuts.Chains` or a raw
    (chains, draws, dim) array.  ``coords`` restricts to a coordinate
    subset.  Needs at least 2 chains and 100 draws each.
    """
    draws = getattr(chains_or_draws, "draws", chains_or_draws)
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 3:
        raise ValueError("expected (chains, draws, dim)")
    if draws.shape[0] < 2 or draws.shape[1] < 100:
        raise ValueError("diagnostics need >= 2 chains and >= 100 draws each")
    if coords is not None:
        draws = draws[:, :, coords]
    rhat = split_rhat(draws)
    ess = ess_bulk(draws)
    n_div = getattr(chains_or_draws, "n_divergent", 0)
    return {
        "split_rhat": rhat,
        "ess_bulk": ess,
        "divergences": int(n_div),
        "flagged_constant": np.flatnonzero(~np.isfinite(rhat)).tolist(),
    }


def mcse_mean(draws):
    """Monte Carlo standard error of the posterior mean per coordinate."""
    x = np.asarray(draws, dtype=float)
    sd = x.reshape(-1, x.shape[-1]).std(axis=0, ddof=1)
    ess = ess_bulk(x)
    return sd / np.sqrt(ess)


def posterior_summary(chains, extractor=None, quantiles=(2.5, 50.0, 97.5)):
    """Mean, sd and percentiles of derived scalars over all post-warmup draws.

    ``extractor`` maps one unconstrained draw to a vector of derived
    quantities (identity by default); it is applied draw-wise so means are
    taken on the derived scale, not re-derived from averaged parameters.
    """
    draws = getattr(chains, "draws", chains)
    flat = np.asarray(draws, dtype=float).reshape(-1, draws.shape[-1])
    if extractor is None:
        vals = flat
    else:
        vals = np.stack([np.asarray(extractor(u), dtype=float) for u in flat])
    qs = np.percentile(vals, quantiles, axis=0)
    return {
        "mean": vals.mean(axis=0),
        "sd": vals.std(axis=0, ddof=1),
        "quantiles": {q: qs[i] for i, q in enumerate(quantiles)},
    }
