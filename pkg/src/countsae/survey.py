"""Stratified with-replacement sampling and direct ratio estimation.

Strata are intersections of regions and employment size classes; selection
probabilities attach to size classes and are shared across regions.  The
direct estimator for a domain total is the ratio estimator anchored on the
known domain employment, with a stratified linearization variance.  The
same machinery, applied to a region (or the nation) as a single super
domain, yields the regional and national direct estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model.input import ModelInput

# Size-class selection probabilities of the reference design; the implied
# weights are 1/pi = (4000, 1333, 800, 400, 133, 80) up to rounding.
_DEFAULT_PI = (0.00025, 0.00075, 0.00125, 0.0025, 0.0075, 0.0125)

CV2_FLOOR = 1e-8


@dataclass(frozen=True)
class SampleDesign:
    """Stratified SRS-with-replacement design keyed by size class."""

    selection_probs: np.ndarray   # (S,) pi_s

    def __post_init__(self):
        object.__setattr__(self, "selection_probs",
                           np.asarray(self.selection_probs, dtype=float))
        if np.any(self.selection_probs <= 0) or np.any(self.selection_probs >= 1):
            raise ValueError("selection probabilities must lie in (0, 1)")

    @property
    def weights(self):
        return 1.0 / self.selection_probs

    @property
    def n_classes(self):
        return len(self.selection_probs)


def default_design():
    return SampleDesign(selection_probs=np.array(_DEFAULT_PI))


@dataclass
class SurveySample:
    """Drawn units (with replacement, so duplicates count separately)."""

    unit_idx: np.ndarray     # (n,) index into the population arrays
    domain: np.ndarray       # (n,)
    region: np.ndarray       # (n,)
    size_class: np.ndarray   # (n,)
    emp: np.ndarray          # (n,)
    suby: np.ndarray         # (n,)
    weight: np.ndarray       # (n,) N_h / n_h of the unit's stratum
    n_d: np.ndarray          # (D,) sampled units per domain
    n_ds: np.ndarray         # (D, S) sampled units per domain x class cell
    class_counts: np.ndarray  # (D, S) population units per cell
    region_of_domain: np.ndarray  # (D,)
    warnings: list = field(default_factory=list)

    @property
    def n_draws(self):
        return len(self.unit_idx)


@dataclass
class DirectEstimates:
    """Design-based point and variance estimates at all three resolutions."""

    yhat: np.ndarray        # (D,) ratio-estimated totals (NaN where unobserved)
    vhat: np.ndarray        # (D,) linearization variances
    cv2: np.ndarray         # (D,) vhat / yhat^2, floored at CV2_FLOOR
    n_resp: np.ndarray      # (D,)
    observed: np.ndarray    # (D,) bool
    yhat_r: np.ndarray      # (R,)
    vhat_r: np.ndarray
    cv2_r: np.ndarray
    n_r: np.ndarray
    yhat_nat: float
    vhat_nat: float
    cv2_nat: float
    n_nat: int
    region_of_domain: np.ndarray


def stratum_sizes(population, design):
    """Draw counts and weights per (region, class) stratum, deterministic.

    ``n_h = max(1, round(pi_s * N_h))`` with half-up rounding; the weight of
    every draw from stratum h is ``N_h / n_h``.
    """
    cfg = population.config
    n_h = np.zeros((cfg.n_regions, cfg.n_classes), dtype=np.int64)
    big_n = np.zeros_like(n_h)
    for r in range(cfg.n_regions):
        in_r = cfg.region_of_domain == r
        big_n[r] = population.class_counts[in_r].sum(axis=0)
    pi = design.selection_probs
    pos = big_n > 0
    n_h[pos] = np.maximum(1, np.floor(pi[None, :] * big_n + 0.5).astype(np.int64))[pos]
    return big_n, n_h


def draw_sample(population, design, seed):
    """Stratified SRS with replacement; bit-identical under a fixed seed."""
    cfg = population.config
    if design.n_classes != cfg.n_classes:
        raise ValueError("design size classes do not match the population")
    rng = np.random.default_rng(seed)
    big_n, n_h = stratum_sizes(population, design)

    picks = []
    weights = []
    warnings = []
    for r in range(cfg.n_regions):
        for s in range(cfg.n_classes):
            if big_n[r, s] == 0:
                warnings.append(f"empty stratum region={r + 1} class={s + 1}: skipped")
                continue
            members = np.flatnonzero((population.region == r) & (population.size_class == s))
            take = members[rng.integers(0, len(members), n_h[r, s])]
            picks.append(take)
            weights.append(np.full(len(take), big_n[r, s] / n_h[r, s]))
    unit_idx = np.concatenate(picks)
    weight = np.concatenate(weights)

    dom = population.domain[unit_idx]
    cls = population.size_class[unit_idx]
    n_dom, n_cls = cfg.n_domains, cfg.n_classes
    n_d = np.bincount(dom, minlength=n_dom)
    n_ds = np.bincount(dom * n_cls + cls, minlength=n_dom * n_cls).reshape(n_dom, n_cls)
    return SurveySample(
        unit_idx=unit_idx, domain=dom, region=population.region[unit_idx],
        size_class=cls, emp=population.emp[unit_idx], suby=population.suby[unit_idx],
        weight=weight, n_d=n_d, n_ds=n_ds,
        class_counts=population.class_counts.copy(),
        region_of_domain=cfg.region_of_domain.copy(), warnings=warnings)


def _cell_variance(key, n_cells, u, pop_counts):
    """Linearization variance contributions summed over stratum cells.

    ``sum_h N_h^2 / n_h * sum_j (u - ubar)^2 / (n_h - 1)`` over cells keyed
    by ``key``; cells with fewer than two draws contribute zero.
    """
    n = np.bincount(key, minlength=n_cells).astype(float)
    su = np.bincount(key, weights=u, minlength=n_cells)
    su2 = np.bincount(key, weights=u * u, minlength=n_cells)
    out = np.zeros(n_cells)
    ok = n >= 2
    ss = np.maximum(su2[ok] - su[ok] ** 2 / n[ok], 0.0)
    out[ok] = pop_counts.ravel()[ok] ** 2 / n[ok] * ss / (n[ok] - 1.0)
    return out


def _floored_cv2(vhat, yhat):
    with np.errstate(divide="ignore", invalid="ignore"):
        cv2 = np.where(yhat > 0, vhat / np.maximum(yhat, 1e-300) ** 2, 0.0)
    return np.maximum(cv2, CV2_FLOOR)


def direct_estimates(sample, truth, national_variance="analogous"):
    """Ratio estimates with linearization variances from one sample.

    ``truth`` supplies the known employment benchmarks at every level.
    ``national_variance`` selects the national variance path: the default
    applies the same ratio/linearization machinery nationally;
    ``"sum_regional"`` sums the regional variances instead.
    """
    if sample.n_draws == 0:
        raise ValueError("cannot estimate from an empty sample")
    n_dom, n_cls = sample.n_ds.shape
    n_reg = int(sample.region_of_domain.max()) + 1
    w, y, emp = sample.weight, sample.suby.astype(float), sample.emp.astype(float)
    dom, cls, reg = sample.domain, sample.size_class, sample.region

    # domains -------------------------------------------------------------
    sum_wy = np.bincount(dom, weights=w * y, minlength=n_dom)
    sum_wemp = np.bincount(dom, weights=w * emp, minlength=n_dom)
    observed = (sample.n_d > 0) & (sum_wemp > 0)
    rhat = np.zeros(n_dom)
    rhat[observed] = sum_wy[observed] / sum_wemp[observed]
    yhat = truth.y_emp * rhat

    u = y - rhat[dom] * emp
    cells = _cell_variance(dom * n_cls + cls, n_dom * n_cls, u, sample.class_counts)
    vhat = cells.reshape(n_dom, n_cls).sum(axis=1)
    cv2 = _floored_cv2(vhat, yhat)

    yhat = np.where(observed, yhat, np.nan)
    vhat = np.where(observed, vhat, np.nan)
    cv2 = np.where(observed, cv2, np.nan)

    # regions (region as a super domain; its strata are its S class cells) --
    sum_wy_r = np.bincount(reg, weights=w * y, minlength=n_reg)
    sum_wemp_r = np.bincount(reg, weights=w * emp, minlength=n_reg)
    rhat_r = sum_wy_r / sum_wemp_r
    yhat_r = truth.y_emp_region * rhat_r
    u_r = y - rhat_r[reg] * emp
    reg_counts = np.zeros((n_reg, n_cls))
    for r in range(n_reg):
        reg_counts[r] = sample.class_counts[sample.region_of_domain == r].sum(axis=0)
    cells_r = _cell_variance(reg * n_cls + cls, n_reg * n_cls, u_r, reg_counts)
    vhat_r = cells_r.reshape(n_reg, n_cls).sum(axis=1)
    cv2_r = _floored_cv2(vhat_r, yhat_r)
    n_r = np.bincount(reg, minlength=n_reg)

    # national --------------------------------------------------------------
    rhat_n = (w * y).sum() / (w * emp).sum()
    yhat_n = truth.y_emp_national * rhat_n
    u_n = y - rhat_n * emp
    cells_n = _cell_variance(reg * n_cls + cls, n_reg * n_cls, u_n, reg_counts)
    if national_variance == "sum_regional":
        vhat_n = float(vhat_r.sum())
    elif national_variance == "analogous":
        vhat_n = float(cells_n.sum())
    else:
        raise ValueError(f"unknown national_variance mode {national_variance!r}")
    cv2_n = float(_floored_cv2(np.array([vhat_n]), np.array([yhat_n]))[0])

    return DirectEstimates(
        yhat=yhat, vhat=vhat, cv2=cv2, n_resp=sample.n_d.astype(float),
        observed=observed,
        yhat_r=yhat_r, vhat_r=vhat_r, cv2_r=cv2_r, n_r=n_r.astype(float),
        yhat_nat=float(yhat_n), vhat_nat=vhat_n, cv2_nat=cv2_n,
        n_nat=int(sample.n_draws),
        region_of_domain=sample.region_of_domain.copy())


def _incidence(region_of_domain, n_reg):
    out = np.zeros((len(region_of_domain), n_reg))
    out[np.arange(len(region_of_domain)), region_of_domain] = 1.0
    return out


def to_model_input(direct, predictors, offsets, region_of_domain, months=None):
    """Pack direct estimates into the model data block.

    ``predictors`` is (D,) or (D, P) and strictly positive; ``offsets`` is
    the known employment benchmark per domain.  Point estimates are rounded
    to integers to satisfy the count-data contract; squared CVs pass
    through unchanged.  ``months`` stacks a list of per-month
    :class:`DirectEstimates` (sharing predictors and offsets) into the
    time-series form.
    """
    region_of_domain = np.asarray(region_of_domain)
    n_reg = int(region_of_domain.max()) + 1
    x = np.asarray(predictors, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    offsets = np.asarray(offsets, dtype=float)
    if np.any(offsets <= 0):
        raise ValueError("offsets must be strictly positive")
    if np.any(x <= 0):
        raise ValueError("predictors must be strictly positive")

    parts = list(months) if months is not None else [direct]
    t = len(parts)
    y, cv2, n_resp, ind_obs, y_r, cv2_r, cv2_nat = [], [], [], [], [], [], []
    for de in parts:
        obs = np.flatnonzero(de.observed)
        y.append(np.where(de.observed, np.rint(np.nan_to_num(de.yhat)), 0.0))
        cv2.append(np.where(de.observed, np.nan_to_num(de.cv2), 0.0))
        n_resp.append(np.where(de.observed, de.n_resp, 0.0))
        ind_obs.append(obs)
        y_r.append(np.rint(de.yhat_r))
        cv2_r.append(de.cv2_r)
        cv2_nat.append(de.cv2_nat)

    data = ModelInput(
        y=np.concatenate(y).astype(np.int64),
        cv2_y=np.concatenate(cv2),
        n_resp=np.concatenate(n_resp),
        x=np.tile(x, (t, 1)),
        emp=np.tile(offsets, t),
        region=_incidence(region_of_domain, n_reg),
        ind_obs=tuple(ind_obs),
        y_r=np.concatenate(y_r).astype(np.int64),
        cv2_y_r=np.concatenate(cv2_r),
        cv2_y_nat=np.array(cv2_nat),
        n_months=t)
    return data.validate()
