"""Monte Carlo evaluation of direct vs model estimators.

Each replicate regenerates the finite population, draws a sample, computes
direct estimates and fits the enabled models; estimates are judged against
that replicate's population truth.  Replicates are independent given their
derived seeds, so the study parallelizes over a worker pool and is
deterministic under the master seed regardless of execution order.

Every (replicate, domain, method) cell is either a value or NaN: direct
cells are empty where the domain went unsampled, model cells are empty
only for fits that failed the convergence gates (which are excluded from
aggregation and counted in the manifest).
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import hmc, popgen, survey
from .model import ModelConfig, build_model

MODEL_ESTIMATORS = ("cs-fv", "cs", "mv")


@dataclass(frozen=True)
class StudyConfig:
    n_replicates: int = 200
    scale: float = 1.0
    estimators: tuple = ("direct", "cs-fv", "cs")
    master_seed: int = 20240501
    pop_config: popgen.PopulationConfig = None       # default: reference config at `scale`
    design: survey.SampleDesign = None
    sampler: hmc.SamplerConfig = field(
        default_factory=lambda: hmc.SamplerConfig(iters=5000, warmup=2500, chains=4))
    model_config: ModelConfig = field(default_factory=ModelConfig)
    rhat_gate: float = 1.05          # on fitted-total coordinates
    divergence_gate: float = 0.01    # max tolerated divergent fraction
    mv_months: int = 3               # months for the time-series smoke path
    workers: int = 1
    national_variance: str = "analogous"

    def resolved(self):
        pop = self.pop_config or popgen.default_config(scale=self.scale)
        design = self.design or survey.default_design()
        if self.n_replicates < 1:
            raise ValueError("need at least one replicate")
        if not self.estimators:
            raise ValueError("enable at least one estimator")
        for e in self.estimators:
            if e != "direct" and e not in MODEL_ESTIMATORS:
                raise ValueError(f"unknown estimator {e!r}")
        return dataclasses.replace(self, pop_config=pop, design=design)


def replicate_seeds(master_seed, alpha):
    """Derived seed streams for replicate ``alpha`` (1-based)."""
    seeds = {"population": (master_seed, alpha, 0), "sample": (master_seed, alpha, 1)}
    for i, name in enumerate(MODEL_ESTIMATORS):
        seeds[f"fit_{name}"] = (master_seed, alpha, 2 + i)
    return seeds


def _fit_model(name, data, cfg, seed):
    """One model fit: chains, gates, posterior means of derived quantities."""
    model = build_model(name, data, cfg.model_config)
    sampler = dataclasses.replace(cfg.sampler, seed=seed)
    if sampler.init_inv_metric is None:
        sampler = dataclasses.replace(sampler, init_inv_metric=model.initial_inv_metric())
    if sampler.init_center is None:
        sampler = dataclasses.replace(sampler, init_center=model.initial_point())
    chains = hmc.sample(model.logp_and_grad, model.dim, sampler)

    per_chain = [model.derived_draws(chains.draws[c]) for c in range(chains.n_chains)]
    theta_c = np.stack([d.theta for d in per_chain])          # (C, n, N*T)
    rhat = hmc.split_rhat(theta_c)
    div_frac = chains.n_divergent / max(chains.divergent.size, 1)
    failed = bool(np.nanmax(rhat) > cfg.rhat_gate or div_frac > cfg.divergence_gate)

    der = model.derived_draws(chains.stacked())
    with np.errstate(invalid="ignore"):
        rec = {
            "point": der.theta.mean(axis=0),
            "vrnc": _nanmean(der.vrnc),
            "point_r": der.theta_r.mean(axis=0),
            "vrnc_r": _nanmean(der.vrnc_r),
            "point_nat": der.theta_nat.mean(axis=0),
            "vrnc_nat": _nanmean(der.vrnc_nat),
        }
    rec.update({
        "failed": failed,
        "max_rhat": float(np.nanmax(rhat)),
        "divergence_frac": float(div_frac),
        "clamped_frac": float(der.clamped_frac),
    })
    return rec


def _nanmean(a):
    out = np.full(a.shape[1:], np.nan)
    ok = ~np.all(np.isnan(a), axis=0)
    if np.any(ok):
        out[ok] = np.nanmean(a[:, ok], axis=0)
    return out


def run_replicate(alpha, cfg):
    """One full replicate; pure function of (alpha, master seed, config)."""
    cfg = cfg.resolved()
    seeds = replicate_seeds(cfg.master_seed, alpha)
    pop = popgen.generate_population(
        popgen.with_seed(cfg.pop_config, seeds["population"]))
    sample = survey.draw_sample(pop, cfg.design, seeds["sample"])
    direct = survey.direct_estimates(sample, pop.truth,
                                     national_variance=cfg.national_variance)
    rec = {
        "alpha": alpha,
        "seeds": seeds,
        "truth_y": pop.truth.y.copy(),
        "truth_y_r": pop.truth.y_region.copy(),
        "truth_y_nat": pop.truth.y_national,
        "domain_type": pop.truth.domain_type.copy(),
        "observed": direct.observed.copy(),
        "n_d": sample.n_d.copy(),
        "models": {},
    }
    if "direct" in cfg.estimators:
        rec["direct"] = {
            "point": direct.yhat.copy(), "vrnc": direct.vhat.copy(),
            "point_r": direct.yhat_r.copy(), "vrnc_r": direct.vhat_r.copy(),
            "point_nat": direct.yhat_nat, "vrnc_nat": direct.vhat_nat,
        }
    wanted = [e for e in cfg.estimators if e in MODEL_ESTIMATORS]
    if wanted:
        months = None
        if "mv" in wanted and cfg.mv_months > 1:
            part_seeds = [(cfg.master_seed, alpha, 100 + t) for t in range(cfg.mv_months - 1)]
            extra = [survey.direct_estimates(
                survey.draw_sample(pop, cfg.design, s), pop.truth,
                national_variance=cfg.national_variance) for s in part_seeds]
            months = [direct] + extra
        data_cs = survey.to_model_input(
            direct, pop.x_d, pop.truth.y_emp.astype(float), cfg.pop_config.region_of_domain)
        for name in wanted:
            if name == "mv":
                data = survey.to_model_input(
                    direct, pop.x_d, pop.truth.y_emp.astype(float),
                    cfg.pop_config.region_of_domain, months=months)
            else:
                data = data_cs
            try:
                rec["models"][name] = _fit_model(name, data, cfg, seeds[f"fit_{name}"])
            except Exception as exc:  # a broken fit must not sink the study
                rec["models"][name] = {"failed": True, "error": repr(exc)}
    return rec


@dataclass
class StudyResult:
    """Stacked per-replicate records (NaN marks a typed absence)."""

    config: StudyConfig
    alphas: np.ndarray          # (A,)
    domain_type: np.ndarray     # (D,)
    truth: np.ndarray           # (A, D)
    truth_r: np.ndarray         # (A, R)
    truth_nat: np.ndarray       # (A,)
    observed: np.ndarray        # (A, D) bool
    n_d: np.ndarray             # (A, D)
    point: dict                 # method -> (A, D)
    vrnc: dict                  # method -> (A, D)
    point_r: dict               # method -> (A, R)
    vrnc_r: dict
    point_nat: dict             # method -> (A,)
    vrnc_nat: dict
    failed: dict                # model -> (A,) bool
    fit_stats: dict             # model -> list of per-replicate dicts
    seeds: list

    @property
    def methods(self):
        return list(self.point)

    def ok_mask(self, method):
        """Replicates where the method produced estimates."""
        if method in self.failed:
            return ~self.failed[method]
        return np.ones(len(self.alphas), dtype=bool)


def collect_study(records, cfg):
    records = sorted(records, key=lambda r: r["alpha"])
    a = len(records)
    d = len(records[0]["truth_y"])
    r = len(records[0]["truth_y_r"])
    methods = [e for e in cfg.estimators]
    out = StudyResult(
        config=cfg,
        alphas=np.array([rec["alpha"] for rec in records]),
        domain_type=records[0]["domain_type"],
        truth=np.stack([rec["truth_y"] for rec in records]).astype(float),
        truth_r=np.stack([rec["truth_y_r"] for rec in records]).astype(float),
        truth_nat=np.array([rec["truth_y_nat"] for rec in records], dtype=float),
        observed=np.stack([rec["observed"] for rec in records]),
        n_d=np.stack([rec["n_d"] for rec in records]).astype(float),
        point={}, vrnc={}, point_r={}, vrnc_r={}, point_nat={}, vrnc_nat={},
        failed={}, fit_stats={}, seeds=[rec["seeds"] for rec in records])
    for m in methods:
        pt = np.full((a, d), np.nan)
        vr = np.full((a, d), np.nan)
        pt_r = np.full((a, r), np.nan)
        vr_r = np.full((a, r), np.nan)
        pt_n = np.full(a, np.nan)
        vr_n = np.full(a, np.nan)
        if m != "direct":
            out.failed[m] = np.zeros(a, dtype=bool)
            out.fit_stats[m] = []
        for i, rec in enumerate(records):
            src = rec.get("direct") if m == "direct" else rec["models"].get(m)
            if m != "direct":
                stats = {k: v for k, v in (src or {}).items()
                         if k in ("failed", "max_rhat", "divergence_frac",
                                  "clamped_frac", "error")}
                out.fit_stats[m].append(stats)
                if src is None or src.get("failed", True):
                    out.failed[m][i] = True
                    continue
            if src is None:
                continue
            # the time-series fit reports month-stacked arrays; score month 1,
            # which is the month whose sample matches the recorded truth
            pt[i] = np.asarray(src["point"]).reshape(-1)[:d]
            vr[i] = np.asarray(src["vrnc"]).reshape(-1)[:d]
            pt_r[i] = np.asarray(src["point_r"]).reshape(-1)[:r]
            vr_r[i] = np.asarray(src["vrnc_r"]).reshape(-1)[:r]
            pt_n[i] = np.asarray(src["point_nat"]).reshape(-1)[0]
            vr_n[i] = np.asarray(src["vrnc_nat"]).reshape(-1)[0]
        out.point[m], out.vrnc[m] = pt, vr
        out.point_r[m], out.vrnc_r[m] = pt_r, vr_r
        out.point_nat[m], out.vrnc_nat[m] = pt_n, vr_n
    return out


def _replicate_task(args):
    alpha, cfg = args
    return run_replicate(alpha, cfg)


def run_study(cfg, progress=None):
    """All replicates, optionally across a process pool; order-independent."""
    cfg = cfg.resolved()
    alphas = list(range(1, cfg.n_replicates + 1))
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            records = []
            for rec in pool.map(_replicate_task, [(a, cfg) for a in alphas]):
                records.append(rec)
                if progress:
                    progress(rec)
    else:
        records = []
        for a in alphas:
            rec = run_replicate(a, cfg)
            records.append(rec)
            if progress:
                progress(rec)
    return collect_study(records, cfg)


# ---------------------------------------------------------------------------
# aggregation


def _pooled(err_cells):
    """Pooled bias and RMSE over defined cells."""
    vals = err_cells[~np.isnan(err_cells)]
    if len(vals) == 0:
        return np.nan, np.nan, 0
    return vals.mean(), float(np.sqrt(np.mean(vals ** 2))), len(vals)


def _errors(study, method, level):
    if level == "domain":
        return study.point[method] - study.truth
    if level == "region":
        return study.point_r[method] - study.truth_r
    return (study.point_nat[method] - study.truth_nat)[:, None]


def bias_rmse_table(study, grouping="domain-type"):
    """Pooled bias/RMSE per group with model-to-direct RMSE ratios.

    Cells pool (estimate - truth) over all replicate-domain pairs where the
    estimator is defined: observed cells for the direct estimator, every
    non-failed replicate for the models (imputed domains included).
    """
    methods = study.methods
    model_methods = [m for m in methods if m != "direct"]

    if grouping == "domain-type":
        level = "domain"
        group_defs = [(str(t), np.flatnonzero(study.domain_type == t))
                      for t in np.unique(study.domain_type)]
        all_cols = np.arange(study.truth.shape[1])
    elif grouping == "region":
        level = "region"
        n_r = study.truth_r.shape[1]
        group_defs = [(str(r + 1), np.array([r])) for r in range(n_r)]
        all_cols = np.arange(n_r)
    elif grouping == "national":
        level = "national"
        group_defs = []
        all_cols = np.array([0])
    else:
        raise ValueError(f"unknown grouping {grouping!r}")

    rows = []
    for label, cols in group_defs + [("Overall" if group_defs else "national",
                                      all_cols)]:
        row = {"group": label}
        if level == "domain":
            obs = study.observed[:, cols]
            row["units_per_sample"] = \
                float(study.n_d[:, cols][obs].mean()) if obs.any() else np.nan
            row["ave_no_samples"] = float(obs.sum(axis=0).mean())
        for m in methods:
            err = _errors(study, m, level)[:, cols]
            if m == "direct" and level == "domain":
                err = np.where(study.observed[:, cols], err, np.nan)
            bias, rmse, n = _pooled(err.ravel())
            row[f"bias_{m}"] = bias
            row[f"rmse_{m}"] = rmse
            row[f"n_cells_{m}"] = n
        for m in model_methods:
            rd = row.get("rmse_direct")
            row[f"ratio_{m}"] = row[f"rmse_{m}"] / rd if rd else np.nan
        rows.append(row)
    table = pd.DataFrame(rows)

    # pooled-convention consistency: the overall bias must equal the
    # cell-weighted mean of the group biases
    if group_defs:
        for m in methods:
            g = table.iloc[:-1]
            w = g[f"n_cells_{m}"].to_numpy(dtype=float)
            b = g[f"bias_{m}"].to_numpy(dtype=float)
            ok = w > 0
            if ok.any():
                pooled_bias = float((w[ok] * b[ok]).sum() / w[ok].sum())
                assert np.isclose(pooled_bias, table.iloc[-1][f"bias_{m}"],
                                  rtol=1e-9, atol=1e-6), "group pooling inconsistent"
    return table


def mc_true_variance(study):
    """Per-domain sampling variance of the direct estimator across replicates.

    Uses only replicates where the domain was observed; domains with fewer
    than two observations return NaN and are listed in the notes.
    """
    if "direct" not in study.point:
        raise ValueError("the study has no direct estimates")
    a, d = study.truth.shape
    out = np.full(d, np.nan)
    notes = []
    pts = study.point["direct"]
    for j in range(d):
        vals = pts[study.observed[:, j], j]
        vals = vals[~np.isnan(vals)]
        if len(vals) >= 2:
            out[j] = vals.var(ddof=1)
        else:
            notes.append(f"domain {j + 1}: {len(vals)} observation(s), "
                         "true-variance approximation unavailable")
    return out, notes


def relative_error_series(study):
    """Per-domain relative bias and relative RMSE, sorted by sampled units."""
    a, d = study.truth.shape
    rows = []
    for j in range(d):
        obs = study.observed[:, j]
        row = {
            "domain": j + 1,
            "domain_type": int(study.domain_type[j]),
            "avg_sampled_units": float(study.n_d[obs, j].mean()) if obs.any() else 0.0,
        }
        any_defined = False
        for m in study.methods:
            rel = (study.point[m][:, j] - study.truth[:, j]) / study.truth[:, j]
            if m == "direct":
                rel = np.where(obs, rel, np.nan)
            rel = rel[~np.isnan(rel)]
            if len(rel):
                any_defined = True
                row[f"relB_{m}"] = float(rel.mean())
                row[f"relRMSE_{m}"] = float(np.sqrt(np.mean(rel ** 2)))
            else:
                row[f"relB_{m}"] = np.nan
                row[f"relRMSE_{m}"] = np.nan
        row["excluded"] = not any_defined
        rows.append(row)
    frame = pd.DataFrame([r for r in rows if not r["excluded"]])
    return frame.sort_values("avg_sampled_units", kind="stable").reset_index(drop=True)


def log_deviation_distributions(study):
    """Log relative deviations behind the violin figures.

    Point estimates: ``log(est / truth)`` per (method, domain type, cell).
    Variances: ``log(v / v_mc)`` against the Monte Carlo true-variance
    approximation, for the direct variance (observed cells with positive
    variance) and the model-fitted variance (all defined cells).
    """
    point_rows, var_rows = [], []
    v_mc, _ = mc_true_variance(study)
    a, d = study.truth.shape
    for m in study.methods:
        pts = study.point[m]
        for j in range(d):
            for i in range(a):
                est = pts[i, j]
                if m == "direct" and not study.observed[i, j]:
                    continue
                if np.isnan(est):
                    continue
                if est > 0:
                    point_rows.append({
                        "method": m, "domain_type": int(study.domain_type[j]),
                        "alpha": int(study.alphas[i]), "domain": j + 1,
                        "logdev": float(np.log(est / study.truth[i, j])),
                        "imputed": bool(m != "direct" and not study.observed[i, j]),
                    })
                v = study.vrnc[m][i, j]
                if np.isnan(v_mc[j]) or v_mc[j] <= 0 or np.isnan(v) or v <= 0:
                    continue
                var_rows.append({
                    "method": m, "domain_type": int(study.domain_type[j]),
                    "alpha": int(study.alphas[i]), "domain": j + 1,
                    "logdev": float(np.log(v / v_mc[j])),
                    "imputed": bool(m != "direct" and not study.observed[i, j]),
                })
    return pd.DataFrame(point_rows), pd.DataFrame(var_rows)
