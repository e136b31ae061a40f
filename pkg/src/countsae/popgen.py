"""Finite-population generation for the sampling simulation.

A population of business-establishment-like units is laid out over domains
(nested in regions) and employment size classes.  Each unit gets an
employment count ``emp`` drawn Poisson around its size-class mean and a
sub-employment count ``suby`` drawn from an overdispersed Poisson whose
rate couples a domain-level log-rate ``lambda_d`` (linked to a known
predictor ``x_d``) with a unit-level lognormal disturbance.  Domain,
regional and national totals of both variables are recorded as the ground
truth that estimators are judged against.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

# Reference configuration: 1M units in 50 domains over 4 regions, 6 size
# classes.  Domain sizes come in 5 groups of 10 ("domain types").
_N_P = 1_000_000
_DOMAIN_SIZES = [39_000] * 10 + [30_000] * 10 + [20_000] * 10 + [10_000] * 10 + [1_000] * 10
_REGION_OF_DOMAIN = [0] * 10 + [1] * 10 + [2] * 10 + [3] * 20
_SIZE_CLASS_MEANS = [2.0, 10.0, 20.0, 40.0, 100.0, 1000.0]
_SIZE_CLASS_COUNTS = [700_000, 110_000, 90_000, 70_000, 20_000, 10_000]


@dataclass(frozen=True)
class PopulationConfig:
    """Everything needed to draw one finite population."""

    n_units: int
    domain_sizes: np.ndarray          # (D,) units per domain
    region_of_domain: np.ndarray      # (D,) 0-based region ids
    size_class_means: np.ndarray      # (S,) Poisson means for emp
    size_class_counts: np.ndarray     # (S,) units per size class
    predictor_range: tuple = (0.02, 0.3)
    sigma_lambda2: float = 0.1
    sigma_epsilon2: float = 1.0
    beta_true: float = 0.7
    rng_seed: object = 1
    domain_type: np.ndarray = None    # (D,) 1-based size-rank group

    def __post_init__(self):
        for name in ("domain_sizes", "region_of_domain", "size_class_means",
                     "size_class_counts"):
            object.__setattr__(self, name, np.asarray(getattr(self, name)))
        if self.domain_type is None:
            object.__setattr__(self, "domain_type", _size_rank(self.domain_sizes))
        else:
            object.__setattr__(self, "domain_type", np.asarray(self.domain_type))

    @property
    def n_domains(self):
        return len(self.domain_sizes)

    @property
    def n_regions(self):
        return int(self.region_of_domain.max()) + 1

    @property
    def n_classes(self):
        return len(self.size_class_means)

    def validate(self):
        if self.domain_sizes.sum() != self.n_units:
            raise ValueError(
                f"domain sizes sum to {self.domain_sizes.sum()}, expected {self.n_units}")
        if self.size_class_counts.sum() != self.n_units:
            raise ValueError(
                f"size class counts sum to {self.size_class_counts.sum()}, "
                f"expected {self.n_units}")
        if len(self.region_of_domain) != self.n_domains:
            raise ValueError("region_of_domain length must match domain count")
        if np.any(self.domain_sizes < 1) or np.any(self.size_class_counts < 1):
            raise ValueError("domain and size-class counts must be >= 1")
        lo, hi = self.predictor_range
        if not lo < hi:
            raise ValueError("predictor_range must satisfy low < high")
        if self.sigma_lambda2 < 0 or self.sigma_epsilon2 < 0:
            raise ValueError("variances must be >= 0")
        return self


@dataclass(frozen=True)
class TruthTable:
    """Ground-truth totals at domain, regional and national resolution."""

    domain_units: np.ndarray      # (D,) actual unit counts
    domain_type: np.ndarray       # (D,) 1-based size-rank group
    region_of_domain: np.ndarray  # (D,)
    y_emp: np.ndarray             # (D,) employment totals Y_d^emp
    y: np.ndarray                 # (D,) sub-employment totals Y_d
    y_emp_region: np.ndarray      # (R,)
    y_region: np.ndarray          # (R,)
    y_emp_national: int
    y_national: int


@dataclass(frozen=True)
class FinitePopulation:
    """One generated population with its ground truth."""

    config: PopulationConfig
    domain: np.ndarray        # (N_P,) 0-based domain id per unit
    region: np.ndarray        # (N_P,)
    size_class: np.ndarray    # (N_P,)
    emp: np.ndarray           # (N_P,) employment y_j^emp
    suby: np.ndarray          # (N_P,) sub-employment y_j
    x_d: np.ndarray           # (D,) known predictor
    lambda_d: np.ndarray      # (D,) realized domain log-rate
    class_counts: np.ndarray = field(repr=False, default=None)  # (D, S)
    truth: TruthTable = None

    @property
    def n_units(self):
        return len(self.domain)


def _size_rank(domain_sizes):
    """1-based dense rank of domain sizes, largest size = type 1."""
    distinct = np.unique(np.asarray(domain_sizes))[::-1]
    rank = {size: i + 1 for i, size in enumerate(distinct)}
    return np.array([rank[s] for s in np.asarray(domain_sizes)])


def _scale_counts(counts, scale, total):
    """Round scaled counts and repair their sum to ``total`` via the largest."""
    out = np.maximum(np.rint(np.asarray(counts) * scale).astype(np.int64), 1)
    out[np.argmax(out)] += total - out.sum()
    if out.min() < 1:
        raise ValueError(f"scale {scale} produces empty cells")
    return out


def default_config(scale=1.0, rng_seed=1):
    """Reference population configuration, optionally scaled down uniformly.

    ``scale`` multiplies the total unit count, the per-domain sizes and the
    per-class counts; rounding drift is repaired by adjusting the largest
    domain / class so the totals still match.
    """
    n_units = int(round(_N_P * scale))
    domain_type = _size_rank(_DOMAIN_SIZES)
    cfg = PopulationConfig(
        n_units=n_units,
        domain_sizes=_scale_counts(_DOMAIN_SIZES, scale, n_units),
        region_of_domain=np.array(_REGION_OF_DOMAIN),
        size_class_means=np.array(_SIZE_CLASS_MEANS),
        size_class_counts=_scale_counts(_SIZE_CLASS_COUNTS, scale, n_units),
        rng_seed=rng_seed,
        domain_type=domain_type,
    )
    return cfg.validate()


def with_seed(config, rng_seed):
    """Copy of ``config`` with a different RNG seed (for replicate streams)."""
    return replace(config, rng_seed=rng_seed)


def allocate_size_classes(config):
    """Units of each size class allocated per domain, shape (D, S).

    Each domain receives ``floor(N_s * N_d / N_P)`` units of class ``s``;
    per-class remainders go to domains round-robin by domain index.  At the
    reference sizes (and decimal scalings of them) the floor division is
    exact and no remainder exists.
    """
    n_d = config.domain_sizes.astype(np.int64)
    n_s = config.size_class_counts.astype(np.int64)
    counts = (n_s[None, :] * n_d[:, None]) // config.n_units
    for s in range(config.n_classes):
        rem = int(n_s[s] - counts[:, s].sum())
        if rem > 0:
            extra = np.arange(rem) % config.n_domains
            np.add.at(counts[:, s], extra, 1)
    return counts


def generate_population(config):
    """Draw one population; deterministic for a fixed ``config.rng_seed``."""
    config.validate()
    rng = np.random.default_rng(config.rng_seed)
    counts = allocate_size_classes(config)
    d_grid = np.repeat(np.arange(config.n_domains), counts.sum(axis=1))
    s_grid = np.concatenate(
        [np.repeat(np.arange(config.n_classes), counts[d]) for d in range(config.n_domains)])

    lo, hi = config.predictor_range
    x_d = rng.uniform(lo, hi, config.n_domains)
    lambda_d = rng.normal(config.beta_true * np.log(x_d),
                          np.sqrt(config.sigma_lambda2), config.n_domains)
    emp = rng.poisson(config.size_class_means[s_grid])
    eps = rng.normal(-0.5 * config.sigma_epsilon2,
                     np.sqrt(config.sigma_epsilon2), len(d_grid))
    m_j = emp * np.exp(lambda_d[d_grid] + eps)
    suby = rng.poisson(m_j)

    region = config.region_of_domain[d_grid]
    truth = _build_truth(config, d_grid, emp, suby, counts)
    return FinitePopulation(
        config=config, domain=d_grid, region=region, size_class=s_grid,
        emp=emp, suby=suby, x_d=x_d, lambda_d=lambda_d,
        class_counts=counts, truth=truth)


def _build_truth(config, d_grid, emp, suby, counts):
    n_dom = config.n_domains
    n_reg = config.n_regions
    y_emp = np.bincount(d_grid, weights=emp, minlength=n_dom).astype(np.int64)
    y = np.bincount(d_grid, weights=suby, minlength=n_dom).astype(np.int64)
    y_emp_r = np.bincount(config.region_of_domain, weights=y_emp,
                          minlength=n_reg).astype(np.int64)
    y_r = np.bincount(config.region_of_domain, weights=y,
                      minlength=n_reg).astype(np.int64)
    return TruthTable(
        domain_units=counts.sum(axis=1),
        domain_type=config.domain_type,
        region_of_domain=config.region_of_domain,
        y_emp=y_emp, y=y,
        y_emp_region=y_emp_r, y_region=y_r,
        y_emp_national=int(y_emp_r.sum()), y_national=int(y_r.sum()))


def truth_report(population):
    """Row-oriented truth table (domain rows plus region/national rollups).

    Returns a list of dicts with keys ``level`` (domain/region/national),
    ``id`` (1-based), ``region`` (1-based, domains only), ``domain_type``,
    ``n_units``, ``emp_total`` and ``suby_total``.
    """
    t = population.truth
    rows = []
    for d in range(len(t.y)):
        rows.append({
            "level": "domain", "id": d + 1,
            "region": int(t.region_of_domain[d]) + 1,
            "domain_type": int(t.domain_type[d]),
            "n_units": int(t.domain_units[d]),
            "emp_total": int(t.y_emp[d]), "suby_total": int(t.y[d]),
        })
    for r in range(len(t.y_region)):
        in_r = t.region_of_domain == r
        rows.append({
            "level": "region", "id": r + 1, "region": r + 1, "domain_type": None,
            "n_units": int(t.domain_units[in_r].sum()),
            "emp_total": int(t.y_emp_region[r]), "suby_total": int(t.y_region[r]),
        })
    rows.append({
        "level": "national", "id": 1, "region": None, "domain_type": None,
        "n_units": int(t.domain_units.sum()),
        "emp_total": t.y_emp_national, "suby_total": t.y_national,
    })
    return rows
