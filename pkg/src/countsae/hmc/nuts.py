"""Hamiltonian Monte Carlo with dynamic trajectory doubling.

One transition doubles a leapfrog trajectory forward or backward until a
U-turn or the depth cap, sampling the proposal multinomially by density
weight.  Warm-up adapts the step size by dual averaging toward a target
acceptance statistic and estimates a diagonal metric over expanding
windows; both are frozen for the sampling phase.  The target is any
callable ``u -> (log density, gradient)``; non-finite returns are treated
as rejections.  Trajectories whose Hamiltonian error exceeds a fixed
threshold are flagged divergent, never silently accepted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DIVERGENCE_THRESHOLD = 1000.0


@dataclass(frozen=True, eq=False)
class SamplerConfig:
    iters: int = 5000
    warmup: int = 2500
    chains: int = 4
    target_accept: float = 0.8
    max_treedepth: int = 10
    step_size: float = None        # None: search for a reasonable value
    adapt_metric: bool = True
    init_inv_metric: np.ndarray = None  # starting diagonal metric (variances)
    init_center: np.ndarray = None      # center of the initialization box
    init_jitter: float = 2.0       # initialization ~ Uniform(-j, j) per coordinate
    seed: object = 0               # int or sequence of ints
    init_retries: int = 100

    def validate(self):
        if not 0 < self.warmup < self.iters:
            raise ValueError("need 0 < warmup < iters")
        if not 0 < self.target_accept < 1:
            raise ValueError("target acceptance must lie in (0, 1)")
        if self.chains < 1 or self.max_treedepth < 1:
            raise ValueError("chains and max_treedepth must be >= 1")
        return self


@dataclass
class Chains:
    """Post-warmup draws on the unconstrained scale plus sampler state."""

    draws: np.ndarray        # (chains, kept, dim)
    logp: np.ndarray         # (chains, kept)
    accept_stat: np.ndarray  # (chains, kept)
    divergent: np.ndarray    # (chains, kept) bool
    treedepth: np.ndarray    # (chains, kept)
    step_size: np.ndarray    # (chains,)
    inv_metric: np.ndarray   # (chains, dim)
    config: SamplerConfig
    method: dict = field(default_factory=dict)

    @property
    def n_chains(self):
        return self.draws.shape[0]

    @property
    def n_kept(self):
        return self.draws.shape[1]

    @property
    def dim(self):
        return self.draws.shape[2]

    @property
    def n_divergent(self):
        return int(self.divergent.sum())

    def stacked(self):
        return self.draws.reshape(-1, self.dim)


class _Tree:
    """End points, proposal and stopping state of one trajectory subtree."""

    __slots__ = ("q_minus", "p_minus", "grad_minus", "q_plus", "p_plus",
                 "grad_plus", "q_prop", "logp_prop", "grad_prop", "log_w",
                 "p_sum", "sum_alpha", "n_alpha", "divergent", "turning")

    def __init__(self, q, p, grad, logp, log_w, alpha):
        self.q_minus = q
        self.p_minus = p
        self.grad_minus = grad
        self.q_plus = q
        self.p_plus = p
        self.grad_plus = grad
        self.q_prop = q
        self.logp_prop = logp
        self.grad_prop = grad
        self.log_w = log_w
        self.p_sum = p.copy()
        self.sum_alpha = alpha
        self.n_alpha = 1
        self.divergent = False
        self.turning = False


def _kinetic(p, inv_metric):
    return 0.5 * float(np.dot(p, inv_metric * p))


def _leapfrog(target, q, p, grad, eps, inv_metric):
    p_half = p + 0.5 * eps * grad
    q_new = q + eps * (inv_metric * p_half)
    logp_new, grad_new = target(q_new)
    p_new = p_half + 0.5 * eps * grad_new
    return q_new, p_new, logp_new, grad_new


def _uturn(p_sum, p_sharp_minus, p_sharp_plus):
    return (np.dot(p_sum, p_sharp_minus) <= 0) or (np.dot(p_sum, p_sharp_plus) <= 0)


def _build_tree(target, tree_from, direction, depth, eps, inv_metric, h0, rng):
    """Recursively double a subtree from the chosen end of ``tree_from``."""
    if direction == 1:
        q, p, grad = tree_from.q_plus, tree_from.p_plus, tree_from.grad_plus
    else:
        q, p, grad = tree_from.q_minus, tree_from.p_minus, tree_from.grad_minus

    if depth == 0:
        q1, p1, logp1, grad1 = _leapfrog(target, q, p, grad, direction * eps, inv_metric)
        h = -logp1 + _kinetic(p1, inv_metric) if np.isfinite(logp1) else np.inf
        err = h - h0
        leaf = _Tree(q1, p1, grad1, logp1,
                     log_w=-err if np.isfinite(err) else -np.inf,
                     alpha=min(1.0, math.exp(min(-err, 0.0))) if np.isfinite(err) else 0.0)
        leaf.divergent = not np.isfinite(err) or err > DIVERGENCE_THRESHOLD
        return leaf

    inner = _build_tree(target, tree_from, direction, depth - 1, eps, inv_metric, h0, rng)
    if inner.divergent or inner.turning:
        return inner
    outer = _build_tree(target, inner, direction, depth - 1, eps, inv_metric, h0, rng)
    _merge(inner, outer, direction, inv_metric, rng, biased=False)
    return inner


def _merge(tree, other, direction, inv_metric, rng, biased):
    """Fold ``other`` (the subtree in ``direction``) into ``tree`` in place."""
    tree.sum_alpha += other.sum_alpha
    tree.n_alpha += other.n_alpha
    tree.divergent |= other.divergent
    if other.divergent or other.turning:
        tree.turning |= other.turning
        return

    # U-turn checks across the merged span and across the subtree boundary,
    # using pre-merge end momenta; a tree always spans minus -> plus in
    # integration time, whichever order it was built in.
    if direction == 1:
        back, fwd = tree, other
    else:
        back, fwd = other, tree
    sharp_bb = inv_metric * back.p_minus
    sharp_bf = inv_metric * back.p_plus
    sharp_fb = inv_metric * fwd.p_minus
    sharp_ff = inv_metric * fwd.p_plus
    p_sum = back.p_sum + fwd.p_sum
    turning = _uturn(p_sum, sharp_bb, sharp_ff)
    turning = turning or _uturn(back.p_sum + fwd.p_minus, sharp_bb, sharp_fb)
    turning = turning or _uturn(fwd.p_sum + back.p_plus, sharp_bf, sharp_ff)

    # multinomial proposal update: biased toward the new subtree at the top
    # level, weight-proportional within a doubling
    total = np.logaddexp(tree.log_w, other.log_w)
    if biased:
        accept_lp = min(0.0, other.log_w - tree.log_w)
    else:
        accept_lp = other.log_w - total if np.isfinite(total) else -np.inf
    if math.log(rng.random() + 1e-300) < accept_lp:
        tree.q_prop = other.q_prop
        tree.logp_prop = other.logp_prop
        tree.grad_prop = other.grad_prop
    tree.log_w = total
    tree.p_sum = p_sum
    if direction == 1:
        tree.q_plus, tree.p_plus, tree.grad_plus = \
            other.q_plus, other.p_plus, other.grad_plus
    else:
        tree.q_minus, tree.p_minus, tree.grad_minus = \
            other.q_minus, other.p_minus, other.grad_minus
    tree.turning = turning


def _transition(target, q, logp, grad, eps, inv_metric, max_depth, rng):
    dim = len(q)
    p0 = rng.standard_normal(dim) / np.sqrt(inv_metric)
    h0 = -logp + _kinetic(p0, inv_metric)
    tree = _Tree(q, p0, grad, logp, log_w=0.0, alpha=1.0)
    tree.n_alpha = 0
    tree.sum_alpha = 0.0
    depth = 0
    while depth < max_depth:
        direction = 1 if rng.random() < 0.5 else -1
        sub = _build_tree(target, tree, direction, depth, eps, inv_metric, h0, rng)
        _merge(tree, sub, direction, inv_metric, rng, biased=True)
        depth += 1
        if sub.divergent or sub.turning or tree.turning:
            break
    accept_stat = tree.sum_alpha / max(tree.n_alpha, 1)
    return (tree.q_prop, tree.logp_prop, tree.grad_prop, accept_stat,
            tree.divergent, depth)


class _DualAveraging:
    """Nesterov dual averaging of log step size toward a target acceptance."""

    GAMMA, T0, KAPPA = 0.05, 10.0, 0.75

    def __init__(self, eps0, target):
        self.target = target
        self.restart(eps0)

    def restart(self, eps0):
        self.mu = math.log(10.0 * eps0)
        self.log_eps = math.log(eps0)
        self.log_eps_bar = math.log(eps0)
        self.h_bar = 0.0
        self.m = 0

    def update(self, alpha):
        self.m += 1
        eta = 1.0 / (self.m + self.T0)
        self.h_bar = (1 - eta) * self.h_bar + eta * (self.target - alpha)
        self.log_eps = self.mu - math.sqrt(self.m) / self.GAMMA * self.h_bar
        w = self.m ** -self.KAPPA
        self.log_eps_bar = w * self.log_eps + (1 - w) * self.log_eps_bar
        return math.exp(self.log_eps)

    def adapted(self):
        return math.exp(self.log_eps_bar)


class _Welford:
    def __init__(self, dim):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x):
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def variance(self):
        return self.m2 / (self.n - 1) if self.n > 1 else None


def metric_windows(warmup, init_buffer=75, term_buffer=50, base_window=25):
    """Warm-up metric schedule: (first slow iteration, refresh indices).

    Windows of doubling size run between a fast initial buffer and a fast
    terminal buffer; the last window absorbs any remainder.  Buffers shrink
    proportionally when the warm-up is short, and very short warm-ups skip
    metric adaptation entirely.
    """
    if warmup < 20:
        return 0, []
    if init_buffer + base_window + term_buffer > warmup:
        init_buffer = max(1, int(0.15 * warmup))
        term_buffer = max(1, int(0.10 * warmup))
        base_window = warmup - init_buffer - term_buffer
        if base_window <= 0:
            return 0, []
    boundary = warmup - term_buffer
    ends = []
    start, size = init_buffer, base_window
    while True:
        end = start + size
        if end >= boundary:
            ends.append(boundary)
            break
        if end + 2 * size > boundary:
            ends.append(end)
            ends.append(boundary)
            break
        ends.append(end)
        start, size = end, size * 2
    return init_buffer, ends


def find_reasonable_step_size(target, q, logp, grad, inv_metric, rng):
    """Double or halve until the one-step acceptance crosses one half."""
    eps = 1.0
    p = rng.standard_normal(len(q)) / np.sqrt(inv_metric)
    h0 = -logp + _kinetic(p, inv_metric)

    def log_ratio(eps):
        _, p1, logp1, _ = _leapfrog(target, q, p, grad, eps, inv_metric)
        if not np.isfinite(logp1):
            return -np.inf
        return h0 - (-logp1 + _kinetic(p1, inv_metric))

    r = log_ratio(eps)
    direction = 1 if r > math.log(0.5) else -1
    for _ in range(100):
        eps *= 2.0 ** direction
        r = log_ratio(eps)
        if not np.isfinite(r) and direction == 1:
            r = -np.inf
        if (direction == 1 and r <= math.log(0.5)) or \
           (direction == -1 and r >= math.log(0.5)) or \
           not (1e-10 < eps < 1e7):
            break
    return eps


def chain_rng(seed, chain_idx):
    """Independent per-chain stream from an int or sequence master seed."""
    entropy = [seed] if np.isscalar(seed) else list(seed)
    return np.random.default_rng(entropy + [chain_idx])


def _run_chain(target, dim, config, chain_idx):
    rng = chain_rng(config.seed, chain_idx)
    if config.init_inv_metric is not None:
        inv_metric = np.asarray(config.init_inv_metric, dtype=float)
        if inv_metric.shape != (dim,) or np.any(inv_metric <= 0):
            raise ValueError("init_inv_metric must be positive with shape (dim,)")
    else:
        inv_metric = np.ones(dim)
    center = np.zeros(dim) if config.init_center is None else \
        np.asarray(config.init_center, dtype=float)

    # per-coordinate Uniform(-jitter, jitter), in initial-metric units and
    # around the configured center; the defaults make this exactly
    # Uniform(-2, 2) on the unconstrained scale
    logp = -np.inf
    q = grad = None
    jitter_scale = np.sqrt(inv_metric)
    for _ in range(config.init_retries):
        q = center + rng.uniform(-config.init_jitter, config.init_jitter,
                                 dim) * jitter_scale
        logp, grad = target(q)
        if np.isfinite(logp) and np.all(np.isfinite(grad)):
            break
    else:
        raise RuntimeError(
            f"no finite log density found in {config.init_retries} "
            f"initialization attempts (chain {chain_idx})")

    eps = config.step_size or find_reasonable_step_size(
        target, q, logp, grad, inv_metric, rng)
    da = _DualAveraging(eps, config.target_accept)
    if config.adapt_metric:
        slow_start, ends = metric_windows(config.warmup)
        window_ends = set(ends)
    else:
        slow_start, window_ends = 0, set()
    welford = _Welford(dim)

    kept = config.iters - config.warmup
    draws = np.empty((kept, dim))
    logps = np.empty(kept)
    accept = np.empty(kept)
    diverged = np.zeros(kept, dtype=bool)
    depths = np.zeros(kept, dtype=np.int64)

    for it in range(config.iters):
        q, logp, grad, alpha, div, depth = _transition(
            target, q, logp, grad, eps, inv_metric, config.max_treedepth, rng)
        if it < config.warmup:
            eps = da.update(alpha)
            if window_ends and it >= slow_start:
                welford.add(q)
            if (it + 1) in window_ends:
                var = welford.variance()
                if var is not None:
                    n = welford.n
                    inv_metric = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                welford = _Welford(dim)
                if config.step_size is None:
                    eps = find_reasonable_step_size(target, q, logp, grad, inv_metric, rng)
                da.restart(eps)
            if it + 1 == config.warmup:
                eps = da.adapted() if config.step_size is None else config.step_size
        else:
            k = it - config.warmup
            draws[k] = q
            logps[k] = logp
            accept[k] = alpha
            diverged[k] = div
            depths[k] = depth
    return draws, logps, accept, diverged, depths, eps, inv_metric


def sample(target, dim, config):
    """Run all chains; fully determined by (seed, config, target)."""
    config.validate()
    results = [_run_chain(target, dim, config, c) for c in range(config.chains)]
    return _collect(results, config)


def _collect(results, config):
    draws = np.stack([r[0] for r in results])
    return Chains(
        draws=draws,
        logp=np.stack([r[1] for r in results]),
        accept_stat=np.stack([r[2] for r in results]),
        divergent=np.stack([r[3] for r in results]),
        treedepth=np.stack([r[4] for r in results]),
        step_size=np.array([r[5] for r in results]),
        inv_metric=np.stack([r[6] for r in results]),
        config=config,
        method={
            "algorithm": "dynamic multinomial HMC (trajectory doubling, "
                         "no-U-turn stop)",
            "metric": "diagonal" if config.adapt_metric else "identity",
            "step_size_adaptation": "dual averaging",
            "divergence_threshold": DIVERGENCE_THRESHOLD,
        })
