"""NUTS-within-Gibbs machinery: the No-U-Turn step, warmup adaptation,
inverse-transform updates of discrete latents, chain drivers for the three
model variants, and chain diagnostics.

The NUTS transition uses multinomial sampling over the trajectory, a
diagonal scaling matrix (positions are standardized by its square root, so
the tree recursion runs in an identity-metric space), and the standard
U-turn/divergence rules.  Warmup adapts the step size by dual averaging and
the scaling matrix from draw variances over expanding windows whose last
window covers roughly the second half of warmup.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

from .dist import ContractError
from .model import DABUL, EXACT, UL, LatentCounts, ModelBundle

DIVERGENCE_NATS = 1000.0


@dataclass
class SamplerConfig:
    iters: int = 1000          # post-warmup draws per chain
    warmup: int = 1000
    chains: int = 4
    epsilon: float | None = None   # pinned step size (adaptation off)
    mass_diag: np.ndarray | None = None  # pinned scaling-matrix diagonal
    adapt_mass: bool = True
    max_tree_depth: int = 10
    target_accept: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.iters < 1 or self.warmup < 0 or self.chains < 1:
            raise ValueError("iters, chains must be >= 1 and warmup >= 0")
        if not (1 <= self.max_tree_depth <= 12):
            raise ValueError("max_tree_depth must be in [1, 12]")
        if not (0.0 < self.target_accept < 1.0):
            raise ValueError("target_accept must be in (0, 1)")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


# ---------------------------------------------------------------------------
# Core NUTS transition
# ---------------------------------------------------------------------------

class _Tree:
    __slots__ = ("q_minus", "p_minus", "g_minus", "q_plus", "p_plus", "g_plus",
                 "q_prop", "lp_prop", "g_prop", "rho", "log_w", "sum_accept",
                 "n_steps", "stop", "divergent")

    def __init__(self, q, p, g, lp, log_w, accept, divergent):
        self.q_minus = self.q_plus = self.q_prop = q
        self.p_minus = self.p_plus = p
        self.g_minus = self.g_plus = self.g_prop = g
        self.rho = p
        self.lp_prop = lp
        self.log_w = log_w
        self.sum_accept = accept
        self.n_steps = 1
        self.stop = divergent
        self.divergent = divergent


def _leapfrog(q, p, g, eps, eval_fn):
    p_half = p + 0.5 * eps * g
    q_new = q + eps * p_half
    lp_new, g_new = eval_fn(q_new)
    p_new = p_half + 0.5 * eps * g_new
    return q_new, p_new, g_new, lp_new


def _uturn(rho, p_plus, p_minus) -> bool:
    # generalized no-U-turn criterion on the momentum sum over the trajectory
    return (rho @ p_minus) < 0.0 or (rho @ p_plus) < 0.0


def _build_tree(q, p, g, direction, depth, eps, h0, eval_fn, rng) -> _Tree:
    if depth == 0:
        q1, p1, g1, lp1 = _leapfrog(q, p, g, direction * eps, eval_fn)
        h1 = -lp1 + 0.5 * float(p1 @ p1)
        delta = h1 - h0
        if not np.isfinite(delta):
            delta = np.inf
        divergent = delta > DIVERGENCE_NATS
        log_w = -delta if np.isfinite(delta) else -np.inf
        accept = math.exp(min(0.0, -delta)) if np.isfinite(delta) else 0.0
        return _Tree(q1, p1, g1, lp1, log_w, accept, divergent)
    left = _build_tree(q, p, g, direction, depth - 1, eps, h0, eval_fn, rng)
    if left.stop:
        return left
    if direction == 1:
        right = _build_tree(left.q_plus, left.p_plus, left.g_plus, direction,
                            depth - 1, eps, h0, eval_fn, rng)
        left.q_plus, left.p_plus, left.g_plus = right.q_plus, right.p_plus, right.g_plus
    else:
        right = _build_tree(left.q_minus, left.p_minus, left.g_minus, direction,
                            depth - 1, eps, h0, eval_fn, rng)
        left.q_minus, left.p_minus, left.g_minus = right.q_minus, right.p_minus, right.g_minus
    total = np.logaddexp(left.log_w, right.log_w)
    if np.isfinite(right.log_w) and math.log(rng.random()) < right.log_w - total:
        left.q_prop, left.lp_prop, left.g_prop = right.q_prop, right.lp_prop, right.g_prop
    left.log_w = total
    left.rho = left.rho + right.rho
    left.sum_accept += right.sum_accept
    left.n_steps += right.n_steps
    left.divergent = left.divergent or right.divergent
    left.stop = (right.stop or left.divergent
                 or _uturn(left.rho, left.p_plus, left.p_minus))
    return left


def nuts_one_step(theta, logp_grad, eps, scale, rng,
                  max_tree_depth: int = 10, logp=None, grad=None):
    """One No-U-Turn transition targeting exp(logp), momentum ~ N(0, Sigma^-1).

    scale is sqrt(diag(Sigma)); positions are standardized by it internally.
    Returns (theta', logp', grad', stats) where stats carries the mean
    acceptance statistic, tree depth, divergence flag and leapfrog count.
    """
    scale = np.asarray(scale, dtype=np.float64)

    def eval_fn(qs):
        lp, g = logp_grad(qs * scale)
        return lp, g * scale

    q = np.asarray(theta, dtype=np.float64) / scale
    if logp is None or grad is None:
        lp0, g0 = eval_fn(q)
    else:
        lp0, g0 = float(logp), np.asarray(grad) * scale
    if not np.isfinite(lp0) or not np.all(np.isfinite(g0)):
        raise ContractError("non-finite log-density or gradient at current state")
    p0 = rng.standard_normal(len(q))
    h0 = -lp0 + 0.5 * float(p0 @ p0)

    q_minus = q_plus = q_prop = q
    p_minus = p_plus = p0
    g_minus = g_plus = g_prop = g0
    rho = p0
    lp_prop = lp0
    log_w = 0.0
    sum_accept, n_steps = 0.0, 0
    divergent = False
    depth = 0
    while depth < max_tree_depth:
        direction = 1 if rng.random() < 0.5 else -1
        if direction == 1:
            sub = _build_tree(q_plus, p_plus, g_plus, 1, depth, eps, h0, eval_fn, rng)
            q_plus, p_plus, g_plus = sub.q_plus, sub.p_plus, sub.g_plus
        else:
            sub = _build_tree(q_minus, p_minus, g_minus, -1, depth, eps, h0, eval_fn, rng)
            q_minus, p_minus, g_minus = sub.q_minus, sub.p_minus, sub.g_minus
        sum_accept += sub.sum_accept
        n_steps += sub.n_steps
        divergent = divergent or sub.divergent
        if sub.stop:
            depth += 1
            break
        # biased progressive sampling: favor the fresh half of the trajectory
        if math.log(rng.random()) < sub.log_w - log_w:
            q_prop, lp_prop, g_prop = sub.q_prop, sub.lp_prop, sub.g_prop
        log_w = np.logaddexp(log_w, sub.log_w)
        rho = rho + sub.rho
        depth += 1
        if _uturn(rho, p_plus, p_minus):
            break
    stats = {"accept": sum_accept / max(n_steps, 1), "depth": depth,
             "divergent": divergent, "n_leapfrog": n_steps}
    return q_prop * scale, lp_prop, g_prop / scale, stats


def find_reasonable_epsilon(theta, logp_grad, scale, rng) -> float:
    """Step-size heuristic: double/halve until the one-step accept prob crosses 1/2."""
    scale = np.asarray(scale, dtype=np.float64)

    def eval_fn(qs):
        lp, g = logp_grad(qs * scale)
        return lp, g * scale

    q = np.asarray(theta, dtype=np.float64) / scale
    lp0, g0 = eval_fn(q)
    p0 = rng.standard_normal(len(q))
    h0 = -lp0 + 0.5 * float(p0 @ p0)
    eps = 1.0

    def log_ratio(eps):
        _, p1, _, lp1 = _leapfrog(q, p0, g0, eps, eval_fn)
        h1 = -lp1 + 0.5 * float(p1 @ p1)
        return h0 - h1 if np.isfinite(h1) else -np.inf

    a = 1.0 if log_ratio(eps) > math.log(0.5) else -1.0
    for _ in range(60):
        if a * log_ratio(eps) <= -a * math.log(2.0):
            break
        eps *= 2.0 ** a
    return eps


class DualAveraging:
    """Nesterov dual averaging of log step size toward a target accept rate."""

    def __init__(self, eps0: float, target: float, gamma: float = 0.05,
                 t0: float = 10.0, kappa: float = 0.75):
        self.mu = math.log(10.0 * eps0)
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.log_eps = math.log(eps0)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.count = 0

    def update(self, accept_stat: float) -> float:
        self.count += 1
        frac = 1.0 / (self.count + self.t0)
        self.h_bar = (1 - frac) * self.h_bar + frac * (self.target - accept_stat)
        self.log_eps = self.mu - math.sqrt(self.count) / self.gamma * self.h_bar
        w = self.count ** (-self.kappa)
        self.log_eps_bar = (1 - w) * self.log_eps_bar + w * self.log_eps
        return math.exp(self.log_eps)

    def adapted(self) -> float:
        return math.exp(self.log_eps_bar)


class WarmupAdapter:
    """Step-size and diagonal-scaling adaptation over a warmup schedule.

    Layout mirrors the usual fast/slow windowing: an initial step-size-only
    buffer, expanding metric windows (each ending with a scaling update and a
    dual-averaging restart), and a terminal step-size-only buffer.  With the
    default proportions the final metric window spans about the second half
    of warmup, which is the stretch of draws the scaling matrix is set from.
    """

    def __init__(self, cfg: SamplerConfig, dim: int, eps0: float,
                 init_scale: np.ndarray | None = None):
        self.cfg = cfg
        self.dim = dim
        if cfg.mass_diag is not None:
            self.scale = np.sqrt(np.asarray(cfg.mass_diag, dtype=np.float64))
        elif init_scale is not None:
            self.scale = np.asarray(init_scale, dtype=np.float64).copy()
        else:
            self.scale = np.ones(dim)
        self.adapt_eps = cfg.epsilon is None
        self.eps = cfg.epsilon if cfg.epsilon is not None else eps0
        self.da = DualAveraging(self.eps, cfg.target_accept) if self.adapt_eps else None
        w = cfg.warmup
        self.adapt_metric = cfg.adapt_mass and cfg.mass_diag is None and w >= 100
        self.windows: list[tuple[int, int]] = []
        if self.adapt_metric:
            init = max(1, int(0.15 * w)) if w < 150 else 75
            term = max(1, int(0.10 * w)) if w < 150 else 50
            start, size = init, 25
            while start + size <= w - term:
                if start + 3 * size > w - term:
                    size = (w - term) - start  # extend the last window
                self.windows.append((start, start + size))
                start, size = start + size, size * 2
            if not self.windows:
                self.windows = [(init, w - term)]
        self._window_draws: list[np.ndarray] = []
        self._next_window = 0

    def update(self, iteration: int, theta: np.ndarray, accept_stat: float):
        """Advance adaptation after a warmup iteration (0-based index)."""
        if self.adapt_eps:
            self.eps = self.da.update(accept_stat)
        if not self.adapt_metric or self._next_window >= len(self.windows):
            return
        start, end = self.windows[self._next_window]
        if iteration >= start:
            self._window_draws.append(theta.copy())
        if iteration + 1 == end:
            draws = np.asarray(self._window_draws)
            n = len(draws)
            var = draws.var(axis=0, ddof=1) if n > 1 else np.ones(self.dim)
            var = (n / (n + 5.0)) * var + (5.0 / (n + 5.0)) * 1e-3
            self.scale = np.sqrt(np.maximum(var, 1e-12))
            self._window_draws = []
            self._next_window += 1
            if self.adapt_eps:
                self.da = DualAveraging(max(self.eps, 1e-10), self.cfg.target_accept)

    def finish(self):
        if self.adapt_eps:
            self.eps = self.da.adapted()


def adapt_warmup(logp_grad, theta0, cfg: SamplerConfig, rng) -> tuple[float, np.ndarray]:
    """Run warmup alone and return the tuned (epsilon, scaling diagonal)."""
    theta = np.asarray(theta0, dtype=np.float64).copy()
    scale0 = (np.sqrt(np.asarray(cfg.mass_diag, dtype=np.float64))
              if cfg.mass_diag is not None else np.ones(len(theta)))
    eps0 = (cfg.epsilon if cfg.epsilon is not None
            else find_reasonable_epsilon(theta, logp_grad, scale0, rng))
    adapter = WarmupAdapter(cfg, len(theta), eps0)
    lp, gr = logp_grad(theta)
    for m in range(cfg.warmup):
        theta, lp, gr, st = nuts_one_step(theta, logp_grad, adapter.eps, adapter.scale,
                                          rng, cfg.max_tree_depth, logp=lp, grad=gr)
        adapter.update(m, theta, st["accept"])
    adapter.finish()
    return adapter.eps, adapter.scale ** 2


def inverse_transform_sample(log_masses: np.ndarray, u: float) -> int:
    """Index of the smallest support point with cumulative probability >= u.

    log_masses are unnormalized; normalization happens through log-sum-exp.
    """
    lm = np.asarray(log_masses, dtype=np.float64)
    m = lm.max()
    if not np.isfinite(m):
        raise ContractError("all log-masses are -inf")
    w = np.exp(lm - m)
    c = np.cumsum(w)
    return int(np.searchsorted(c, u * c[-1], side="left"))


# ---------------------------------------------------------------------------
# Chain drivers
# ---------------------------------------------------------------------------

@dataclass
class PosteriorDraws:
    """Post-warmup draws for one fit: one row table per chain."""

    columns: list[str]
    chains: list[np.ndarray]            # each (iters, n_cols)
    divergent: np.ndarray               # (n_chains, iters)
    tree_depth: np.ndarray              # (n_chains, iters)
    seed: int
    variant: str
    n_divergent: int = 0
    wall_time_s: float = 0.0
    latent_columns: list[str] = field(default_factory=list)

    def stacked(self) -> np.ndarray:
        return np.vstack(self.chains)

    def column(self, name: str) -> np.ndarray:
        j = self.columns.index(name)
        return np.stack([c[:, j] for c in self.chains])

    def matrix(self, names: list[str]) -> np.ndarray:
        idx = [self.columns.index(n) for n in names]
        return self.stacked()[:, idx]


def draw_columns(bundle: ModelBundle) -> tuple[list[str], list[str]]:
    """Stored column names: parameters then latent counts."""
    m1, m2 = bundle.m1, bundle.m2
    cols = ["alpha_u", "alpha_r"]
    cols += [f"beta_{i + 1}" for i in range(1, m1)]
    cols += ["sigma2", "phi", "d"]
    cols += [f"b_{j + 1}" for j in range(m2)]
    cols += [f"risk_u_{j + 1}" for j in range(m2)]
    cols += [f"risk_r_{j + 1}" for j in range(m2)]
    latent = []
    if bundle.variant in (DABUL, EXACT):
        latent += [f"yplus_{i + 1}" for i in range(m1)]
        latent += [f"ysamp_{int(cid)}" for cid in bundle.data.s_cluster_id]
    return cols, latent


def _record_row(bundle: ModelBundle, theta, latents, out_row: np.ndarray):
    m1, m2 = bundle.m1, bundle.m2
    p = 0
    out_row[p:p + 2] = theta[:2]; p += 2
    out_row[p:p + m1 - 1] = theta[bundle._sl_beta]; p += m1 - 1
    out_row[p] = np.exp(2.0 * theta[bundle._i_ls]); p += 1
    out_row[p] = 1.0 / (1.0 + np.exp(-theta[bundle._i_lphi])); p += 1
    out_row[p] = np.exp(theta[bundle._i_ld]); p += 1
    u = theta[bundle._sl_u]
    sigma = np.sqrt(out_row[p - 3])
    phi = out_row[p - 2]
    b = sigma * (np.sqrt(max(1.0 - phi, 0.0)) * theta[bundle._sl_v]
                 + np.sqrt(phi) * bundle.structure.project(u))
    out_row[p:p + m2] = b; p += m2
    r = bundle.risk_cells(theta)
    out_row[p:p + 2 * m2] = r; p += 2 * m2
    if latents is not None:
        out_row[p:p + m1] = latents.yplus; p += m1
        out_row[p:p + len(latents.ysamp)] = latents.ysamp; p += len(latents.ysamp)
    return p


def gibbs_discrete_sweep(bundle: ModelBundle, theta: np.ndarray,
                         latents: LatentCounts, rng: np.random.Generator,
                         update_yplus: bool):
    """One full inverse-transform pass: every Y_i+ (optionally), then every
    sampled cluster's Y_c^(s) in fixed data-file order."""
    cache = bundle.risk_cache(theta)
    if update_yplus:
        for i in range(bundle.m1):
            values, lm = bundle.yplus_grid(i, cache, latents)
            latents.yplus[i] = values[inverse_transform_sample(lm, rng.random())]
    us = rng.random(bundle.data.n_sampled)
    for c in range(bundle.data.n_sampled):
        values, lm = bundle.ycluster_grid(c, cache, latents)
        new = values[inverse_transform_sample(lm, us[c])]
        i = bundle.data.s_admin1[c]
        latents.ysamp_admin1[i] += new - latents.ysamp[c]
        latents.ysamp[c] = new
    if bundle.debug_checks:
        latents.validate(bundle.data)


def _run_chain(bundle: ModelBundle, cfg: SamplerConfig, seedseq) -> dict:
    rng = np.random.Generator(np.random.PCG64(seedseq))
    theta = bundle.init_theta(rng)
    latents = bundle.init_latents()
    cols, latent_cols = draw_columns(bundle)
    n_cols = len(cols) + len(latent_cols)
    draws = np.empty((cfg.iters, n_cols))
    divergent = np.zeros(cfg.warmup + cfg.iters, dtype=bool)
    depth = np.zeros(cfg.warmup + cfg.iters, dtype=np.int16)

    def logp_grad(th):
        return bundle.logp_grad(th, latents)

    scale0 = (np.sqrt(np.asarray(cfg.mass_diag, dtype=np.float64))
              if cfg.mass_diag is not None else bundle.initial_scale())
    eps0 = (cfg.epsilon if cfg.epsilon is not None
            else find_reasonable_epsilon(theta, logp_grad, scale0, rng))
    adapter = WarmupAdapter(cfg, bundle.dim, eps0, init_scale=scale0)
    has_discrete = bundle.variant in (DABUL, EXACT)
    for m in range(cfg.warmup + cfg.iters):
        theta = bundle.recenter(theta)
        theta, lp, gr, st = nuts_one_step(theta, logp_grad, adapter.eps, adapter.scale,
                                          rng, cfg.max_tree_depth)
        divergent[m] = st["divergent"]
        depth[m] = st["depth"]
        if m < cfg.warmup:
            adapter.update(m, theta, st["accept"])
            if m + 1 == cfg.warmup:
                adapter.finish()
        if has_discrete:
            gibbs_discrete_sweep(bundle, theta, latents, rng,
                                 update_yplus=(bundle.variant == DABUL))
        if m >= cfg.warmup:
            _record_row(bundle, theta, latents, draws[m - cfg.warmup])
    return {"draws": draws, "divergent": divergent[cfg.warmup:],
            "depth": depth[cfg.warmup:], "columns": cols + latent_cols,
            "latent_columns": latent_cols}


def run_variant(bundle: ModelBundle, cfg: SamplerConfig,
                spawn_key: tuple = ()) -> PosteriorDraws:
    """Run all chains of one fit; chains use independent derived rng substreams."""
    t0 = time.perf_counter()
    chains, div, dep = [], [], []
    columns = latent_cols = None
    for chain in range(cfg.chains):
        ss = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(*spawn_key, chain))
        res = _run_chain(bundle, cfg, ss)
        chains.append(res["draws"])
        div.append(res["divergent"])
        dep.append(res["depth"])
        columns, latent_cols = res["columns"], res["latent_columns"]
    out = PosteriorDraws(columns=columns, chains=chains,
                         divergent=np.asarray(div), tree_depth=np.asarray(dep),
                         seed=cfg.seed, variant=bundle.variant,
                         n_divergent=int(np.sum(div)),
                         wall_time_s=time.perf_counter() - t0,
                         latent_columns=latent_cols)
    return out


def run_standard_ul(bundle: ModelBundle, cfg: SamplerConfig, spawn_key=()) -> PosteriorDraws:
    if bundle.variant != UL:
        raise ContractError("bundle must be the unit-level variant")
    return run_variant(bundle, cfg, spawn_key)


def run_dabul(bundle: ModelBundle, cfg: SamplerConfig, spawn_key=()) -> PosteriorDraws:
    if bundle.variant != DABUL:
        raise ContractError("bundle must be the dabul variant")
    return run_variant(bundle, cfg, spawn_key)


def run_exact_dabul(bundle: ModelBundle, cfg: SamplerConfig, spawn_key=()) -> PosteriorDraws:
    if bundle.variant != EXACT:
        raise ContractError("bundle must be the exact variant")
    return run_variant(bundle, cfg, spawn_key)


# ---------------------------------------------------------------------------
# Generic NUTS driver (known-target checks, UL-style continuous models)
# ---------------------------------------------------------------------------

def sample_nuts(logp_grad, theta0, cfg: SamplerConfig, seedseq=None):
    """Plain NUTS with warmup adaptation on an arbitrary (logp, grad) target.

    Returns (draws of shape (iters, dim), info dict).
    """
    if seedseq is None:
        seedseq = np.random.SeedSequence(cfg.seed)
    rng = np.random.Generator(np.random.PCG64(seedseq))
    theta = np.asarray(theta0, dtype=np.float64).copy()
    scale0 = (np.sqrt(np.asarray(cfg.mass_diag, dtype=np.float64))
              if cfg.mass_diag is not None else np.ones(len(theta)))
    eps0 = (cfg.epsilon if cfg.epsilon is not None
            else find_reasonable_epsilon(theta, logp_grad, scale0, rng))
    adapter = WarmupAdapter(cfg, len(theta), eps0)
    draws = np.empty((cfg.iters, len(theta)))
    divergent = np.zeros(cfg.iters, dtype=bool)
    depths = np.zeros(cfg.iters, dtype=np.int16)
    for m in range(cfg.warmup + cfg.iters):
        theta, lp, gr, st = nuts_one_step(theta, logp_grad, adapter.eps, adapter.scale,
                                          rng, cfg.max_tree_depth)
        if m < cfg.warmup:
            adapter.update(m, theta, st["accept"])
            if m + 1 == cfg.warmup:
                adapter.finish()
        else:
            draws[m - cfg.warmup] = theta
            divergent[m - cfg.warmup] = st["divergent"]
            depths[m - cfg.warmup] = st["depth"]
    return draws, {"epsilon": adapter.eps, "scale": adapter.scale,
                   "divergent": divergent, "depth": depths}


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def _split_chains(x: np.ndarray) -> np.ndarray:
    n = x.shape[1] // 2
    return np.vstack([x[:, :n], x[:, x.shape[1] - n:]])


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    r = rankdata(x, method="average").reshape(x.shape)
    return ndtri((r - 0.375) / (x.size + 0.25))


def _rhat_of(z: np.ndarray) -> float:
    m, n = z.shape
    chain_means = z.mean(axis=1)
    within = z.var(axis=1, ddof=1).mean()
    between = n * np.var(chain_means, ddof=1)
    var_plus = (n - 1) / n * within + between / n
    return float(np.sqrt(var_plus / within))

def _autocov(x: np.ndarray) -> np.ndarray:
    n = len(x)
    xc = x - x.mean()
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n].real / n
    return acov


def _ess_of(z: np.ndarray) -> float:
    m, n = z.shape
    acov = np.stack([_autocov(z[i]) for i in range(m)])
    mean_var = acov[:, 0].mean() * n / (n - 1.0)
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += np.var(z.mean(axis=1), ddof=1)
    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    # Geyer initial positive + monotone sequence over (even, odd) lag pairs
    tau = -1.0
    prev_pair = None
    k = 0
    while 2 * k + 1 < n:
        pair = rho[2 * k] + rho[2 * k + 1]
        if pair < 0:
            break
        if prev_pair is not None:
            pair = min(pair, prev_pair)
        tau += 2.0 * pair
        prev_pair = pair
        k += 1
    tau = max(tau, 1.0 / np.log10(max(m * n, 10)))
    return float(m * n / tau)


def diagnostics(draws: PosteriorDraws, columns: list[str] | None = None):
    """Rank-normalized split-Rhat and bulk ESS per stored column.

    Constant columns (for example the pinned Y_i+ of the exact variant) are
    flagged and reported with Rhat 1 and ESS equal to the draw count.
    """
    if len(draws.chains) < 2 or draws.chains[0].shape[0] < 4:
        raise ContractError("diagnostics need >= 2 chains and >= 4 draws each")
    names = columns if columns is not None else draws.columns
    out = {}
    for name in names:
        x = draws.column(name)
        if np.all(x == x.flat[0]):
            out[name] = {"rhat": 1.0, "ess_bulk": float(x.size), "constant": True}
            continue
        z = _rank_normalize(_split_chains(x))
        out[name] = {"rhat": _rhat_of(z), "ess_bulk": min(_ess_of(z), float(x.size)),
                     "constant": False}
    return out
