"""Model variants over survey count data: log-posteriors, gradients, and
full conditionals for the discrete latent death counts.

Three variants share one regression structure (urban/rural intercepts,
admin1 fixed effects with the first fixed at zero, nested BYM2 admin2
effects, negative binomial counts with common overdispersion d):

* "ul"    - standard unit-level model for the observed sampled counts.
* "dabul" - direct-assisted model with latent per-cluster totals Y_c^(s),
            latent admin1 totals Y_i+, and a logit-normal benchmark
            likelihood tying Y_i+/N_i to the design-based direct estimate.
* "exact" - the hard-benchmark version that pins Y_i+ at round(r_hat * N_i).

Continuous parameters are sampled in unconstrained coordinates
(log sigma, logit phi, log d) with Jacobian terms included, so the
log-posterior functions here are densities in those coordinates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from scipy.special import betaln, digamma, expit, gammaln

from . import dist
from .dist import ContractError
from .geo import Geography, StructureMatrix, build_icar_structure

if TYPE_CHECKING:  # pragma: no cover
    from .direct import DirectEstimates
    from .survey import PopulationFrame, SurveyData

logger = logging.getLogger(__name__)

UL, DABUL, EXACT = "ul", "dabul", "exact"
VARIANTS = (UL, DABUL, EXACT)

URBAN, RURAL = 0, 1
ETA_CLIP = 500.0  # keeps exp(eta) finite in absurd proposal states


class InfeasibleBenchmark(RuntimeError):
    """Exact benchmarking asks for fewer deaths than were observed."""


@dataclass
class ModelConfig:
    """Priors and variant selection.

    Defaults: intercepts N(-3.5, 3^2), admin1 effects N(0, 1), PC prior on
    sigma with P(sigma > 1) = 0.01, phi ~ Beta(0.5, 0.5), d ~ Exp(1).
    """

    variant: str = DABUL
    intercept_mean: float = -3.5
    intercept_sd: float = 3.0
    beta_sd: float = 1.0
    sigma_pc_threshold: float = 1.0
    sigma_pc_tail_prob: float = 0.01
    phi_beta_a: float = 0.5
    phi_beta_b: float = 0.5
    d_exp_rate: float = 1.0
    # Support scan for the Y_i+ conditional: stop once the running maximum
    # exceeds the current term by tail_nats and at least scan_mult * E[Y_i+]
    # terms were scanned (truncation error below 1e-17 relative mass).
    yplus_tail_nats: float = 40.0
    yplus_scan_mult: float = 5.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        for name in ("intercept_sd", "beta_sd", "sigma_pc_threshold", "phi_beta_a",
                     "phi_beta_b", "d_exp_rate", "yplus_tail_nats", "yplus_scan_mult"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class ModelData:
    """Survey counts arranged for fitting.

    Cells index (stratum, admin2) pairs: cell = stratum * m2 + admin2, with
    stratum 0 urban and 1 rural.  Sampled clusters carry their own rows;
    unsampled clusters only enter through per-cell birth totals.
    """

    m1: int
    m2: int
    admin1_of_admin2: np.ndarray   # (m2,)
    cell_admin1: np.ndarray        # (2*m2,)
    unsampled_births_cell: np.ndarray  # (2*m2,)
    births_admin1: np.ndarray      # (m1,) total births N_i over all clusters
    s_cluster_id: np.ndarray       # (S,) ids of sampled clusters, file order
    s_births: np.ndarray           # (S,) N_c
    s_samp_births: np.ndarray      # (S,) n_c
    s_deaths: np.ndarray           # (S,) Z_c
    s_cell: np.ndarray             # (S,)
    s_admin1: np.ndarray           # (S,)

    @property
    def n_sampled(self) -> int:
        return len(self.s_births)

    @property
    def has_unsampled(self) -> np.ndarray:
        return np.bincount(self.cell_admin1, weights=self.unsampled_births_cell,
                           minlength=self.m1) > 0

    @property
    def obs_deaths_admin1(self) -> np.ndarray:
        return np.bincount(self.s_admin1, weights=self.s_deaths,
                           minlength=self.m1).astype(np.int64)

    def validate(self):
        if np.any(self.s_deaths < 0) or np.any(self.s_deaths > self.s_samp_births):
            raise ContractError("need 0 <= Z_c <= n_c for sampled clusters")
        if np.any(self.s_samp_births < 1) or np.any(self.s_samp_births > self.s_births):
            raise ContractError("need 1 <= n_c <= N_c for sampled clusters")


def build_model_data(population: "PopulationFrame", survey: "SurveyData",
                     geography: Geography) -> ModelData:
    """Join a survey onto its population frame in the fitting layout."""
    m1, m2 = geography.m1, geography.m2
    stratum = population.stratum
    cell = stratum * m2 + (population.admin2 - 1)
    sampled = survey.gamma.astype(bool)
    unsampled_births_cell = np.bincount(cell[~sampled],
                                        weights=population.births[~sampled].astype(float),
                                        minlength=2 * m2)
    births_admin1 = np.bincount(population.admin1 - 1,
                                weights=population.births.astype(float), minlength=m1)
    cell_admin1 = np.concatenate([geography.admin1_of, geography.admin1_of])
    order = np.flatnonzero(sampled)  # data-file order, fixed sweep order
    md = ModelData(
        m1=m1, m2=m2,
        admin1_of_admin2=geography.admin1_of.astype(np.int64),
        cell_admin1=cell_admin1.astype(np.int64),
        unsampled_births_cell=unsampled_births_cell,
        births_admin1=births_admin1,
        s_cluster_id=population.cluster_id[order].astype(np.int64),
        s_births=population.births[order].astype(np.int64),
        s_samp_births=survey.samp_births[order].astype(np.int64),
        s_deaths=survey.samp_deaths[order].astype(np.int64),
        s_cell=cell[order].astype(np.int64),
        s_admin1=(population.admin1[order] - 1).astype(np.int64),
    )
    md.validate()
    return md


@dataclass
class ModelParams:
    """Interpretable view of one point in the unconstrained parameter space."""

    alpha_u: float
    alpha_r: float
    beta: np.ndarray          # (m1,), beta[0] == 0
    v: np.ndarray
    u: np.ndarray
    sigma2: float
    phi: float
    d: float
    b: np.ndarray             # BYM2 combination on the projected u

    def validate(self):
        if self.beta[0] != 0.0:
            raise ContractError("beta[0] is fixed at 0")
        if self.sigma2 <= 0 or self.d <= 0 or not (0.0 < self.phi < 1.0):
            raise ContractError("need sigma2, d > 0 and phi in (0, 1)")


@dataclass
class LatentCounts:
    """Discrete latent state: per-sampled-cluster totals and admin1 totals."""

    ysamp: np.ndarray        # (S,) Y_c^(s)
    yplus: np.ndarray        # (m1,) Y_i+
    ysamp_admin1: np.ndarray  # (m1,) running sums of ysamp within admin1

    def copy(self) -> "LatentCounts":
        return LatentCounts(self.ysamp.copy(), self.yplus.copy(), self.ysamp_admin1.copy())

    def validate(self, data: ModelData):
        if np.any(self.ysamp < data.s_deaths):
            raise ContractError("Y_c^(s) below observed deaths")
        if np.any(self.ysamp > data.s_deaths + data.s_births - data.s_samp_births):
            raise ContractError("Y_c^(s) above cluster capacity")
        sums = np.bincount(data.s_admin1, weights=self.ysamp, minlength=data.m1)
        if np.any(sums.astype(np.int64) != self.ysamp_admin1):
            raise ContractError("ysamp_admin1 out of sync with ysamp")
        if np.any(self.yplus < self.ysamp_admin1):
            raise ContractError("Y_i+ below its sampled-cluster sum")
        has_u = data.has_unsampled
        if np.any(self.yplus[~has_u] != self.ysamp_admin1[~has_u]):
            raise ContractError("fully sampled admin1 must have Y_i+ equal to sampled sum")


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


class ModelBundle:
    """Callable set for one variant: log-posterior with gradient over the
    unconstrained continuous parameters, and the discrete full conditionals.

    Parameter vector layout:
        [alpha_u, alpha_r, beta_2..beta_m1, v_1..v_m2, u_1..u_m2,
         log sigma, logit phi, log d]
    """

    def __init__(self, config: ModelConfig, data: ModelData,
                 structure: StructureMatrix,
                 direct: "DirectEstimates | None" = None,
                 debug_checks: bool = False):
        self.config = config
        self.data = data
        self.structure = structure
        self.variant = config.variant
        self.debug_checks = debug_checks
        m1, m2 = data.m1, data.m2
        self.m1, self.m2 = m1, m2
        self.dim = 2 + (m1 - 1) + 2 * m2 + 3
        self._sl_beta = slice(2, 2 + (m1 - 1))
        self._sl_v = slice(2 + (m1 - 1), 2 + (m1 - 1) + m2)
        self._sl_u = slice(2 + (m1 - 1) + m2, 2 + (m1 - 1) + 2 * m2)
        self._i_ls = self.dim - 3
        self._i_lphi = self.dim - 2
        self._i_ld = self.dim - 1
        self._lam_sigma = dist.pc_prior_rate(config.sigma_pc_threshold,
                                             config.sigma_pc_tail_prob)
        self._lgfact = gammaln(np.arange(int(data.s_births.max(initial=1)) + 3,
                                         dtype=np.float64) + 1.0)
        self._has_unsampled = data.has_unsampled
        # static per-cluster pieces of the Y_c^(s) conditional: cumulative log
        # hypergeometric ratios over the full support [Z_c, Z_c + N_c - n_c]
        self._clg: list[np.ndarray] = []
        self._cgrid: list[np.ndarray] = []
        for c in range(data.n_sampled):
            z = int(data.s_deaths[c])
            cap = int(data.s_births[c] - data.s_samp_births[c])
            yr = z + np.arange(cap, dtype=np.float64)
            n_pop, n_c = float(data.s_births[c]), float(data.s_samp_births[c])
            hg = (yr + 1.0) / (yr + 1.0 - z) * (n_pop - yr - n_c + z) / (n_pop - yr)
            self._clg.append(np.concatenate([[0.0], np.cumsum(np.log(hg))]))
            self._cgrid.append(np.arange(z, z + cap + 1, dtype=np.int64))
        self._obs_deaths_admin1 = data.obs_deaths_admin1

        if self.variant in (DABUL, EXACT):
            if direct is None:
                raise ContractError(f"variant {self.variant} needs direct estimates")
            usable = direct.usable_mask()
            if not np.all(usable):
                logger.warning(
                    "direct estimates degenerate in admin1 areas %s; benchmark "
                    "term dropped there", list(np.flatnonzero(~usable) + 1))
            self.use_direct = usable
            self.logit_rhat = np.where(usable, dist.logit(np.clip(direct.r_hat, 1e-12, 1 - 1e-12)), 0.0)
            self.v_logit = np.where(usable, direct.v_logit, 1.0)
        else:
            self.use_direct = np.zeros(m1, dtype=bool)
            self.logit_rhat = np.zeros(m1)
            self.v_logit = np.ones(m1)

        if self.variant == EXACT:
            if not np.all(np.isfinite(direct.r_hat)):
                raise InfeasibleBenchmark("exact benchmark needs finite direct estimates")
            target = np.minimum(np.round(direct.r_hat * data.births_admin1),
                                data.births_admin1).astype(np.int64)
            low = self._obs_deaths_admin1
            if np.any(target < low):
                bad = np.flatnonzero(target < low) + 1
                raise InfeasibleBenchmark(
                    f"exact benchmark infeasible in admin1 {list(bad)}: "
                    f"r_hat * N_i below observed deaths")
            self._exact_target = target
        else:
            self._exact_target = None

    # ---------- parameter packing ----------

    def unpack(self, theta: np.ndarray) -> ModelParams:
        beta = np.zeros(self.m1)
        beta[1:] = theta[self._sl_beta]
        v = theta[self._sl_v]
        u = theta[self._sl_u]
        sigma = float(np.exp(theta[self._i_ls]))
        phi = float(expit(theta[self._i_lphi]))
        d = float(np.exp(theta[self._i_ld]))
        up = self.structure.project(u)
        b = sigma * (np.sqrt(max(1.0 - phi, 0.0)) * v + np.sqrt(phi) * up)
        return ModelParams(alpha_u=float(theta[0]), alpha_r=float(theta[1]), beta=beta,
                           v=v.copy(), u=u.copy(), sigma2=sigma * sigma, phi=phi, d=d, b=b)

    def pack(self, p: ModelParams) -> np.ndarray:
        theta = np.empty(self.dim)
        theta[0], theta[1] = p.alpha_u, p.alpha_r
        theta[self._sl_beta] = p.beta[1:]
        theta[self._sl_v] = p.v
        theta[self._sl_u] = p.u
        theta[self._i_ls] = 0.5 * np.log(p.sigma2)
        theta[self._i_lphi] = dist.logit(p.phi)
        theta[self._i_ld] = np.log(p.d)
        return theta

    def risk_cells(self, theta: np.ndarray) -> np.ndarray:
        """Rates exp(eta) for all (stratum, admin2) cells, urban block first."""
        beta_full = np.zeros(self.m1)
        beta_full[1:] = theta[self._sl_beta]
        u = theta[self._sl_u]
        sigma = np.exp(theta[self._i_ls])
        phi = expit(theta[self._i_lphi])
        b = sigma * (np.sqrt(max(1.0 - phi, 0.0)) * theta[self._sl_v]
                     + np.sqrt(phi) * self.structure.project(u))
        base = beta_full[self.data.admin1_of_admin2] + b
        eta = np.concatenate([theta[0] + base, theta[1] + base])
        return np.exp(np.clip(eta, -ETA_CLIP, ETA_CLIP))

    # ---------- priors ----------

    def prior_logp_grad(self, theta: np.ndarray):
        """Prior log-density (with transform Jacobians) and its gradient."""
        cfg = self.config
        st = self.structure
        alpha = theta[:2]
        beta_t = theta[self._sl_beta]
        v = theta[self._sl_v]
        u = theta[self._sl_u]
        ls, lphi, ld = theta[self._i_ls], theta[self._i_lphi], theta[self._i_ld]
        sigma, d = np.exp(ls), np.exp(ld)
        phi = expit(lphi)

        up = st.project(u)
        qu = st.Q_star @ up
        m0, s0 = cfg.intercept_mean, cfg.intercept_sd
        logp = float(
            -0.5 * np.sum((alpha - m0) ** 2) / s0 ** 2 - np.log(2 * np.pi * s0 ** 2)
            - 0.5 * np.sum(beta_t ** 2) / cfg.beta_sd ** 2
            - 0.5 * len(beta_t) * np.log(2 * np.pi * cfg.beta_sd ** 2)
            - 0.5 * float(v @ v) - 0.5 * self.m2 * np.log(2 * np.pi)
            - 0.5 * float(up @ qu)
            + np.log(self._lam_sigma) - self._lam_sigma * sigma + ls
            - cfg.phi_beta_a * _softplus(-lphi) - cfg.phi_beta_b * _softplus(lphi)
            - betaln(cfg.phi_beta_a, cfg.phi_beta_b)
            + np.log(cfg.d_exp_rate) - cfg.d_exp_rate * d + ld
        )
        grad = np.zeros(self.dim)
        grad[:2] = -(alpha - m0) / s0 ** 2
        grad[self._sl_beta] = -beta_t / cfg.beta_sd ** 2
        grad[self._sl_v] = -v
        grad[self._sl_u] = -st.project(qu)
        grad[self._i_ls] = 1.0 - self._lam_sigma * sigma
        grad[self._i_lphi] = cfg.phi_beta_a * (1.0 - phi) - cfg.phi_beta_b * phi
        grad[self._i_ld] = 1.0 - cfg.d_exp_rate * d
        return logp, grad

    # ---------- likelihood + posterior ----------

    def _counts_and_scales(self, latents: LatentCounts | None):
        """Per-sampled-cluster response counts and exposure sizes per variant."""
        if self.variant == UL:
            return self.data.s_deaths, self.data.s_samp_births
        if latents is None:
            raise ContractError("latent counts required for this variant")
        return latents.ysamp, self.data.s_births

    def logp_grad(self, theta: np.ndarray, latents: LatentCounts | None = None):
        """Log-posterior over continuous parameters and its gradient.

        For "dabul"/"exact" this conditions on the latent counts; the
        hypergeometric and benchmark terms are constants in the continuous
        parameters and excluded.
        """
        if self.debug_checks and latents is not None:
            latents.validate(self.data)
        data = self.data
        logp, grad = self.prior_logp_grad(theta)
        beta_full = np.zeros(self.m1)
        beta_full[1:] = theta[self._sl_beta]
        v = theta[self._sl_v]
        u = theta[self._sl_u]
        sigma = float(np.exp(theta[self._i_ls]))
        phi = float(expit(theta[self._i_lphi]))
        d = float(np.exp(theta[self._i_ld]))
        up = self.structure.project(u)
        sq1mphi, sqphi = np.sqrt(max(1.0 - phi, 0.0)), np.sqrt(phi)
        b = sigma * (sq1mphi * v + sqphi * up)
        base = beta_full[data.admin1_of_admin2] + b
        eta = np.concatenate([theta[0] + base, theta[1] + base])
        r_cell = np.exp(np.clip(eta, -ETA_CLIP, ETA_CLIP))

        l1p = np.log1p(d)
        logd_ratio = np.log(d) - l1p

        counts, scales = self._counts_and_scales(latents)
        a_s = scales * r_cell[data.s_cell] / d
        psi_diff = digamma(counts + a_s) - digamma(a_s) - l1p
        logp += float(np.sum(gammaln(counts + a_s) - gammaln(a_s)
                             - self._lgfact[counts] + counts * np.log(d)
                             - (counts + a_s) * l1p))
        t_cell = np.bincount(data.s_cell, weights=a_s * psi_diff, minlength=2 * self.m2)
        g_d_sum = float(np.sum(-(a_s / d) * psi_diff + counts / d
                               - (counts + a_s) / (1.0 + d)))

        if self.variant in (DABUL, EXACT):
            mu_cell = data.unsampled_births_cell * r_cell
            mu_u = np.bincount(data.cell_admin1, weights=mu_cell, minlength=self.m1)
            has_u = self._has_unsampled
            k_u = (latents.yplus - latents.ysamp_admin1).astype(np.float64)
            a_u = np.where(has_u, mu_u / d, 1.0)  # placeholder where unused
            psi_u = digamma(k_u + a_u) - digamma(a_u) - l1p
            ll_u = (gammaln(k_u + a_u) - gammaln(a_u) - gammaln(k_u + 1.0)
                    + k_u * np.log(d) - (k_u + a_u) * l1p)
            logp += float(np.sum(np.where(has_u, ll_u, 0.0)))
            g_mu = np.where(has_u, psi_u / d, 0.0)
            t_cell = t_cell + g_mu[data.cell_admin1] * mu_cell
            g_d_sum += float(np.sum(np.where(
                has_u, -(a_u / d) * psi_u + k_u / d - (k_u + a_u) / (1.0 + d), 0.0)))

        t_a1 = np.bincount(data.cell_admin1, weights=t_cell, minlength=self.m1)
        t_j = t_cell[:self.m2] + t_cell[self.m2:]
        grad[0] += float(np.sum(t_cell[:self.m2]))
        grad[1] += float(np.sum(t_cell[self.m2:]))
        grad[self._sl_beta] += t_a1[1:]
        grad[self._sl_v] += sigma * sq1mphi * t_j
        grad[self._sl_u] += sigma * sqphi * self.structure.project(t_j)
        grad[self._i_ls] += float(t_j @ b)
        grad[self._i_lphi] += 0.5 * sigma * (sqphi * (1.0 - phi) * float(t_j @ up)
                                             - phi * sq1mphi * float(t_j @ v))
        grad[self._i_ld] += d * g_d_sum
        return logp, grad

    # ---------- discrete full conditionals ----------

    def risk_cache(self, theta: np.ndarray):
        """Quantities the discrete updates need at the current rates."""
        r_cell = self.risk_cells(theta)
        d = float(np.exp(theta[self._i_ld]))
        data = self.data
        a_s = data.s_births * r_cell[data.s_cell] / d
        mu_cell = data.unsampled_births_cell * r_cell
        mu_u = np.bincount(data.cell_admin1, weights=mu_cell, minlength=self.m1)
        mu_total = mu_u + np.bincount(data.s_admin1,
                                      weights=data.s_births * r_cell[data.s_cell],
                                      minlength=self.m1)
        return _RiskCache(r_cell=r_cell, d=d, a_s=a_s, mu_u=mu_u, mu_total=mu_total)

    def yplus_grid(self, i: int, cache: "_RiskCache", latents: LatentCounts):
        """Support values and unnormalized log-masses for Y_i+.

        The collapsed-DCM and total-count terms combine exactly into a
        negative binomial log-pmf for the unsampled-group count (decomposition
        identity), which is evaluated by an exact ratio recursion; the
        benchmark likelihood is added on top.
        """
        ys = int(latents.ysamp_admin1[i])
        if not self._has_unsampled[i]:
            return np.array([ys], dtype=np.int64), np.zeros(1)
        d = cache.d
        a_u = cache.mu_u[i] / d
        cap = int(self.data.births_admin1[i]) - ys + 1
        scan_min = int(min(cap, max(32, np.ceil(self.config.yplus_scan_mult
                                                * cache.mu_total[i]))))
        tail = self.config.yplus_tail_nats
        n_terms = min(cap, scan_min + 64)
        while True:
            ug = np.arange(n_terms, dtype=np.float64)
            lm = np.empty(n_terms)
            lm[0] = 0.0
            if n_terms > 1:
                lm[1:] = np.cumsum(np.log((ug[:-1] + a_u) / ug[1:])
                                   + (np.log(d) - np.log1p(d)))
            if self.use_direct[i]:
                t = ys + ug
                n_i = float(self.data.births_admin1[i])
                with np.errstate(divide="ignore", invalid="ignore"):
                    delta = self.logit_rhat[i] - (np.log(t) - np.log(n_i - t))
                    lm = lm - 0.5 * delta * delta / self.v_logit[i]
                lm[~np.isfinite(lm)] = -np.inf
            with np.errstate(invalid="ignore"):
                run = np.maximum.accumulate(lm)
                stop = (run - lm > tail) & (np.arange(n_terms) >= scan_min)
            hits = np.flatnonzero(stop)
            if hits.size:
                cut = int(hits[0]) + 1
                return ys + np.arange(cut, dtype=np.int64), lm[:cut]
            if n_terms >= cap:
                return ys + np.arange(n_terms, dtype=np.int64), lm
            n_terms = min(cap, n_terms * 2)

    def ycluster_grid(self, c: int, cache: "_RiskCache", latents: LatentCounts):
        """Support values and unnormalized log-masses for Y_c^(s).

        Hypergeometric and DCM terms are combined through their exact
        one-step ratios; the overdispersion factors of the cluster and the
        unsampled group cancel because their counts move in lockstep.
        """
        data = self.data
        i = int(data.s_admin1[c])
        z = int(data.s_deaths[c])
        n_c = int(data.s_samp_births[c])
        n_pop = int(data.s_births[c])
        t = int(latents.yplus[i])
        ys_other = int(latents.ysamp_admin1[i]) - int(latents.ysamp[c])
        lo = z
        hi_cap = z + n_pop - n_c
        if not self._has_unsampled[i]:
            forced = t - ys_other
            if forced < lo or forced > hi_cap:
                raise ContractError(
                    f"empty support for cluster {c}: forced value {forced} outside "
                    f"[{lo}, {hi_cap}] (corrupted latent state)")
            return np.array([forced], dtype=np.int64), np.zeros(1)
        hi = min(hi_cap, t - ys_other)
        if hi < lo:
            raise ContractError(
                f"empty support for cluster {c}: [{lo}, {hi}] (corrupted latent state)")
        k = hi - lo + 1
        values = self._cgrid[c][:k]
        if k == 1:
            return values, np.zeros(1)
        a_c = cache.a_s[c]
        a_u = cache.mu_u[i] / cache.d
        yr = values[:-1]
        u_at = (t - ys_other) - yr  # unsampled-group count before each step
        # hypergeometric ratio is precomputed; DCM ratios of the cluster and
        # the unsampled group fused into one log (overdispersion cancels)
        lm = np.empty(k)
        lm[0] = 0.0
        np.cumsum(np.log((yr + a_c) * u_at / ((yr + 1.0) * (u_at - 1.0 + a_u))),
                  out=lm[1:])
        lm[1:] += self._clg[c][1:k]
        return values, lm

    # ---------- initial state ----------

    def init_latents(self, direct: "DirectEstimates | None" = None) -> LatentCounts | None:
        if self.variant == UL:
            return None
        data = self.data
        ysamp = data.s_deaths.astype(np.int64).copy()
        ys1 = np.bincount(data.s_admin1, weights=ysamp, minlength=self.m1).astype(np.int64)
        if self.variant == EXACT:
            yplus = np.where(self._has_unsampled, self._exact_target, ys1).astype(np.int64)
        else:
            pooled = float(data.s_deaths.sum()) / max(float(data.s_samp_births.sum()), 1.0)
            r_guess = np.where(self.use_direct, expit(self.logit_rhat), pooled)
            yplus = np.maximum(ys1, np.round(r_guess * data.births_admin1).astype(np.int64))
            yplus = np.minimum(yplus, data.births_admin1.astype(np.int64))
            yplus = np.where(self._has_unsampled, yplus, ys1).astype(np.int64)
        lat = LatentCounts(ysamp=ysamp, yplus=yplus, ysamp_admin1=ys1)
        lat.validate(data)
        return lat

    def init_theta(self, rng: np.random.Generator) -> np.ndarray:
        data = self.data
        pooled = float(data.s_deaths.sum()) / max(float(data.s_samp_births.sum()), 1.0)
        mu0 = np.log(max(pooled, 1e-4))
        theta = np.zeros(self.dim)
        theta[0] = mu0 + 0.2 * rng.standard_normal()
        theta[1] = mu0 + 0.2 * rng.standard_normal()
        theta[self._sl_beta] = 0.1 * rng.standard_normal(self.m1 - 1)
        theta[self._sl_v] = 0.3 * rng.standard_normal(self.m2)
        theta[self._sl_u] = self.structure.project(0.3 * rng.standard_normal(self.m2))
        theta[self._i_ls] = np.log(0.2) + 0.2 * rng.standard_normal()
        theta[self._i_lphi] = 0.5 * rng.standard_normal()
        theta[self._i_ld] = np.log(0.5) + 0.3 * rng.standard_normal()
        return theta

    def initial_scale(self) -> np.ndarray:
        """Rough per-coordinate posterior scales to seed warmup adaptation."""
        s = np.empty(self.dim)
        s[:2] = 0.2
        s[self._sl_beta] = 0.2
        s[self._sl_v] = 0.7
        s[self._sl_u] = 0.7
        s[self._i_ls] = 0.3
        s[self._i_lphi] = 1.0
        s[self._i_ld] = 0.3
        return s

    def recenter(self, theta: np.ndarray) -> np.ndarray:
        """Project the stored u onto the constraint subspace.

        The posterior is flat along block-constant shifts of u, so this is a
        measure-preserving relabeling that keeps coordinates bounded.
        """
        theta = theta.copy()
        theta[self._sl_u] = self.structure.project(theta[self._sl_u])
        return theta


@dataclass
class _RiskCache:
    r_cell: np.ndarray
    d: float
    a_s: np.ndarray
    mu_u: np.ndarray
    mu_total: np.ndarray


def assemble_variant(config: ModelConfig, data: ModelData,
                     direct: "DirectEstimates | None",
                     geography: Geography,
                     structure: StructureMatrix | None = None,
                     debug_checks: bool = False) -> ModelBundle:
    """Build the callable set for the configured variant.

    "ul" allocates no latent structures; "dabul" adds both discrete
    conditionals; "exact" fixes Y_i+ at round(r_hat * N_i) and raises
    InfeasibleBenchmark when that target falls below the observed deaths.
    """
    if structure is None:
        structure = build_icar_structure(geography, nesting="per_admin1")
    return ModelBundle(config=config, data=data, structure=structure, direct=direct,
                       debug_checks=debug_checks)


# ---------- spec-level convenience wrappers ----------

def risk_from_params(p: ModelParams, stratum, admin1, admin2):
    """Rate r_c = exp(alpha_stratum + beta_admin1 + b_admin2); ids 0-based."""
    stratum = np.asarray(stratum)
    alpha = np.where(stratum == URBAN, p.alpha_u, p.alpha_r)
    out = np.exp(alpha + p.beta[np.asarray(admin1)] + p.b[np.asarray(admin2)])
    return out if out.ndim else float(out)


def log_posterior_ul(bundle: ModelBundle, theta: np.ndarray):
    if bundle.variant != UL:
        raise ContractError("bundle is not the unit-level variant")
    if bundle.data.n_sampled < 1:
        raise ContractError("need at least one sampled cluster")
    return bundle.logp_grad(theta)


def log_posterior_dabul_continuous(bundle: ModelBundle, theta: np.ndarray,
                                   latents: LatentCounts):
    if bundle.variant not in (DABUL, EXACT):
        raise ContractError("bundle has no latent-count likelihood")
    latents.validate(bundle.data)
    return bundle.logp_grad(theta, latents)


def _normalize(values: np.ndarray, log_masses: np.ndarray):
    finite = np.isfinite(log_masses)
    if not np.any(finite):
        raise ContractError(
            f"zero total mass over support [{values[0]}, {values[-1]}] "
            f"({len(values)} candidates)")
    m = log_masses.max()
    p = np.exp(log_masses - m)
    p /= p.sum()
    return values, p


def yplus_full_conditional(bundle: ModelBundle, i: int, theta: np.ndarray,
                           latents: LatentCounts):
    """Normalized pmf (values, probs) of Y_i+ given everything else."""
    if bundle.variant != DABUL:
        raise ContractError("Y_i+ is only updated under the dabul variant")
    cache = bundle.risk_cache(theta)
    return _normalize(*bundle.yplus_grid(i, cache, latents))


def ycluster_full_conditional(bundle: ModelBundle, c: int, theta: np.ndarray,
                              latents: LatentCounts):
    """Normalized pmf (values, probs) of Y_c^(s) given everything else."""
    if bundle.variant == UL:
        raise ContractError("unit-level variant has no latent cluster counts")
    cache = bundle.risk_cache(theta)
    return _normalize(*bundle.ycluster_grid(c, cache, latents))
