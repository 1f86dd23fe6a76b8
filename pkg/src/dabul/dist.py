"""Probability kernels: log-densities, samplers and analytic derivatives.

Everything is computed in log space via log-gamma; counts and weights can
span many orders of magnitude.  All samplers take an explicit numpy
Generator, so every operation here is pure and reentrant.

Negative binomial parameterization (mean mu, overdispersion d > 0):

    P(z) = Gamma(z + mu/d) / (Gamma(z+1) Gamma(mu/d)) * d^z * (1+d)^-(z + mu/d)

with E[z] = mu and Var(z) = (1+d) mu.  Sums of independent such variables
with common d are again negative binomial with summed means, and the
conditional of the vector given its sum is Dirichlet compound multinomial
(DCM) with weight vector mu/d.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .geo import StructureMatrix


class ContractError(ValueError):
    """An operation was called outside its contract."""


def negbin_logpmf(z, mean, overdisp):
    """Log pmf of the negative binomial with given mean and overdispersion.

    mean = 0 yields a point mass at zero (log 0 = -inf for z > 0, not an
    exception).  Vectorizes over any broadcastable combination of arguments.
    """
    z = np.asarray(z, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    d = np.asarray(overdisp, dtype=np.float64)
    if np.any(d <= 0):
        raise ContractError("overdispersion must be > 0")
    if np.any(mean < 0):
        raise ContractError("mean must be >= 0")
    if np.any(z < 0) or np.any(z != np.floor(z)):
        raise ContractError("z must be a nonnegative integer")
    a = mean / d
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (gammaln(z + a) - gammaln(z + 1.0) - gammaln(a)
               + z * np.log(d) - (z + a) * np.log1p(d))
        # mean == 0: point mass at 0
        out = np.where(mean == 0, np.where(z == 0, 0.0, -np.inf), out)
    return out if out.ndim else float(out)


def negbin_sample(mean, overdisp, rng: np.random.Generator, size=None):
    """Draw negative binomial counts via the Gamma(mu/d, d)-Poisson mixture."""
    mean = np.asarray(mean, dtype=np.float64)
    d = float(overdisp)
    if d <= 0:
        raise ContractError("overdispersion must be > 0")
    lam = rng.gamma(np.maximum(mean, 0.0) / d, d, size=size)
    out = rng.poisson(lam)
    return out


def dcm_logpmf(counts, total, weights):
    """Log pmf of the Dirichlet compound multinomial (multivariate Polya).

    counts must sum to total; weights are the positive DCM parameters
    (lambda/d in the negative binomial decomposition).
    """
    counts = np.asarray(counts, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if counts.shape != weights.shape:
        raise ContractError("counts and weights must have matching shapes")
    if np.any(weights <= 0):
        raise ContractError("DCM weights must be strictly positive")
    if np.any(counts < 0) or np.any(counts != np.floor(counts)):
        raise ContractError("counts must be nonnegative integers")
    total = int(total)
    if total < 0 or int(counts.sum()) != total:
        raise ContractError(f"counts sum {int(counts.sum())} != total {total}")
    a = float(weights.sum())
    return float(gammaln(total + 1.0) - np.sum(gammaln(counts + 1.0))
                 + gammaln(a) - gammaln(total + a)
                 + np.sum(gammaln(counts + weights) - gammaln(weights)))


def hypergeom_logpmf(z, pop, pop_success, draws):
    """Log pmf of Hypergeometric(pop, pop_success, draws) at z successes.

    pop is the total number of births in the cluster, pop_success the total
    deaths, draws the number of sampled births, z the sampled deaths.
    Returns -inf outside the support.
    """
    z = np.asarray(z, dtype=np.float64)
    N = np.asarray(pop, dtype=np.float64)
    Y = np.asarray(pop_success, dtype=np.float64)
    n = np.asarray(draws, dtype=np.float64)
    if np.any(Y < 0) or np.any(Y > N) or np.any(n < 0) or np.any(n > N):
        raise ContractError("need 0 <= pop_success <= pop and 0 <= draws <= pop")
    lo = np.maximum(0.0, n - (N - Y))
    hi = np.minimum(n, Y)
    in_support = (z >= lo) & (z <= hi) & (z == np.floor(z))
    zc = np.where(in_support, z, 0.0)
    logp = (gammaln(Y + 1) - gammaln(zc + 1) - gammaln(Y - zc + 1)
            + gammaln(N - Y + 1) - gammaln(n - zc + 1) - gammaln(N - Y - n + zc + 1)
            - (gammaln(N + 1) - gammaln(n + 1) - gammaln(N - n + 1)))
    out = np.where(in_support, logp, -np.inf)
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore"):
        out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


def logit_normal_logdensity(r_hat, p, var_logit):
    """Normal log-density of logit(r_hat) with mean logit(p) and given variance.

    r_hat is fixed data, so no Jacobian term appears.  p in {0, 1} gives
    -inf (the benchmark likelihood vanishes at degenerate latent prevalence).
    """
    r_hat = float(r_hat)
    if not (0.0 < r_hat < 1.0):
        raise ContractError("r_hat must be in (0, 1)")
    if var_logit <= 0:
        raise ContractError("logit-scale variance must be > 0")
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1):
        raise ContractError("p must be in [0, 1]")
    with np.errstate(invalid="ignore"):
        delta = logit(r_hat) - logit(p)
        out = -0.5 * np.log(2.0 * np.pi * var_logit) - 0.5 * delta * delta / var_logit
        out = np.where((p <= 0.0) | (p >= 1.0), -np.inf, out)
    return out if out.ndim else float(out)


def exponential_logdensity(x, rate):
    """Log density of Exp(rate) on x >= 0."""
    x = np.asarray(x, dtype=np.float64)
    if rate <= 0:
        raise ContractError("rate must be > 0")
    if np.any(x < 0):
        raise ContractError("x must be >= 0")
    out = np.log(rate) - rate * x
    return out if out.ndim else float(out)


def pc_prior_rate(threshold: float, tail_prob: float) -> float:
    """Exponential rate lambda solving P(sigma > threshold) = tail_prob."""
    if threshold <= 0 or not (0.0 < tail_prob < 1.0):
        raise ContractError("need threshold > 0 and tail_prob in (0, 1)")
    return -np.log(tail_prob) / threshold


def pc_prior_logdensity(sigma, threshold: float = 1.0, tail_prob: float = 0.01):
    """Penalized-complexity prior on a standard deviation: Exp(rate) density."""
    return exponential_logdensity(sigma, pc_prior_rate(threshold, tail_prob))


@dataclass
class Bym2Params:
    """Inputs of the non-centered BYM2 construction b = sigma(sqrt(1-phi) v + sqrt(phi) u)."""

    sigma2: float
    phi: float
    v: np.ndarray
    u: np.ndarray
    structure: StructureMatrix

    def validate(self):
        if self.sigma2 < 0:
            raise ContractError("sigma2 must be >= 0")
        if not (0.0 <= self.phi <= 1.0):
            raise ContractError("phi must be in [0, 1]")
        if self.v.shape != self.u.shape or len(self.v) != self.structure.m2:
            raise ContractError("v and u must have length m2")


def bym2_combine(p: Bym2Params) -> np.ndarray:
    """Deterministic spatial effect b from the non-centered inputs.

    u is projected onto the block sum-to-zero constraint before combining,
    so the result is invariant to adding block constants to u.
    """
    p.validate()
    sigma = np.sqrt(p.sigma2)
    return sigma * (np.sqrt(1.0 - p.phi) * p.v + np.sqrt(p.phi) * p.structure.project(p.u))


def bym2_logdensity_and_grad(p: Bym2Params):
    """Log density of (v, u) and gradients w.r.t. (v, u, sigma2, phi).

    The non-centered construction places iid standard normals on v and the
    scaled ICAR density on the projected u (the rank-deficient normalizing
    constant is dropped; the 0.5 u'Q*u term is exact).  Neither density
    depends on sigma2 or phi, so those gradient components are zero; they are
    returned for interface completeness.
    """
    p.validate()
    st = p.structure
    up = st.project(p.u)
    qu = st.Q_star @ up
    logd = (-0.5 * float(p.v @ p.v) - 0.5 * len(p.v) * np.log(2.0 * np.pi)
            - 0.5 * float(up @ qu))
    grad_v = -p.v
    grad_u = -st.project(qu)
    return logd, grad_v, grad_u, 0.0, 0.0


def bym2_sample(structure: StructureMatrix, sigma2: float, phi: float,
                rng: np.random.Generator):
    """Draw (b, v, u) from the BYM2 model with covariance sigma2((1-phi)I + phi Qstar^-)."""
    if sigma2 < 0 or not (0.0 <= phi <= 1.0):
        raise ContractError("need sigma2 >= 0 and phi in [0, 1]")
    v = rng.standard_normal(structure.m2)
    u = structure.sample_u(rng)
    b = np.sqrt(sigma2) * (np.sqrt(1.0 - phi) * v + np.sqrt(phi) * u)
    return b, v, u
