"""Synthetic populations, true risk surfaces, outcomes, and the two-stage
stratified cluster sampling used by the simulation study.

A population is a frame of clusters nested in (admin1, admin2, stratum)
with total births N_c and total deaths Y_c.  Surveys are drawn by
probability-proportional-to-size systematic sampling of clusters within
each admin1 x stratum, then simple random sampling of births within each
sampled cluster; deaths among sampled births are hypergeometric.  Design
weights are (1 / cluster inclusion probability) * (N_c / n_c).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import dist
from .geo import Geography, StructureMatrix, build_icar_structure

logger = logging.getLogger(__name__)

URBAN, RURAL = 0, 1
STRATUM_NAMES = {URBAN: "urban", RURAL: "rural"}
STRATUM_CODES = {"urban": URBAN, "rural": RURAL}


@dataclass
class SimulationSetting:
    """True parameters and design knobs for one simulation scenario."""

    name: str
    sigma2: float
    phi: float
    urban_frac: float          # share of urban clusters sampled per admin1
    rural_frac: float
    d_true: float = 0.25
    alpha_u: float = float(np.log(0.02))
    alpha_r: float = float(np.log(0.025))
    beta: tuple = (-0.2, -0.1, -0.05, -0.025, 0.025, 0.05, 0.1, 0.5)
    urban_clusters_mean: float = 700.0
    urban_clusters_sd: float = 100.0
    rural_clusters_mean: float = 800.0
    rural_clusters_sd: float = 100.0
    urban_births_mean: float = 100.0
    urban_births_sd: float = 10.0
    rural_births_mean: float = 125.0
    rural_births_sd: float = 10.0
    # sampled births per cluster; "N(15, 4)" is read as variance 4 (sd 2),
    # consistent with the squared-notation convention of the cluster counts
    urban_samp_births_mean: float = 15.0
    urban_samp_births_sd: float = 2.0
    rural_samp_births_mean: float = 20.0
    rural_samp_births_sd: float = 2.0

    def beta_for(self, m1: int) -> np.ndarray:
        reps = -(-m1 // len(self.beta))
        return np.asarray((self.beta * reps)[:m1], dtype=np.float64)


SETTINGS = {
    "1": SimulationSetting(name="1", sigma2=0.15 ** 2, phi=0.25, urban_frac=0.08, rural_frac=0.05),
    "2": SimulationSetting(name="2", sigma2=0.05 ** 2, phi=0.25, urban_frac=0.08, rural_frac=0.05),
    "3": SimulationSetting(name="3", sigma2=0.05 ** 2, phi=0.7, urban_frac=0.08, rural_frac=0.05),
    "1a": SimulationSetting(name="1a", sigma2=0.15 ** 2, phi=0.25, urban_frac=0.05, rural_frac=0.03),
}


def get_setting(name: str, **overrides) -> SimulationSetting:
    if name not in SETTINGS:
        raise KeyError(f"unknown simulation setting {name!r}; known: {sorted(SETTINGS)}")
    return replace(SETTINGS[name], **overrides) if overrides else SETTINGS[name]


@dataclass
class PopulationFrame:
    """Full synthetic population of clusters."""

    cluster_id: np.ndarray   # 1..C
    admin1: np.ndarray       # 1-based
    admin2: np.ndarray       # 1-based
    stratum: np.ndarray      # 0 urban, 1 rural
    births: np.ndarray       # N_c
    deaths: np.ndarray       # Y_c (zeros until outcomes are drawn)
    m1: int
    m2: int

    def validate(self):
        if np.any(self.births < 1):
            raise ValueError("every cluster needs births >= 1")
        if np.any((self.deaths < 0) | (self.deaths > self.births)):
            raise ValueError("need 0 <= deaths <= births")
        if np.any((self.admin1 < 1) | (self.admin1 > self.m1)):
            raise ValueError("invalid admin1 id")
        if np.any((self.admin2 < 1) | (self.admin2 > self.m2)):
            raise ValueError("invalid admin2 id")

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_id)

    def births_admin1(self) -> np.ndarray:
        return np.bincount(self.admin1 - 1, weights=self.births, minlength=self.m1)

    def births_admin2(self) -> np.ndarray:
        return np.bincount(self.admin2 - 1, weights=self.births, minlength=self.m2)

    def urban_fraction_admin2(self) -> np.ndarray:
        """Share of births in urban clusters per admin2 area."""
        urban = np.bincount(self.admin2 - 1,
                            weights=self.births * (self.stratum == URBAN),
                            minlength=self.m2)
        total = self.births_admin2()
        return np.divide(urban, total, out=np.zeros(self.m2), where=total > 0)

    def admin1_weights(self, admin1_of_admin2: np.ndarray) -> np.ndarray:
        """Birth shares of admin2 areas within their admin1 (sum to 1 per admin1)."""
        n2 = self.births_admin2()
        n1 = np.bincount(admin1_of_admin2, weights=n2, minlength=self.m1)
        return n2 / n1[admin1_of_admin2]

    def true_prevalence(self, admin1_of_admin2: np.ndarray):
        """Realized (admin1, admin2) population prevalences Y+/N."""
        d2 = np.bincount(self.admin2 - 1, weights=self.deaths, minlength=self.m2)
        n2 = self.births_admin2()
        d1 = np.bincount(admin1_of_admin2, weights=d2, minlength=self.m1)
        n1 = np.bincount(admin1_of_admin2, weights=n2, minlength=self.m1)
        return d1 / n1, d2 / n2


@dataclass
class SurveyData:
    """One realized survey over a population frame (full-length arrays)."""

    cluster_id: np.ndarray
    gamma: np.ndarray        # sampled indicator
    samp_births: np.ndarray  # n_c (0 when not sampled)
    samp_deaths: np.ndarray  # Z_c
    weight: np.ndarray       # design weight, 0 when not sampled
    admin1: np.ndarray
    admin2: np.ndarray
    stratum: np.ndarray

    def validate(self, population: PopulationFrame):
        off = ~self.gamma.astype(bool)
        if np.any(self.samp_births[off] != 0) or np.any(self.samp_deaths[off] != 0):
            raise ValueError("unsampled clusters must have n_c = Z_c = 0")
        if np.any(self.samp_deaths > self.samp_births):
            raise ValueError("Z_c must not exceed n_c")
        if np.any(self.samp_births > population.births):
            raise ValueError("n_c must not exceed N_c")


def _rounded_normal(rng, mean, sd, size=None, floor=1):
    x = np.rint(rng.normal(mean, sd, size=size)).astype(np.int64)
    return np.maximum(x, floor)


def synthesize_population(setting: SimulationSetting, geography: Geography,
                          seed: int) -> PopulationFrame:
    """Cluster frame with urban/rural cluster counts and births per cluster.

    Per admin1 the urban and rural cluster totals are rounded normal draws;
    clusters are spread across the admin2 areas of their admin1 so sibling
    areas differ by at most one cluster (remainders rotate cyclically from a
    seeded random offset, urban and rural offsets chained to avoid piling
    both remainders on the same areas).
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    rows_admin1, rows_admin2, rows_stratum, rows_births = [], [], [], []
    for i in range(geography.m1):
        areas = geography.admin2_in_admin1(i) + 1
        k = len(areas)
        offset = int(rng.integers(k))
        for stratum, (cm, cs, bm, bs) in (
                (URBAN, (setting.urban_clusters_mean, setting.urban_clusters_sd,
                         setting.urban_births_mean, setting.urban_births_sd)),
                (RURAL, (setting.rural_clusters_mean, setting.rural_clusters_sd,
                         setting.rural_births_mean, setting.rural_births_sd))):
            total = int(_rounded_normal(rng, cm, cs))
            per_area = np.full(k, total // k, dtype=np.int64)
            rem = total % k
            per_area[(offset + np.arange(rem)) % k] += 1
            offset = (offset + rem) % k
            for pos, area in enumerate(areas):
                cnt = int(per_area[pos])
                if cnt == 0:
                    continue
                rows_admin1.append(np.full(cnt, i + 1, dtype=np.int64))
                rows_admin2.append(np.full(cnt, area, dtype=np.int64))
                rows_stratum.append(np.full(cnt, stratum, dtype=np.int64))
                rows_births.append(_rounded_normal(rng, bm, bs, size=cnt))
    admin1 = np.concatenate(rows_admin1)
    admin2 = np.concatenate(rows_admin2)
    stratum = np.concatenate(rows_stratum)
    births = np.concatenate(rows_births)
    frame = PopulationFrame(cluster_id=np.arange(1, len(admin1) + 1, dtype=np.int64),
                            admin1=admin1, admin2=admin2, stratum=stratum,
                            births=births, deaths=np.zeros(len(admin1), dtype=np.int64),
                            m1=geography.m1, m2=geography.m2)
    frame.validate()
    return frame


def draw_risk_surface(setting: SimulationSetting, geography: Geography,
                      population: PopulationFrame, seed: int,
                      structure: StructureMatrix | None = None):
    """True per-cluster rates from the stratified nested regression.

    The spatial effect is one BYM2 draw on the nested (per-admin1 constrained)
    structure; the same surface is reused across survey replicates.  Returns
    (rates per cluster, b, expected prevalence per admin1, per admin2).
    """
    if structure is None:
        structure = build_icar_structure(geography, nesting="per_admin1")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    b, _, _ = dist.bym2_sample(structure, setting.sigma2, setting.phi, rng)
    beta = setting.beta_for(geography.m1)
    alpha = np.where(population.stratum == URBAN, setting.alpha_u, setting.alpha_r)
    log_r = alpha + beta[population.admin1 - 1] + b[population.admin2 - 1]
    rates = np.exp(log_r)
    mu2 = np.bincount(population.admin2 - 1, weights=population.births * rates,
                      minlength=geography.m2)
    n2 = population.births_admin2()
    mu1 = np.bincount(geography.admin1_of, weights=mu2, minlength=geography.m1)
    n1 = np.bincount(geography.admin1_of, weights=n2, minlength=geography.m1)
    return rates, b, mu1 / n1, mu2 / n2


def draw_outcomes(population: PopulationFrame, rates: np.ndarray, d_true: float,
                  seed: int) -> PopulationFrame:
    """Fill Y_c ~ NegBin(N_c r_c, d), clamped at N_c (clamping is logged)."""
    if np.any(rates < 0):
        raise ValueError("rates must be nonnegative")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    deaths = dist.negbin_sample(population.births * rates, d_true, rng)
    over = deaths > population.births
    if np.any(over):
        logger.warning("clamped %d of %d cluster death counts at N_c",
                       int(over.sum()), population.n_clusters)
        deaths = np.minimum(deaths, population.births)
    out = replace(population, deaths=deaths.astype(np.int64))
    out.validate()
    return out


def _systematic_pps(sizes: np.ndarray, n_take: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Systematic PPS on a randomly permuted list.

    Returns (selected indices, inclusion probabilities of the selected).
    Units with size >= total/n_take are taken with certainty first.
    """
    n = len(sizes)
    if n_take >= n:
        return np.arange(n), np.ones(n)
    certain: list[int] = []
    rest = np.arange(n)
    while True:
        total = sizes[rest].sum()
        k = n_take - len(certain)
        if k <= 0:
            return np.asarray(certain, dtype=np.int64), np.ones(len(certain))
        big = rest[sizes[rest] * k >= total]
        if big.size == 0:
            break
        certain.extend(int(i) for i in big)
        rest = rest[~np.isin(rest, big)]
    k = n_take - len(certain)
    perm = rng.permutation(rest)
    csum = np.cumsum(sizes[perm].astype(np.float64))
    step = csum[-1] / k
    points = rng.uniform(0.0, step) + step * np.arange(k)
    pos = np.minimum(np.searchsorted(csum, points, side="right"), len(perm) - 1)
    chosen = perm[pos]
    pi = sizes[chosen] * k / csum[-1]
    idx = np.concatenate([np.asarray(certain, dtype=np.int64), chosen])
    probs = np.concatenate([np.ones(len(certain)), pi])
    return idx, probs


def sample_survey(population: PopulationFrame, setting: SimulationSetting,
                  seed: int) -> SurveyData:
    """Two-stage stratified cluster sample of the population.

    Stage one samples max(1, round(frac * K)) clusters per admin1 x stratum
    with probability proportional to births (systematic PPS on a permuted
    list); stage two samples n_c births uniformly without replacement, so
    sampled deaths are hypergeometric.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    C = population.n_clusters
    gamma = np.zeros(C, dtype=np.int64)
    n_c = np.zeros(C, dtype=np.int64)
    z_c = np.zeros(C, dtype=np.int64)
    weight = np.zeros(C)
    for i in range(1, population.m1 + 1):
        for stratum in (URBAN, RURAL):
            in_stratum = np.flatnonzero((population.admin1 == i)
                                        & (population.stratum == stratum))
            if in_stratum.size == 0:
                logger.warning("admin1 %d has no %s clusters; stratum skipped",
                               i, STRATUM_NAMES[stratum])
                continue
            frac = setting.urban_frac if stratum == URBAN else setting.rural_frac
            n_take = max(1, int(np.rint(frac * in_stratum.size)))
            n_take = min(n_take, in_stratum.size)
            sizes = population.births[in_stratum]
            sel, pi = _systematic_pps(sizes, n_take, rng)
            chosen = in_stratum[sel]
            mean, sd = ((setting.urban_samp_births_mean, setting.urban_samp_births_sd)
                        if stratum == URBAN else
                        (setting.rural_samp_births_mean, setting.rural_samp_births_sd))
            take_births = _rounded_normal(rng, mean, sd, size=len(chosen))
            take_births = np.minimum(take_births, population.births[chosen])
            deaths = population.deaths[chosen]
            z = rng.hypergeometric(deaths, population.births[chosen] - deaths,
                                   take_births)
            gamma[chosen] = 1
            n_c[chosen] = take_births
            z_c[chosen] = z
            weight[chosen] = (1.0 / pi) * (population.births[chosen] / take_births)
    survey = SurveyData(cluster_id=population.cluster_id.copy(), gamma=gamma,
                        samp_births=n_c, samp_deaths=z_c, weight=weight,
                        admin1=population.admin1.copy(), admin2=population.admin2.copy(),
                        stratum=population.stratum.copy())
    survey.validate(population)
    return survey


# ---------------------------------------------------------------------------
# Serialization (delimited text with headers)
# ---------------------------------------------------------------------------

POPULATION_HEADER = "cluster_id,admin1,admin2,stratum,N,Y"
SURVEY_HEADER = "cluster_id,gamma,n,Z,weight"


def save_population(frame: PopulationFrame, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(POPULATION_HEADER + "\n")
        for k in range(frame.n_clusters):
            fh.write(f"{frame.cluster_id[k]},{frame.admin1[k]},{frame.admin2[k]},"
                     f"{STRATUM_NAMES[int(frame.stratum[k])]},"
                     f"{frame.births[k]},{frame.deaths[k]}\n")


def load_population(path, geography: Geography) -> PopulationFrame:
    raw = np.genfromtxt(path, delimiter=",", names=True, dtype=None, encoding="utf-8")
    raw = np.atleast_1d(raw)
    stratum = np.array([STRATUM_CODES[s] for s in raw["stratum"]], dtype=np.int64)
    frame = PopulationFrame(cluster_id=raw["cluster_id"].astype(np.int64),
                            admin1=raw["admin1"].astype(np.int64),
                            admin2=raw["admin2"].astype(np.int64),
                            stratum=stratum,
                            births=raw["N"].astype(np.int64),
                            deaths=raw["Y"].astype(np.int64),
                            m1=geography.m1, m2=geography.m2)
    frame.validate()
    return frame


def save_survey(survey: SurveyData, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(SURVEY_HEADER + "\n")
        for k in np.flatnonzero(survey.gamma):
            fh.write(f"{survey.cluster_id[k]},1,{survey.samp_births[k]},"
                     f"{survey.samp_deaths[k]},{survey.weight[k]:.12g}\n")


def load_survey(path, population: PopulationFrame) -> SurveyData:
    raw = np.genfromtxt(path, delimiter=",", names=True, dtype=None, encoding="utf-8")
    raw = np.atleast_1d(raw)
    index = {int(cid): k for k, cid in enumerate(population.cluster_id)}
    C = population.n_clusters
    gamma = np.zeros(C, dtype=np.int64)
    n_c = np.zeros(C, dtype=np.int64)
    z_c = np.zeros(C, dtype=np.int64)
    weight = np.zeros(C)
    for row in raw:
        k = index[int(row["cluster_id"])]
        gamma[k] = int(row["gamma"])
        n_c[k] = int(row["n"])
        z_c[k] = int(row["Z"])
        weight[k] = float(row["weight"])
    survey = SurveyData(cluster_id=population.cluster_id.copy(), gamma=gamma,
                        samp_births=n_c, samp_deaths=z_c, weight=weight,
                        admin1=population.admin1.copy(),
                        admin2=population.admin2.copy(),
                        stratum=population.stratum.copy())
    survey.validate(population)
    return survey
