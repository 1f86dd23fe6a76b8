"""Design-based direct estimation at the admin1 level.

Hajek prevalence estimates r_hat = sum(w Z) / sum(w n) with a stratified,
with-replacement-PSU linearization variance (the default of standard survey
software), mapped to the logit scale by the delta method:
V_logit = V(r_hat) / (r_hat (1 - r_hat))^2.

Variance strata are admin1 x urban/rural, mirroring the sampling design.
Single-cluster strata are collapsed into the other stratum of the same
admin1 with a warning.  Areas where the variance is undefined or zero, or
where r_hat is 0 or 1, are flagged degenerate; the model drops the
benchmark term for those areas.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dist import ContractError
from .survey import SurveyData

logger = logging.getLogger(__name__)

DIRECT_HEADER = "admin1,r_hat,V_logit,n_clusters,n_births,n_deaths,degenerate_flag"


@dataclass
class DirectEstimates:
    """Per-admin1 Hajek estimates with logit-scale design variances."""

    r_hat: np.ndarray
    v_logit: np.ndarray      # nan where degenerate
    n_clusters: np.ndarray
    n_births: np.ndarray
    n_deaths: np.ndarray
    degenerate: np.ndarray   # bool

    @property
    def m1(self) -> int:
        return len(self.r_hat)

    def usable_mask(self) -> np.ndarray:
        return (~self.degenerate & np.isfinite(self.r_hat) & np.isfinite(self.v_logit)
                & (self.v_logit > 0))

    def validate(self):
        ok = self.usable_mask()
        r = self.r_hat[ok]
        if np.any((r <= 0) | (r >= 1)):
            raise ContractError("usable r_hat must lie strictly inside (0, 1)")


def hajek_estimate(data: SurveyData, admin1: int) -> float:
    """Hajek ratio over the sampled clusters of one admin1 area (1-based id)."""
    sel = (data.admin1 == admin1) & (data.gamma == 1)
    if not np.any(sel):
        raise ContractError(f"no sampled clusters in admin1 {admin1}")
    denom = float(np.sum(data.weight[sel] * data.samp_births[sel]))
    if denom <= 0:
        raise ContractError(f"zero weighted birth total in admin1 {admin1}")
    return float(np.sum(data.weight[sel] * data.samp_deaths[sel])) / denom


def design_variance(data: SurveyData, admin1: int) -> float:
    """Stratified with-replacement linearization variance of the Hajek ratio.

    Returns nan when no stratum has two or more clusters (after collapsing
    single-cluster strata into the other stratum of the admin1 area).
    """
    sel = np.flatnonzero((data.admin1 == admin1) & (data.gamma == 1))
    if sel.size == 0:
        raise ContractError(f"no sampled clusters in admin1 {admin1}")
    w = data.weight[sel]
    n = data.samp_births[sel]
    z = data.samp_deaths[sel]
    strata = data.stratum[sel].copy()
    r_hat = float(np.sum(w * z) / np.sum(w * n))
    resid = w * (z - r_hat * n) / float(np.sum(w * n))
    labels, counts = np.unique(strata, return_counts=True)
    if len(labels) > 1 and np.any(counts == 1):
        lone = labels[counts == 1]
        logger.warning("admin1 %d: collapsing single-cluster strata %s", admin1,
                       list(lone))
        strata = np.zeros_like(strata)  # collapse everything into one stratum
        labels, counts = np.unique(strata, return_counts=True)
    var = 0.0
    any_ok = False
    for h in labels:
        in_h = strata == h
        m_h = int(np.sum(in_h))
        if m_h < 2:
            continue
        any_ok = True
        u = resid[in_h]
        var += m_h / (m_h - 1.0) * float(np.sum((u - u.mean()) ** 2))
    return var if any_ok else float("nan")


def design_variance_logit(data: SurveyData, admin1: int) -> float:
    """Delta-method logit-scale variance; nan for degenerate areas."""
    r_hat = hajek_estimate(data, admin1)
    if r_hat <= 0.0 or r_hat >= 1.0:
        return float("nan")
    v = design_variance(data, admin1)
    if not np.isfinite(v) or v <= 0.0:
        return float("nan")
    return v / (r_hat * (1.0 - r_hat)) ** 2


def compute_direct_estimates(data: SurveyData, m1: int) -> DirectEstimates:
    """Hajek estimates and logit variances for all admin1 areas."""
    r_hat = np.full(m1, np.nan)
    v_logit = np.full(m1, np.nan)
    n_clusters = np.zeros(m1, dtype=np.int64)
    n_births = np.zeros(m1, dtype=np.int64)
    n_deaths = np.zeros(m1, dtype=np.int64)
    degenerate = np.zeros(m1, dtype=bool)
    for i in range(1, m1 + 1):
        sel = (data.admin1 == i) & (data.gamma == 1)
        n_clusters[i - 1] = int(np.sum(sel))
        n_births[i - 1] = int(np.sum(data.samp_births[sel]))
        n_deaths[i - 1] = int(np.sum(data.samp_deaths[sel]))
        if n_clusters[i - 1] == 0:
            degenerate[i - 1] = True
            logger.warning("admin1 %d has no sampled clusters; direct estimate missing", i)
            continue
        r = hajek_estimate(data, i)
        r_hat[i - 1] = r
        if r <= 0.0 or r >= 1.0:
            degenerate[i - 1] = True
            continue
        v = design_variance_logit(data, i)
        v_logit[i - 1] = v
        degenerate[i - 1] = not np.isfinite(v)
    out = DirectEstimates(r_hat=r_hat, v_logit=v_logit, n_clusters=n_clusters,
                          n_births=n_births, n_deaths=n_deaths, degenerate=degenerate)
    out.validate()
    return out


def save_direct(est: DirectEstimates, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(DIRECT_HEADER + "\n")
        for i in range(est.m1):
            fh.write(f"{i + 1},{est.r_hat[i]:.12g},{est.v_logit[i]:.12g},"
                     f"{est.n_clusters[i]},{est.n_births[i]},{est.n_deaths[i]},"
                     f"{int(est.degenerate[i])}\n")


def load_direct(path) -> DirectEstimates:
    raw = np.genfromtxt(path, delimiter=",", names=True, dtype=None, encoding="utf-8")
    raw = np.atleast_1d(raw)
    order = np.argsort(raw["admin1"])
    est = DirectEstimates(
        r_hat=raw["r_hat"][order].astype(float),
        v_logit=raw["V_logit"][order].astype(float),
        n_clusters=raw["n_clusters"][order].astype(np.int64),
        n_births=raw["n_births"][order].astype(np.int64),
        n_deaths=raw["n_deaths"][order].astype(np.int64),
        degenerate=raw["degenerate_flag"][order].astype(bool),
    )
    est.validate()
    return est
