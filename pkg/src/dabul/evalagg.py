"""Aggregation of posterior risks across strata and area levels, and the
four evaluation metrics of the simulation study.

Per replicate and model: admin1 discrepancy |aggregated posterior mean -
direct estimate|; admin2 absolute error |posterior mean - true prevalence|,
90% equal-tailed credible interval coverage of the truth, and coefficient
of variation.  Replicate-set summaries add percent decrease in discrepancy
of the direct-assisted model against the standard unit-level model, overall
and on the conditional subset where the unit-level discrepancy exceeds
0.001.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .dist import ContractError

INTERVAL_LO, INTERVAL_HI = 0.05, 0.95   # 90% equal-tailed credible interval
CONDITIONAL_CUTOFF = 0.001              # discrepancy subset threshold


def aggregate_urban_rural(risk_urban: np.ndarray, risk_rural: np.ndarray,
                          urban_frac: np.ndarray) -> np.ndarray:
    """Per-draw admin2 risks q r_U + (1-q) r_R.

    risk_urban/risk_rural have shape (draws, m2); urban_frac has shape (m2,).
    """
    q = np.asarray(urban_frac, dtype=np.float64)
    if np.any(q < 0) or np.any(q > 1) or np.any(~np.isfinite(q)):
        raise ContractError("urban fractions must be in [0, 1]")
    if risk_urban.shape != risk_rural.shape or risk_urban.shape[-1] != len(q):
        raise ContractError("risk draws and fractions must align on admin2 areas")
    return q * risk_urban + (1.0 - q) * risk_rural


def aggregate_to_admin1(admin2_draws: np.ndarray, weights: np.ndarray,
                        admin1_of_admin2: np.ndarray, m1: int) -> np.ndarray:
    """Population-weighted admin1 aggregation of per-draw admin2 risks.

    weights are birth shares within each admin1; they are renormalized per
    admin1 on entry (a deviation beyond 1e-6 earns a warning from the caller).
    """
    w = np.asarray(weights, dtype=np.float64)
    a1 = np.asarray(admin1_of_admin2)
    sums = np.bincount(a1, weights=w, minlength=m1)
    if np.any(sums <= 0):
        raise ContractError("every admin1 needs positive aggregation weight")
    w = w / sums[a1]
    out = np.empty((admin2_draws.shape[0], m1))
    for i in range(m1):
        sel = a1 == i
        out[:, i] = admin2_draws[:, sel] @ w[sel]
    return out


def weight_sum_deviation(weights: np.ndarray, admin1_of_admin2: np.ndarray,
                         m1: int) -> float:
    sums = np.bincount(np.asarray(admin1_of_admin2), weights=weights, minlength=m1)
    return float(np.max(np.abs(sums - 1.0)))


@dataclass
class ReplicateMetrics:
    """Long-format metric rows for one (replicate, model) fit."""

    replicate: int
    model: str
    discrepancy: np.ndarray      # (m1,)
    abs_error: np.ndarray        # (m2,)
    coverage: np.ndarray         # (m2,) in {0, 1}
    cv: np.ndarray               # (m2,)

    def rows(self):
        for i, v in enumerate(self.discrepancy):
            yield (self.replicate, self.model, "admin1", i + 1, "discrepancy", v)
        for j in range(len(self.abs_error)):
            yield (self.replicate, self.model, "admin2", j + 1, "abs_error",
                   self.abs_error[j])
            yield (self.replicate, self.model, "admin2", j + 1, "coverage",
                   self.coverage[j])
            yield (self.replicate, self.model, "admin2", j + 1, "cv", self.cv[j])


def compute_metrics(replicate: int, model: str,
                    admin2_draws: np.ndarray, admin1_draws: np.ndarray,
                    truth_admin2: np.ndarray, direct_r_hat: np.ndarray) -> ReplicateMetrics:
    """The four metrics from aggregated posterior draws.

    Point estimates are posterior means; intervals are equal-tailed 5%/95%
    quantiles.  Discrepancy compares admin1 aggregates to the direct
    estimates (nan where the direct estimate is missing).
    """
    if admin2_draws.shape[1] != len(truth_admin2):
        raise ContractError("misaligned admin2 areas between draws and truth")
    if admin1_draws.shape[1] != len(direct_r_hat):
        raise ContractError("misaligned admin1 areas between draws and direct estimates")
    mean2 = admin2_draws.mean(axis=0)
    sd2 = admin2_draws.std(axis=0, ddof=1)
    lo = np.quantile(admin2_draws, INTERVAL_LO, axis=0)
    hi = np.quantile(admin2_draws, INTERVAL_HI, axis=0)
    mean1 = admin1_draws.mean(axis=0)
    return ReplicateMetrics(
        replicate=replicate, model=model,
        discrepancy=np.abs(mean1 - direct_r_hat),
        abs_error=np.abs(mean2 - truth_admin2),
        coverage=((truth_admin2 >= lo) & (truth_admin2 <= hi)).astype(float),
        cv=sd2 / mean2,
    )


def metrics_frame(metrics: list[ReplicateMetrics]) -> pd.DataFrame:
    rows = [r for m in metrics for r in m.rows()]
    return pd.DataFrame(rows, columns=["replicate", "model", "area_level",
                                       "area_id", "metric", "value"])


@dataclass
class StudySummary:
    """Replicate-set summaries behind the study figures."""

    table: pd.DataFrame
    pct_decrease_by_area: pd.DataFrame
    n_excluded_zero_ul: int = 0
    n_conditional_cells: int = 0

    def value(self, model: str, metric: str, stat: str) -> float:
        t = self.table
        row = t[(t["model"] == model) & (t["metric"] == metric) & (t["stat"] == stat)]
        if row.empty:
            raise KeyError(f"no summary row for ({model}, {metric}, {stat})")
        return float(row["value"].iloc[0])


def summarize_metrics(long: pd.DataFrame, baseline: str = "ul",
                      assisted: str = "dabul") -> StudySummary:
    """Means/medians per model and metric, plus discrepancy percent-decrease.

    Percent decrease is computed per (replicate, admin1 area) cell as
    100 (disc_base - disc_assisted) / disc_base, excluding cells with zero
    baseline discrepancy (count reported).  Per-area medians across
    replicates are reported along with their distribution; the conditional
    rows repeat the computation on cells with baseline discrepancy > 0.001.
    """
    rows = []
    for (model, metric), grp in long.groupby(["model", "metric"]):
        v = grp["value"].to_numpy(dtype=float)
        v = v[np.isfinite(v)]
        rows.append((model, metric, "mean", float(np.mean(v)) if v.size else np.nan))
        rows.append((model, metric, "median", float(np.median(v)) if v.size else np.nan))
    for model in long["model"].unique():
        sub = long[(long["model"] == model) & (long["metric"] == "coverage")]
        per_area = sub.groupby("area_id")["value"].mean()
        rows.append((model, "coverage_by_area", "median",
                     float(per_area.median()) if len(per_area) else np.nan))
        sub = long[(long["model"] == model) & (long["metric"] == "cv")]
        per_area = sub.groupby("area_id")["value"].median()
        rows.append((model, "cv_by_area", "median",
                     float(per_area.median()) if len(per_area) else np.nan))

    disc = long[long["metric"] == "discrepancy"]
    base = disc[disc["model"] == baseline].set_index(["replicate", "area_id"])["value"]
    asst = disc[disc["model"] == assisted].set_index(["replicate", "area_id"])["value"]
    pct_rows = []
    n_excluded = 0
    n_cond = 0
    aligned = pd.DataFrame({"base": base, "assisted": asst}).dropna()
    nonzero = aligned[aligned["base"] > 0]
    n_excluded = len(aligned) - len(nonzero)
    pct = 100.0 * (nonzero["base"] - nonzero["assisted"]) / nonzero["base"]
    cond = nonzero["base"] > CONDITIONAL_CUTOFF
    n_cond = int(cond.sum())
    rows.append((assisted, "pct_decrease_discrepancy", "median",
                 float(pct.median()) if len(pct) else np.nan))
    rows.append((assisted, "pct_decrease_discrepancy", "mean",
                 float(pct.mean()) if len(pct) else np.nan))
    rows.append((assisted, "pct_decrease_discrepancy_conditional", "median",
                 float(pct[cond].median()) if n_cond else np.nan))
    rows.append((assisted, "pct_decrease_discrepancy_conditional", "mean",
                 float(pct[cond].mean()) if n_cond else np.nan))
    for area, grp in pct.groupby(level="area_id"):
        pct_rows.append((area, float(grp.median()), float(grp.mean()), len(grp)))
    table = pd.DataFrame(rows, columns=["model", "metric", "stat", "value"])
    by_area = pd.DataFrame(pct_rows, columns=["area_id", "pct_decrease_median",
                                              "pct_decrease_mean", "n_replicates"])
    return StudySummary(table=table, pct_decrease_by_area=by_area,
                        n_excluded_zero_ul=n_excluded, n_conditional_cells=n_cond)
