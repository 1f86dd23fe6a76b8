"""Batch pipeline: simulate populations and survey replicates, fit the model
variants, evaluate metrics, and report summaries.

Every command writes a manifest echoing the effective configuration, the
master seed, and the produced files; re-running a command with
``--config <manifest.yaml>`` reproduces its data outputs bit-exactly.
"""

from __future__ import annotations

import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path

import click
import numpy as np
import pandas as pd

from . import evalagg, store
from .direct import compute_direct_estimates, load_direct, save_direct
from .geo import Geography, build_icar_structure, generate_synthetic_geography, \
    load_geography, save_geography
from .model import DABUL, EXACT, UL, VARIANTS, ModelConfig, assemble_variant, \
    build_model_data
from .sampler import SamplerConfig, diagnostics, run_variant
from .survey import SETTINGS, get_setting, load_population, load_survey, \
    sample_survey, save_population, save_survey, synthesize_population, \
    draw_outcomes, draw_risk_surface

VARIANT_ID = {UL: 0, DABUL: 1, EXACT: 2}
GEOMETRY_SEED = 0  # lattice layout is part of the study design, not the randomness


def _fail(message: str) -> "NoReturn":  # noqa: F821
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _child_seed(master: int, *key: int) -> int:
    return int(np.random.SeedSequence(master, spawn_key=tuple(key)).generate_state(1)[0])


def _resolve_geography(spec: str) -> Geography:
    if spec.startswith("lattice:"):
        shape = spec.split(":", 1)[1]
        try:
            m1, per = (int(x) for x in shape.lower().split("x"))
        except ValueError:
            _fail(f"bad lattice spec {spec!r}; expected lattice:<m1>x<admin2_per_admin1>")
        return generate_synthetic_geography(m1, per, seed=GEOMETRY_SEED)
    if not Path(spec).exists():
        _fail(f"geography file {spec!r} not found")
    return load_geography(spec)


def _merge_config(ctx: click.Context, config_path: str | None, values: dict) -> dict:
    """Fill parameters the user did not pass from a saved manifest."""
    if not config_path:
        return values
    saved = store.read_manifest(config_path).get("args", {})
    merged = dict(values)
    for name, value in values.items():
        src = ctx.get_parameter_source(name)
        if src is not None and src.name != "COMMANDLINE" and name in saved:
            merged[name] = saved[name]
    return merged


@click.group()
def main():
    """Small area estimation engine for rare-event prevalence."""


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

TRUTH_HEADER = "level,area_id,births,deaths,prevalence,expected_risk"


def _write_truth(path, population, geography, expected1, expected2):
    prev1, prev2 = population.true_prevalence(geography.admin1_of)
    n1 = population.births_admin1()
    n2 = population.births_admin2()
    d1 = np.round(prev1 * n1).astype(np.int64)
    d2 = np.round(prev2 * n2).astype(np.int64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(TRUTH_HEADER + "\n")
        for i in range(geography.m1):
            fh.write(f"admin1,{i + 1},{int(n1[i])},{d1[i]},{prev1[i]:.12g},"
                     f"{expected1[i]:.12g}\n")
        for j in range(geography.m2):
            fh.write(f"admin2,{j + 1},{int(n2[j])},{d2[j]},{prev2[j]:.12g},"
                     f"{expected2[j]:.12g}\n")


def _read_truth(path):
    raw = np.genfromtxt(path, delimiter=",", names=True, dtype=None, encoding="utf-8")
    raw = np.atleast_1d(raw)
    out = {}
    for level in ("admin1", "admin2"):
        sel = raw["level"] == level
        order = np.argsort(raw["area_id"][sel])
        out[level] = raw["prevalence"][sel][order].astype(float)
    return out["admin1"], out["admin2"]


@main.command()
@click.option("--setting", default="1", show_default=True,
              type=click.Choice(sorted(SETTINGS)), help="Simulation setting preset.")
@click.option("--geography", "geography_spec", default="lattice:4x20", show_default=True,
              help="lattice:<m1>x<k> or a path to an adjacency file.")
@click.option("--replicates", default=1, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path(exists=True),
              help="Manifest to take defaults from.")
@click.pass_context
def simulate(ctx, setting, geography_spec, replicates, seed, out_dir, config_path):
    """Synthesize a population, one risk surface, and replicate surveys."""
    args = _merge_config(ctx, config_path, {
        "setting": setting, "geography_spec": geography_spec,
        "replicates": replicates, "seed": seed, "out_dir": out_dir})
    watch = store.Stopwatch()
    out = Path(args["out_dir"])
    (out / "surveys").mkdir(parents=True, exist_ok=True)
    g = _resolve_geography(args["geography_spec"])
    cfg = get_setting(args["setting"])
    master = int(args["seed"])
    population = synthesize_population(cfg, g, master)
    rates, _, expected1, expected2 = draw_risk_surface(cfg, g, population, master)
    population = draw_outcomes(population, rates, cfg.d_true, master)

    save_geography(g, out / "geography.txt")
    save_population(population, out / "population.csv")
    with open(out / "cluster_risks.csv", "w", encoding="utf-8") as fh:
        fh.write("cluster_id,r_true\n")
        for cid, r in zip(population.cluster_id, rates):
            fh.write(f"{cid},{r:.12g}\n")
    _write_truth(out / "truth.csv", population, g, expected1, expected2)
    outputs = ["geography.txt", "population.csv", "cluster_risks.csv", "truth.csv"]
    for rep in range(1, int(args["replicates"]) + 1):
        sd = sample_survey(population, cfg, _child_seed(master, 3, rep))
        name = f"surveys/rep{rep:04d}.csv"
        save_survey(sd, out / name)
        outputs.append(name)
    store.write_manifest(out / "manifest.yaml", "simulate", args, master, outputs,
                         watch.elapsed(),
                         extra={"m1": g.m1, "m2": g.m2,
                                "n_clusters": population.n_clusters})
    click.echo(f"simulate: wrote {len(outputs)} files to {out}")


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

_DATA_CACHE: dict = {}


def _load_data_dir(data_dir: str):
    if data_dir not in _DATA_CACHE:
        d = Path(data_dir)
        g = load_geography(d / "geography.txt")
        population = load_population(d / "population.csv", g)
        structure = build_icar_structure(g, nesting="per_admin1")
        _DATA_CACHE[data_dir] = (g, population, structure)
    return _DATA_CACHE[data_dir]


def _fit_job(data_dir: str, survey_path: str, rep: int, variant: str, out_dir: str,
             chains: int, iters: int, warmup: int, seed: int,
             direct_file: str | None):
    g, population, structure = _load_data_dir(data_dir)
    sd = load_survey(survey_path, population)
    rep_dir = Path(out_dir) / f"rep{rep:04d}"
    rep_dir.mkdir(parents=True, exist_ok=True)
    if direct_file:
        est = load_direct(direct_file)
    else:
        est = compute_direct_estimates(sd, g.m1)
    direct_path = rep_dir / "direct.csv"
    if not direct_path.exists():
        save_direct(est, direct_path)
    data = build_model_data(population, sd, g)
    bundle = assemble_variant(ModelConfig(variant=variant), data, est, g, structure)
    scfg = SamplerConfig(iters=iters, warmup=warmup, chains=chains, seed=seed)
    draws = run_variant(bundle, scfg, spawn_key=(rep, VARIANT_ID[variant]))
    vdir = rep_dir / variant
    store.save_draws(draws, vdir)
    core = [c for c in draws.columns
            if not (c.startswith("risk_") or c.startswith("ysamp_"))]
    store.save_diagnostics(diagnostics(draws, core), vdir / "diagnostics.csv")
    return rep, variant, draws.wall_time_s, draws.n_divergent


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--variants", default="ul,dabul,exact", show_default=True)
@click.option("--chains", default=4, show_default=True, type=int)
@click.option("--iters", default=1000, show_default=True, type=int,
              help="Post-warmup draws per chain.")
@click.option("--warmup", default=1000, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--replicates", default=None, type=int,
              help="Fit only the first N replicates.")
@click.option("--direct-file", default=None, type=click.Path(exists=True),
              help="Ingest direct estimates instead of computing them "
                   "(single replicate only).")
@click.option("--workers", default=None, type=int)
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.pass_context
def fit(ctx, data_dir, out_dir, variants, chains, iters, warmup, seed, replicates,
        direct_file, workers, config_path):
    """Fit requested variants to every survey replicate."""
    args = _merge_config(ctx, config_path, {
        "data_dir": data_dir, "out_dir": out_dir, "variants": variants,
        "chains": chains, "iters": iters, "warmup": warmup, "seed": seed,
        "replicates": replicates, "direct_file": direct_file})
    watch = store.Stopwatch()
    variant_list = [v.strip() for v in str(args["variants"]).split(",") if v.strip()]
    for v in variant_list:
        if v not in VARIANTS:
            _fail(f"unknown variant {v!r}; known: {list(VARIANTS)}")
    survey_paths = sorted(Path(args["data_dir"]).glob("surveys/rep*.csv"))
    if args["replicates"] is not None:
        survey_paths = survey_paths[: int(args["replicates"])]
    if not survey_paths:
        _fail(f"no survey files under {args['data_dir']}/surveys")
    if args["direct_file"] and len(survey_paths) > 1:
        _fail("--direct-file applies to a single replicate only")
    out = Path(args["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for path in survey_paths:
        rep = int(path.stem.replace("rep", ""))
        for v in variant_list:
            jobs.append((str(args["data_dir"]), str(path), rep, v, str(out),
                         int(args["chains"]), int(args["iters"]), int(args["warmup"]),
                         int(args["seed"]), args["direct_file"]))
    n_workers = workers or os.cpu_count() or 1
    failures, statuses = [], []
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            futures = {pool.submit(_fit_job, *job): job for job in jobs}
            for fut in as_completed(futures):
                job = futures[fut]
                try:
                    rep, v, wall, ndiv = fut.result()
                    statuses.append({"replicate": rep, "variant": v, "status": "ok",
                                     "wall_time_s": round(wall, 2),
                                     "n_divergent": ndiv})
                except Exception as exc:  # report, keep the batch going
                    failures.append((job[2], job[3], repr(exc)))
                    statuses.append({"replicate": job[2], "variant": job[3],
                                     "status": f"failed: {exc!r}"})
    else:
        for job in jobs:
            try:
                rep, v, wall, ndiv = _fit_job(*job)
                statuses.append({"replicate": rep, "variant": v, "status": "ok",
                                 "wall_time_s": round(wall, 2), "n_divergent": ndiv})
            except Exception as exc:
                traceback.print_exc()
                failures.append((job[2], job[3], repr(exc)))
                statuses.append({"replicate": job[2], "variant": job[3],
                                 "status": f"failed: {exc!r}"})
    statuses.sort(key=lambda s: (s["replicate"], s["variant"]))
    store.write_manifest(out / "manifest.yaml", "fit", args, int(args["seed"]),
                         [f"rep{int(p.stem.replace('rep', '')):04d}" for p in survey_paths],
                         watch.elapsed(), extra={"jobs": statuses})
    if failures:
        _fail(f"{len(failures)} of {len(jobs)} fit jobs failed; first: "
              f"rep{failures[0][0]:04d}/{failures[0][1]}: {failures[0][2]}")
    click.echo(f"fit: {len(jobs)} jobs ok in {watch.elapsed():.1f}s -> {out}")


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _aggregate_fit(draws, q, weights, admin1_of, m1, m2):
    ru = draws.matrix([f"risk_u_{j + 1}" for j in range(m2)])
    rr = draws.matrix([f"risk_r_{j + 1}" for j in range(m2)])
    admin2_draws = evalagg.aggregate_urban_rural(ru, rr, q)
    admin1_draws = evalagg.aggregate_to_admin1(admin2_draws, weights, admin1_of, m1)
    return admin2_draws, admin1_draws


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--fits", "fits_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.pass_context
def evaluate(ctx, data_dir, fits_dir, out_dir, config_path):
    """Metrics per replicate and model, plus study summaries."""
    args = _merge_config(ctx, config_path, {
        "data_dir": data_dir, "fits_dir": fits_dir, "out_dir": out_dir})
    watch = store.Stopwatch()
    g, population, _ = _load_data_dir(args["data_dir"])
    truth1, truth2 = _read_truth(Path(args["data_dir"]) / "truth.csv")
    q = population.urban_fraction_admin2()
    weights = population.admin1_weights(g.admin1_of)
    dev = evalagg.weight_sum_deviation(weights, g.admin1_of, g.m1)
    if dev > 1e-6:
        click.echo(f"warning: aggregation weights deviate from 1 by {dev:.2e}", err=True)
    metrics = []
    rep_dirs = sorted(Path(args["fits_dir"]).glob("rep*"))
    if not rep_dirs:
        _fail(f"no replicate fits under {args['fits_dir']}")
    for rep_dir in rep_dirs:
        rep = int(rep_dir.name.replace("rep", ""))
        est = load_direct(rep_dir / "direct.csv")
        for variant in VARIANTS:
            vdir = rep_dir / variant
            if not vdir.exists():
                continue
            draws = store.load_draws(vdir)
            a2, a1 = _aggregate_fit(draws, q, weights, g.admin1_of, g.m1, g.m2)
            metrics.append(evalagg.compute_metrics(rep, variant, a2, a1, truth2,
                                                   est.r_hat))
    if not metrics:
        _fail(f"no fitted variants found under {args['fits_dir']}")
    long = evalagg.metrics_frame(metrics)
    summary = evalagg.summarize_metrics(long)
    out = Path(args["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    long.to_csv(out / "metrics_long.csv", index=False, float_format="%.12g")
    summary.table.to_csv(out / "summary.csv", index=False, float_format="%.12g")
    summary.pct_decrease_by_area.to_csv(out / "pct_decrease_by_area.csv", index=False,
                                        float_format="%.12g")
    store.write_manifest(out / "manifest.yaml", "evaluate", args, 0,
                         ["metrics_long.csv", "summary.csv", "pct_decrease_by_area.csv"],
                         watch.elapsed(),
                         extra={"n_excluded_zero_ul": summary.n_excluded_zero_ul,
                                "n_conditional_cells": summary.n_conditional_cells})
    click.echo(f"evaluate: {len(metrics)} fits -> {out}")


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@main.command()
@click.option("--metrics", "metrics_dir", required=True, type=click.Path(exists=True))
def report(metrics_dir):
    """Print the compact study summary from an evaluate output directory."""
    path = Path(metrics_dir) / "summary.csv"
    if not path.exists():
        _fail(f"{path} not found; run evaluate first")
    table = pd.read_csv(path)
    manifest = store.read_manifest(Path(metrics_dir) / "manifest.yaml")
    click.echo(table.to_string(index=False, float_format=lambda v: f"{v:.5g}"))
    click.echo(f"conditional cells (baseline discrepancy > 0.001): "
               f"{manifest.get('n_conditional_cells', 'n/a')}; "
               f"zero-baseline cells excluded from percent decrease: "
               f"{manifest.get('n_excluded_zero_ul', 'n/a')}")


if __name__ == "__main__":
    main()
