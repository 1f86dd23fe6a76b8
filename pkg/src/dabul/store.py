"""On-disk layout: draw tables (one delimited-text table per chain with a
manifest), run manifests echoing the effective configuration and seeds, and
small helpers shared by the command-line pipeline."""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from .sampler import PosteriorDraws

FLOAT_FMT = "%.10g"


def package_version() -> str:
    try:
        from importlib.metadata import version
        return version("dabul")
    except Exception:
        return "unknown"


def write_manifest(path, command: str, args: dict, seed: int, outputs: list[str],
                   wall_time_s: float, extra: dict | None = None) -> None:
    doc = {
        "command": command,
        "code_version": package_version(),
        "seed": int(seed),
        "args": args,
        "outputs": sorted(str(o) for o in outputs),
        "wall_time_s": round(float(wall_time_s), 3),
    }
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=True)


def read_manifest(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return yaml.safe_load(fh)


def save_draws(draws: PosteriorDraws, outdir) -> list[str]:
    """One TSV per chain (parameters, latents, divergence flag, tree depth)."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for k, table in enumerate(draws.chains):
        df = pd.DataFrame(table, columns=draws.columns)
        for name in draws.latent_columns:
            df[name] = df[name].astype(np.int64)
        df["divergent"] = draws.divergent[k].astype(int)
        df["tree_depth"] = draws.tree_depth[k].astype(int)
        path = outdir / f"draws_chain{k + 1}.tsv"
        df.to_csv(path, sep="\t", index=False, float_format=FLOAT_FMT)
        written.append(str(path))
    write_manifest(outdir / "manifest.yaml", command="fit-one", seed=draws.seed,
                   args={"variant": draws.variant, "chains": len(draws.chains),
                         "iters": int(draws.chains[0].shape[0])},
                   outputs=[Path(w).name for w in written],
                   wall_time_s=draws.wall_time_s,
                   extra={"n_divergent": int(draws.n_divergent)})
    return written


def load_draws(outdir) -> PosteriorDraws:
    outdir = Path(outdir)
    manifest = read_manifest(outdir / "manifest.yaml")
    chains, div, dep = [], [], []
    columns = None
    latent_columns: list[str] = []
    for path in sorted(outdir.glob("draws_chain*.tsv"),
                       key=lambda p: int(p.stem.replace("draws_chain", ""))):
        df = pd.read_csv(path, sep="\t")
        cols = [c for c in df.columns if c not in ("divergent", "tree_depth")]
        columns = cols
        latent_columns = [c for c in cols if c.startswith(("yplus_", "ysamp_"))]
        chains.append(df[cols].to_numpy(dtype=np.float64))
        div.append(df["divergent"].to_numpy(dtype=bool))
        dep.append(df["tree_depth"].to_numpy(dtype=np.int16))
    if columns is None:
        raise FileNotFoundError(f"no draw tables under {outdir}")
    return PosteriorDraws(columns=columns, chains=chains,
                          divergent=np.asarray(div), tree_depth=np.asarray(dep),
                          seed=int(manifest["seed"]),
                          variant=manifest["args"]["variant"],
                          n_divergent=int(manifest.get("n_divergent", 0)),
                          wall_time_s=float(manifest.get("wall_time_s", 0.0)),
                          latent_columns=latent_columns)


def save_diagnostics(diag: dict, path) -> None:
    rows = [(name, d["rhat"], d["ess_bulk"], int(d["constant"]))
            for name, d in diag.items()]
    df = pd.DataFrame(rows, columns=["parameter", "rhat", "ess_bulk", "constant"])
    df.to_csv(path, index=False, float_format="%.6g")


class Stopwatch:
    def __init__(self):
        self.t0 = time.perf_counter()

    def elapsed(self) -> float:
        return time.perf_counter() - self.t0
