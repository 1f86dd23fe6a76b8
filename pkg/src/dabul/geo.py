"""Nested two-level administrative geography and ICAR structure matrices.

Admin2 areas are numbered 1..m2 and each belongs to exactly one admin1 area
(1..m1).  The spatial model needs the graph structure matrix Q (degree minus
adjacency), a per-block scaling so the constrained generalized inverse has
unit geometric-mean marginal variance, and the centering projector that
enforces the sum-to-zero constraints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class GeographyError(ValueError):
    """Invalid geography definition (parse error or broken invariant)."""


@dataclass(frozen=True)
class Geography:
    """Two-level administrative geography over an undirected admin2 graph.

    Attributes:
        m1: number of first administrative areas.
        m2: number of second administrative areas.
        admin1_of: int array of shape (m2,), 0-based admin1 index of each
            admin2 area (areas are 0-based internally; files are 1-based).
        neighbors: tuple of sorted tuples, 0-based neighbor ids per area.
    """

    m1: int
    m2: int
    admin1_of: np.ndarray
    neighbors: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if self.m1 < 1 or self.m2 < self.m1:
            raise GeographyError(f"need m2 >= m1 >= 1, got m1={self.m1}, m2={self.m2}")
        if len(self.admin1_of) != self.m2 or len(self.neighbors) != self.m2:
            raise GeographyError("admin1_of and neighbors must have length m2")
        seen = set(int(a) for a in self.admin1_of)
        if seen != set(range(self.m1)):
            raise GeographyError("every admin1 area must contain at least one admin2 area")
        for j, nbrs in enumerate(self.neighbors):
            for k in nbrs:
                if k == j:
                    raise GeographyError(f"self-loop at area {j + 1}")
                if not (0 <= k < self.m2):
                    raise GeographyError(f"area {j + 1} lists unknown neighbor {k + 1}")
                if j not in self.neighbors[k]:
                    raise GeographyError(f"asymmetric adjacency between areas {j + 1} and {k + 1}")

    @property
    def n_edges(self) -> int:
        return sum(len(nb) for nb in self.neighbors) // 2

    def admin2_in_admin1(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.admin1_of == i)

    def adjacency_matrix(self) -> np.ndarray:
        a = np.zeros((self.m2, self.m2))
        for j, nbrs in enumerate(self.neighbors):
            a[j, list(nbrs)] = 1.0
        return a

    def is_connected(self) -> bool:
        seen = np.zeros(self.m2, dtype=bool)
        stack = [0]
        seen[0] = True
        while stack:
            j = stack.pop()
            for k in self.neighbors[j]:
                if not seen[k]:
                    seen[k] = True
                    stack.append(k)
        return bool(seen.all())


def _build_geography(admin1_of: np.ndarray, edges: set[tuple[int, int]]) -> Geography:
    m2 = len(admin1_of)
    m1 = int(admin1_of.max()) + 1
    nbrs: list[set[int]] = [set() for _ in range(m2)]
    for a, b in edges:
        nbrs[a].add(b)
        nbrs[b].add(a)
    neighbors = tuple(tuple(sorted(s)) for s in nbrs)
    return Geography(m1=m1, m2=m2, admin1_of=np.asarray(admin1_of, dtype=np.int64),
                     neighbors=neighbors)


def load_geography(path) -> Geography:
    """Parse an adjacency file into a Geography.

    Format: an ``[areas]`` section with one ``id,admin1_id`` line per admin2
    area (ids contiguous 1..m2), then an ``[edges]`` section with ``id_a,id_b``
    lines.  Edges are undirected; listing one direction is enough and both
    directions are merged.  ``#`` starts a comment.
    """
    areas: dict[int, int] = {}
    edges: list[tuple[int, int]] = []
    section = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.lower() in ("[areas]", "[edges]"):
                section = line.lower().strip("[]")
                continue
            parts = [p.strip() for p in line.replace(",", " ").split()]
            if len(parts) != 2:
                raise GeographyError(f"{path}:{lineno}: expected two integers, got {line!r}")
            try:
                a, b = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise GeographyError(f"{path}:{lineno}: non-integer field in {line!r}") from exc
            if section == "areas":
                if a in areas:
                    raise GeographyError(f"{path}:{lineno}: duplicate admin2 id {a}")
                if a < 1 or b < 1:
                    raise GeographyError(f"{path}:{lineno}: ids must be positive")
                areas[a] = b
            elif section == "edges":
                edges.append((a, b))
            else:
                raise GeographyError(f"{path}:{lineno}: record before any [areas]/[edges] section")
    if not areas:
        raise GeographyError(f"{path}: no admin2 areas defined")
    m2 = len(areas)
    if set(areas) != set(range(1, m2 + 1)):
        raise GeographyError(f"{path}: admin2 ids must be contiguous 1..{m2}")
    admin1_ids = sorted(set(areas.values()))
    if admin1_ids != list(range(1, len(admin1_ids) + 1)):
        raise GeographyError(
            f"{path}: admin1 ids must be contiguous 1..m1; an admin2 area references "
            f"a nonexistent admin1 parent (saw {admin1_ids})")
    admin1_of = np.array([areas[j + 1] - 1 for j in range(m2)], dtype=np.int64)
    edge_set: set[tuple[int, int]] = set()
    for a, b in edges:
        if not (1 <= a <= m2 and 1 <= b <= m2):
            raise GeographyError(f"{path}: edge ({a},{b}) references an unknown admin2 id")
        if a == b:
            raise GeographyError(f"{path}: self-loop on area {a}")
        edge_set.add((min(a, b) - 1, max(a, b) - 1))
    return _build_geography(admin1_of, edge_set)


def save_geography(g: Geography, path) -> None:
    """Write a Geography in the adjacency-file format accepted by load_geography."""
    lines = ["[areas]"]
    lines += [f"{j + 1},{int(g.admin1_of[j]) + 1}" for j in range(g.m2)]
    lines.append("[edges]")
    for j, nbrs in enumerate(g.neighbors):
        for k in nbrs:
            if k > j:
                lines.append(f"{j + 1},{k + 1}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def generate_synthetic_geography(n_admin1: int, admin2_per_admin1: int, seed: int = 0) -> Geography:
    """Deterministic connected lattice geography.

    Each admin1 area is a rook-adjacency rectangular lattice of admin2 areas
    (nearest-to-square, row-major with a partial last row).  Consecutive
    admin1 blocks are laid side by side and joined row-by-row along the shared
    boundary, so the full graph is connected.  The seed only permutes which
    admin2 id sits on which lattice cell inside each admin1 block.
    """
    if n_admin1 < 1 or admin2_per_admin1 < 1:
        raise GeographyError("counts must be >= 1")
    rng = np.random.default_rng(seed)
    k = admin2_per_admin1
    rows = max(1, int(math.isqrt(k)))
    cols = -(-k // rows)

    def cell_rc(pos: int) -> tuple[int, int]:
        return pos // cols, pos % cols

    admin1_of = np.repeat(np.arange(n_admin1, dtype=np.int64), k)
    edges: set[tuple[int, int]] = set()
    # area id (0-based) occupying lattice position pos of block p
    area_at = np.empty((n_admin1, k), dtype=np.int64)
    for p in range(n_admin1):
        perm = rng.permutation(k)
        area_at[p] = p * k + perm
        for pos in range(k):
            _, c = cell_rc(pos)
            cand = []
            if c + 1 < cols and pos + 1 < k:
                cand.append(pos + 1)      # right neighbor, same row
            if pos + cols < k:
                cand.append(pos + cols)   # neighbor below
            for dpos in cand:
                a, b = int(area_at[p, pos]), int(area_at[p, dpos])
                edges.add((min(a, b), max(a, b)))
    n_rows_used = (k + cols - 1) // cols
    for p in range(n_admin1 - 1):
        for r in range(n_rows_used):
            right = min(k, (r + 1) * cols) - 1  # rightmost occupied cell in row r
            left = r * cols                     # leftmost cell in row r
            if right < r * cols or left >= k:
                continue
            a, b = int(area_at[p, right]), int(area_at[p + 1, left])
            edges.add((min(a, b), max(a, b)))
    g = _build_geography(admin1_of, edges)
    if not g.is_connected():
        raise GeographyError("generated lattice unexpectedly disconnected")
    return g


@dataclass(frozen=True)
class StructureMatrix:
    """ICAR structure matrix with per-block scaling and constraint machinery.

    Q is degree-minus-adjacency over admin2 areas.  Each constraint block (one
    per admin1 for nested effects, or a single global block) carries its own
    sum-to-zero constraint; Q restricted to a block is rescaled so that the
    generalized inverse computed under the block constraint has geometric mean
    marginal variance 1.  Q_star is the symmetrically scaled matrix and
    Q_star_inv its generalized inverse under all block constraints.
    """

    Q: np.ndarray
    Q_star: np.ndarray
    Q_star_inv: np.ndarray
    blocks: tuple[np.ndarray, ...]
    scale_factors: np.ndarray
    block_of: np.ndarray = field(repr=False)
    _block_sizes: np.ndarray = field(repr=False)
    _u_factor: np.ndarray = field(repr=False)

    @property
    def m2(self) -> int:
        return self.Q.shape[0]

    def project(self, u: np.ndarray) -> np.ndarray:
        """Center u within each constraint block (sum-to-zero projection)."""
        means = np.bincount(self.block_of, weights=u, minlength=len(self.blocks))
        means /= self._block_sizes
        return u - means[self.block_of]

    def sample_u(self, rng: np.random.Generator) -> np.ndarray:
        """Draw u ~ N(0, Q_star_inv), supported on the constrained subspace."""
        return self._u_factor @ rng.standard_normal(self._u_factor.shape[1])


def build_icar_structure(g: Geography, nesting: str = "per_admin1") -> StructureMatrix:
    """Assemble Q and its per-block scaled generalized inverse.

    nesting="per_admin1" uses one sum-to-zero block per admin1 area (nested
    spatial effects); nesting="global" uses a single block.  Raises
    GeographyError when a block is singular beyond the one-dimensional
    constraint null space (an internally disconnected block).
    """
    if nesting not in ("per_admin1", "global"):
        raise ValueError(f"unknown nesting {nesting!r}")
    m2 = g.m2
    Q = np.diag([float(len(nb)) for nb in g.neighbors])
    for j, nbrs in enumerate(g.neighbors):
        Q[j, list(nbrs)] = -1.0
    if nesting == "per_admin1":
        blocks = tuple(g.admin2_in_admin1(i) for i in range(g.m1))
    else:
        blocks = (np.arange(m2),)

    scale_factors = np.empty(len(blocks))
    sqrt_scale = np.empty(m2)
    block_of = np.empty(m2, dtype=np.int64)
    for bi, ix in enumerate(blocks):
        block_of[ix] = bi
        nb = len(ix)
        Qb = Q[np.ix_(ix, ix)]
        Pb = np.eye(nb) - 1.0 / nb
        evals, evecs = np.linalg.eigh(Pb @ Qb @ Pb)
        tol = max(evals.max(), 1.0) * 1e-10
        n_null = int(np.sum(evals < tol))
        if n_null != 1:
            raise GeographyError(
                f"constraint block {bi + 1} is singular beyond its sum-to-zero "
                f"null space ({n_null} null directions); block is disconnected")
        keep = evals >= tol
        ginv = (evecs[:, keep] / evals[keep]) @ evecs[:, keep].T
        diag = np.diag(ginv)
        s = float(np.exp(np.mean(np.log(diag))))
        scale_factors[bi] = s
        sqrt_scale[ix] = math.sqrt(s)

    Q_star = Q * np.outer(sqrt_scale, sqrt_scale)
    block_sizes = np.array([len(ix) for ix in blocks], dtype=np.float64)
    P = np.eye(m2)
    for ix in blocks:
        P[np.ix_(ix, ix)] -= 1.0 / len(ix)
    M = P @ Q_star @ P
    evals, evecs = np.linalg.eigh(M)
    tol = max(evals.max(), 1.0) * 1e-10
    keep = evals >= tol
    if int(np.sum(~keep)) != len(blocks):
        raise GeographyError("scaled structure matrix has unexpected rank deficiency")
    Q_star_inv = (evecs[:, keep] / evals[keep]) @ evecs[:, keep].T
    u_factor = evecs[:, keep] / np.sqrt(evals[keep])
    return StructureMatrix(Q=Q, Q_star=Q_star, Q_star_inv=Q_star_inv, blocks=blocks,
                           scale_factors=scale_factors, block_of=block_of,
                           _block_sizes=block_sizes, _u_factor=u_factor)
