# graph_builder.py
"""
Probability map -> per-slice graph.

One vertex is sampled per 2^delta x 2^delta cell (the brightest pixel), vertices
are joined when the geodesic distance between them (minimum over lattice paths
of the summed absolute probability differences) is below a threshold, and
CNN feature vectors are flattened into per-vertex rows.
"""
import heapq
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from . import diagnostics
from .diagnostics import require_valid
from .errors import ConfigError, ShapeError

SOLVERS = ("dijkstra", "fmm")


@dataclass
class GraphConfig:
    delta: int = 3
    d_threshold: Optional[float] = None  # None: calibrate per slice
    connectivity: int = 4
    rng_seed: int = 0
    solver: str = "dijkstra"
    fmm_eps: float = 1e-3
    degree_band: Tuple[float, float] = (2.0, 8.0)

    def problems(self) -> List[str]:
        errors = []
        if self.delta < 1:
            errors.append(f"delta must be >= 1, got {self.delta}")
        if self.d_threshold is not None and not self.d_threshold > 0:
            errors.append(f"d_threshold must be positive (or auto), got {self.d_threshold}")
        if self.connectivity not in (4, 8):
            errors.append(f"connectivity must be 4 or 8, got {self.connectivity}")
        if self.solver not in SOLVERS:
            errors.append(f"solver must be one of {SOLVERS}, got '{self.solver}'")
        if not self.fmm_eps > 0:
            errors.append(f"fmm_eps must be positive, got {self.fmm_eps}")
        lo, hi = self.degree_band
        if not 0 <= lo <= hi:
            errors.append(f"degree_band must satisfy 0 <= low <= high, got {self.degree_band}")
        return errors


@dataclass
class VertexSet:
    positions: np.ndarray          # V x 2 (row, col), row-major cell order
    grid_dims: Tuple[int, int]
    delta: int

    @property
    def count(self) -> int:
        return int(self.positions.shape[0])


@dataclass
class Graph:
    vertices: VertexSet
    adjacency: np.ndarray          # V x V bool, symmetric, ones on the diagonal
    features: Optional[np.ndarray] = None
    d_threshold: float = float("nan")

    @property
    def edge_count(self) -> int:
        v = self.vertices.count
        return int((np.count_nonzero(self.adjacency) - v) // 2)

    @property
    def mean_degree(self) -> float:
        v = self.vertices.count
        return 2.0 * self.edge_count / v if v else 0.0


# =========================
# VERTEX SAMPLING
# =========================


def sample_vertices(prob: np.ndarray, cfg: GraphConfig) -> VertexSet:
    prob = np.asarray(prob)
    h, w = prob.shape
    cell = 2 ** cfg.delta
    if cell > min(h, w):
        raise ConfigError(f"cell size 2^{cfg.delta} = {cell} exceeds map size {h}x{w}")
    gh, gw = math.ceil(h / cell), math.ceil(w / cell)
    rng = np.random.default_rng(cfg.rng_seed)

    positions = np.empty((gh * gw, 2), dtype=np.int64)
    k = 0
    for gi in range(gh):
        for gj in range(gw):
            r0, c0 = gi * cell, gj * cell
            block = prob[r0:r0 + cell, c0:c0 + cell]
            bh, bw = block.shape
            top = block.max()
            if block.min() == top:
                r, c = bh // 2, bw // 2
            else:
                hits = np.flatnonzero(block == top)
                pick = hits[0] if hits.size == 1 else rng.choice(hits)
                r, c = divmod(int(pick), bw)
            positions[k] = (r0 + r, c0 + c)
            k += 1
    return VertexSet(positions=positions, grid_dims=(gh, gw), delta=cfg.delta)


# =========================
# GEODESICS
# =========================

_OFFSETS = {4: ((0, 1), (1, 0)), 8: ((0, 1), (1, 0), (1, 1), (1, -1))}


def _lattice_graph(prob: np.ndarray, connectivity: int) -> csr_matrix:
    """Both directions of every lattice edge, weight |p(a) - p(b)|; zero weights stay explicit edges."""
    h, w = prob.shape
    idx = np.arange(h * w).reshape(h, w)
    src, dst, weight = [], [], []
    for dr, dc in _OFFSETS[connectivity]:
        rs, rd = slice(0, h - dr), slice(dr, h)
        cs, cd = (slice(0, w - dc), slice(dc, w)) if dc >= 0 else (slice(-dc, w), slice(0, w + dc))
        a, b = idx[rs, cs].ravel(), idx[rd, cd].ravel()
        wt = np.abs(prob[rs, cs] - prob[rd, cd]).ravel()
        src += [a, b]
        dst += [b, a]
        weight += [wt, wt]
    src, dst, weight = np.concatenate(src), np.concatenate(dst), np.concatenate(weight)
    return csr_matrix((weight, (src, dst)), shape=(h * w, h * w))


def _geodesic_rows(prob: np.ndarray, sources: Sequence[int], connectivity: int) -> np.ndarray:
    lattice = _lattice_graph(np.asarray(prob, dtype=np.float64), connectivity)
    return dijkstra(lattice, directed=True, indices=np.asarray(sources, dtype=np.int64))


def geodesic_distances(prob: np.ndarray, source: Tuple[int, int], cfg: GraphConfig) -> np.ndarray:
    """Exact single-source geodesic distance field on the pixel lattice."""
    h, w = prob.shape
    r, c = source
    if not (0 <= r < h and 0 <= c < w):
        raise ShapeError(f"geodesic source {source} outside map {h}x{w}")
    return _geodesic_rows(prob, [r * w + c], cfg.connectivity)[0].reshape(h, w)


def _eikonal_update(T, known, r, c, s):
    h, w = T.shape
    a = min(T[r - 1, c] if r > 0 and known[r - 1, c] else math.inf,
            T[r + 1, c] if r + 1 < h and known[r + 1, c] else math.inf)
    b = min(T[r, c - 1] if c > 0 and known[r, c - 1] else math.inf,
            T[r, c + 1] if c + 1 < w and known[r, c + 1] else math.inf)
    if a > b:
        a, b = b, a
    if math.isinf(b) or b - a >= s:
        return a + s
    return 0.5 * (a + b + math.sqrt(2.0 * s * s - (b - a) ** 2))


def _slowness(prob: np.ndarray, eps: float) -> np.ndarray:
    p = np.asarray(prob, dtype=np.float64)
    g_r = np.gradient(p, axis=0) if p.shape[0] > 1 else np.zeros_like(p)
    g_c = np.gradient(p, axis=1) if p.shape[1] > 1 else np.zeros_like(p)
    return np.hypot(g_r, g_c) + eps


def fmm_travel_time(prob: np.ndarray, source: Tuple[int, int], eps: float = 1e-3, slowness: np.ndarray = None) -> np.ndarray:
    """
    First-order fast marching solution of |grad T| = |grad p| + eps from a point source.

    Approximates the lattice geodesic metric; not exact.
    """
    h, w = prob.shape
    r0, c0 = source
    if not (0 <= r0 < h and 0 <= c0 < w):
        raise ShapeError(f"travel-time source {source} outside map {h}x{w}")
    s = _slowness(prob, eps) if slowness is None else slowness
    T = np.full((h, w), math.inf)
    known = np.zeros((h, w), dtype=bool)
    T[r0, c0] = 0.0
    heap = [(0.0, r0, c0)]
    while heap:
        t, r, c = heapq.heappop(heap)
        if known[r, c]:
            continue
        known[r, c] = True
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= nr < h and 0 <= nc < w and not known[nr, nc]:
                cand = _eikonal_update(T, known, nr, nc, s[nr, nc])
                if cand < T[nr, nc]:
                    T[nr, nc] = cand
                    heapq.heappush(heap, (cand, nr, nc))
    return T


def pairwise_geodesics(prob: np.ndarray, vertices: VertexSet, cfg: GraphConfig) -> np.ndarray:
    """V x V vertex distances, symmetrized with the elementwise minimum."""
    prob = np.asarray(prob)
    h, w = prob.shape
    flat = vertices.positions[:, 0] * w + vertices.positions[:, 1]
    if cfg.solver == "fmm":
        s = _slowness(prob, cfg.fmm_eps)
        rows = np.stack([fmm_travel_time(prob, tuple(p), cfg.fmm_eps, s).ravel() for p in vertices.positions])
    else:
        rows = _geodesic_rows(prob, flat, cfg.connectivity)
    dist = rows[:, flat]
    return np.minimum(dist, dist.T)


# =========================
# ADJACENCY
# =========================


def calibrate_threshold(distances: np.ndarray, band: Tuple[float, float] = (2.0, 8.0)) -> float:
    """
    Pick d so the mean off-diagonal degree of (distances < d) lands in band.

    Candidates sit just above each distinct pairwise distance, so d is always
    positive and at least the closest pairs are joined. Inside the band the
    candidate nearest the band centre wins; otherwise the one nearest the band.
    """
    v = distances.shape[0]
    pairs = np.sort(distances[np.triu_indices(v, 1)])
    pairs = pairs[np.isfinite(pairs)]
    if pairs.size == 0:
        return math.inf
    values = np.unique(pairs)
    degrees = 2.0 * np.searchsorted(pairs, values, side="right") / v
    thresholds = np.nextafter(values, math.inf)

    lo, hi = band
    gap = np.maximum(lo - degrees, 0.0) + np.maximum(degrees - hi, 0.0)
    centre = abs(degrees - 0.5 * (lo + hi))
    best = np.lexsort((centre, gap))[0]
    return float(thresholds[best])


def _threshold_adjacency(distances: np.ndarray, d: float) -> np.ndarray:
    adjacency = distances < d
    np.fill_diagonal(adjacency, True)
    return adjacency


def build_adjacency(prob: np.ndarray, vertices: VertexSet, cfg: GraphConfig) -> np.ndarray:
    adjacency, _ = _adjacency_and_threshold(prob, vertices, cfg)
    return adjacency


def _adjacency_and_threshold(prob, vertices, cfg):
    distances = pairwise_geodesics(prob, vertices, cfg)
    d = cfg.d_threshold if cfg.d_threshold is not None else calibrate_threshold(distances, cfg.degree_band)
    adjacency = _threshold_adjacency(distances, d)
    if cfg.d_threshold is None:
        v = vertices.count
        degree = (np.count_nonzero(adjacency) - v) / v if v else 0.0
        lo, hi = cfg.degree_band
        if not lo <= degree <= hi and v > hi + 1:
            message = f"auto-calibrated d={d:.6g} gives mean degree {degree:.3f} outside [{lo}, {hi}]"
            diagnostics.soft_problem("Graph calibration DIAGNOSTICS:", [message])
    return adjacency, d


def build_graph(prob: np.ndarray, cfg: GraphConfig, features: np.ndarray = None) -> Graph:
    require_valid("GraphConfig DIAGNOSTICS:", cfg.problems())
    vertices = sample_vertices(prob, cfg)
    adjacency, d = _adjacency_and_threshold(prob, vertices, cfg)
    rows = gather_features(features, vertices) if features is not None else None
    return Graph(vertices=vertices, adjacency=adjacency, features=rows, d_threshold=float(d))


# =========================
# FEATURE FLATTENING
# =========================


def gather_features(features: np.ndarray, vertices: VertexSet) -> np.ndarray:
    """Row k = channel vector at vertex k: [1, C, h, w] -> [V, C]."""
    _, _, h, w = features.shape
    pos = vertices.positions
    if pos.size and (pos.min() < 0 or pos[:, 0].max() >= h or pos[:, 1].max() >= w):
        raise ShapeError(f"vertex positions fall outside feature map {h}x{w}")
    return np.ascontiguousarray(features[0][:, pos[:, 0], pos[:, 1]].T)


def gather_features_backward(drows: np.ndarray, vertices: VertexSet, shape: Tuple[int, ...]) -> np.ndarray:
    dfeatures = np.zeros(shape, dtype=drows.dtype)
    pos = vertices.positions
    np.add.at(dfeatures[0], (slice(None), pos[:, 0], pos[:, 1]), drows.T)
    return dfeatures


def scatter_features(rows: np.ndarray, vertices: VertexSet) -> np.ndarray:
    """[V, C'] -> [1, C', gh, gw]: vertex k lands on its cell of the reduced grid."""
    gh, gw = vertices.grid_dims
    if rows.ndim != 2 or rows.shape[0] != gh * gw:
        raise ShapeError(f"scatter_features: {rows.shape[0] if rows.ndim else 0} rows for a {gh}x{gw} grid")
    return np.ascontiguousarray(rows.T.reshape(1, rows.shape[1], gh, gw))


def scatter_features_backward(dgrid: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(dgrid[0].reshape(dgrid.shape[1], -1).T)


# =========================
# DEBUG DUMP
# =========================


def write_graph_dump(graph: Graph, path: str):
    """Text dump: 'V E delta', V lines 'row col', E lines 'i j' with i < j."""
    v = graph.vertices.count
    ii, jj = np.nonzero(np.triu(graph.adjacency, 1))
    lines = [f"{v} {ii.size} {graph.vertices.delta}"]
    lines += [f"{int(r)} {int(c)}" for r, c in graph.vertices.positions]
    lines += [f"{int(i)} {int(j)}" for i, j in zip(ii, jj)]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
