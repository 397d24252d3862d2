"""Pairwise distance-profile counts for the edge branch.

For a query pair ``(u, v)`` and receptive field ``k``:

* ``A[du, dv]`` counts nodes ``w`` (other than ``u``, ``v``) at distance
  exactly ``du`` from ``u`` and exactly ``dv`` from ``v``, ``1 <= du, dv <= k``;
* ``B_u[d]`` counts nodes at distance ``d`` from ``u`` and farther than ``k``
  from ``v`` (``B_v`` symmetrically).

Arrays are 0-based: ``a_counts[du - 1, dv - 1]`` and ``b_u[d - 1]``.
Counts are computed exactly from truncated BFS, or approximately from
per-node ball sketches (HyperLogLog for sizes, MinHash for overlaps).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import sketch
from .graph import Graph

MAX_RECEPTIVE_FIELD = 10
DENSE_DISTANCE_LIMIT = 6000


@dataclass(frozen=True)
class StructuralFeature:
    a_counts: np.ndarray  # (k, k)
    b_u: np.ndarray  # (k,)
    b_v: np.ndarray  # (k,)
    receptive_field: int

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.a_counts.ravel(), self.b_u, self.b_v])

    @staticmethod
    def from_flat(vec, k: int) -> "StructuralFeature":
        vec = np.asarray(vec)
        return StructuralFeature(vec[:k * k].reshape(k, k), vec[k * k:k * k + k],
                                 vec[k * k + k:], k)


def feature_length(k: int) -> int:
    return k * k + 2 * k


def _check_k(k: int) -> None:
    if not 1 <= k <= MAX_RECEPTIVE_FIELD:
        raise ValueError(f"receptive field k must be in [1, {MAX_RECEPTIVE_FIELD}], got {k}")


def _truncated_bfs(g: Graph, src: int, k: int, skip: tuple[int, int] | None) -> dict:
    dist = {src: 0}
    q = deque([src])
    while q:
        x = q.popleft()
        dx = dist[x]
        if dx == k:
            continue
        for y in g.neighbors(x):
            y = int(y)
            if skip is not None and {x, y} == set(skip):
                continue
            if y not in dist:
                dist[y] = dx + 1
                q.append(y)
    return dist


def exact_counts(g: Graph, edge, k: int = 2, mask_edge: bool = False) -> StructuralFeature:
    """Exact counts from two BFS runs truncated at depth ``k``.

    With ``mask_edge`` the pair ``(u, v)`` itself is ignored while computing
    distances (a no-op if it is not an edge).
    """
    _check_k(k)
    u, v = int(edge[0]), int(edge[1])
    n = g.node_count
    if not (0 <= u < n and 0 <= v < n):
        raise IndexError(f"edge ({u}, {v}) out of range for {n} nodes")
    if u == v:
        raise ValueError("query pair must have distinct endpoints")
    skip = (u, v) if mask_edge else None
    du = _truncated_bfs(g, u, k, skip)
    dv = _truncated_bfs(g, v, k, skip)
    a = np.zeros((k, k), dtype=np.float64)
    b_u = np.zeros(k, dtype=np.float64)
    b_v = np.zeros(k, dtype=np.float64)
    for w, d in du.items():
        if w in (u, v):
            continue
        if w in dv:
            a[d - 1, dv[w] - 1] += 1
        else:
            b_u[d - 1] += 1
    for w, d in dv.items():
        if w not in (u, v) and w not in du:
            b_v[d - 1] += 1
    return StructuralFeature(a, b_u, b_v, k)


def distance_matrix(g: Graph, k: int) -> np.ndarray:
    """All-pairs hop distances capped at ``k + 1`` (``int8``, dense)."""
    n = g.node_count
    adj = sp.csr_matrix((np.ones(len(g.indices), dtype=np.float32), g.indices, g.indptr),
                        shape=(n, n))
    dist = np.full((n, n), k + 1, dtype=np.int8)
    np.fill_diagonal(dist, 0)
    reached = np.eye(n, dtype=bool)
    frontier = np.eye(n, dtype=np.float32)
    for d in range(1, k + 1):
        nxt = (adj @ frontier) > 0
        new = nxt & ~reached
        dist[new] = d
        reached |= new
        frontier = new.astype(np.float32)
    return dist


def _counts_from_distances(du: np.ndarray, dv: np.ndarray, k: int) -> np.ndarray:
    """Flattened features for rows of capped distance vectors (pair endpoints
    already excluded by setting their entries to ``k + 1``)."""
    rows = du.shape[0]
    base = k + 2
    codes = du.astype(np.int64) * base + dv.astype(np.int64)
    offsets = np.arange(rows, dtype=np.int64)[:, None] * base * base
    hist = np.bincount((codes + offsets).ravel(), minlength=rows * base * base)
    hist = hist.reshape(rows, base, base)
    a = hist[:, 1:k + 1, 1:k + 1].reshape(rows, k * k)
    b_u = hist[:, 1:k + 1, k + 1]
    b_v = hist[:, k + 1, 1:k + 1]
    return np.concatenate([a, b_u, b_v], axis=1)


def edge_features(g: Graph, edges, k: int = 2, mask_edge: bool = False,
                  dist: np.ndarray | None = None) -> np.ndarray:
    """Exact flattened features for many pairs, ``(M, k*k + 2k)`` float32.

    Uses a dense capped distance matrix for small graphs; pairs that are edges
    and need masking fall back to per-pair BFS.
    """
    _check_k(k)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    out = np.zeros((len(edges), feature_length(k)), dtype=np.float32)
    if len(edges) == 0:
        return out
    bfs_rows = np.zeros(len(edges), dtype=bool)
    if mask_edge:
        bfs_rows = g.has_edges(edges)
    if g.node_count > DENSE_DISTANCE_LIMIT and dist is None:
        bfs_rows[:] = True
    for i in np.flatnonzero(bfs_rows):
        out[i] = exact_counts(g, edges[i], k, mask_edge=mask_edge).flatten()
    rest = np.flatnonzero(~bfs_rows)
    if len(rest):
        if dist is None:
            dist = distance_matrix(g, k)
        for start in range(0, len(rest), 2048):
            idx = rest[start:start + 2048]
            u, v = edges[idx, 0], edges[idx, 1]
            du = dist[u].copy()
            dv = dist[v].copy()
            r = np.arange(len(idx))
            for arr in (du, dv):
                arr[r, u] = k + 1
                arr[r, v] = k + 1
            out[idx] = _counts_from_distances(du, dv, k)
    return out


def save_edge_features(path, feats: np.ndarray) -> None:
    from .formats import write_matrix

    write_matrix(path, feats)


# ---------------------------------------------------------------------------
# sketch-based approximation
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SketchSet:
    """Per-node ball sketches for depths ``0..k``.

    ``registers[t]`` is ``(n, 2**p)`` HyperLogLog state for the ball of
    radius ``t``; ``signatures[t]`` is ``(n, h)`` MinHash state for the same
    ball. ``cardinality[:, t]`` caches the size estimates. The graph is kept
    only for the O(1) adjacency test used to place the endpoints themselves.
    """

    registers: list
    signatures: list
    cardinality: np.ndarray
    k: int
    p: int
    h: int
    seed: int
    graph: Graph

    @property
    def node_count(self) -> int:
        return self.cardinality.shape[0]


def _merge_neighbors(g: Graph, state: np.ndarray, reduce) -> np.ndarray:
    deg = g.degrees()
    out = state.copy()
    has = deg > 0
    if np.any(has):
        gathered = state[g.indices]
        starts = g.indptr[:-1][has]
        merged = reduce.reduceat(gathered, starts, axis=0)
        out[has] = reduce(out[has], merged)
    return out


def build_sketches(g: Graph, k: int = 2, p: int = 12, h: int = 128, seed: int = 0) -> SketchSet:
    _check_k(k)
    if not 4 <= p <= 18:
        raise ValueError(f"precision p must be in [4, 18], got {p}")
    if h < 16:
        raise ValueError(f"signature size h must be >= 16, got {h}")
    n = g.node_count
    hashes = sketch.hash_items(np.arange(n), seed)
    idx, rank = sketch.hll_registers(hashes, p)
    reg = np.zeros((n, 1 << p), dtype=np.uint8)
    reg[np.arange(n), idx] = rank
    seeds = sketch.minhash_seeds(h, seed)
    sig = sketch.splitmix64(np.arange(n, dtype=np.uint64)[:, None] ^ seeds[None, :])
    registers, signatures = [reg], [sig]
    for _ in range(k):
        registers.append(_merge_neighbors(g, registers[-1], np.maximum))
        signatures.append(_merge_neighbors(g, signatures[-1], np.minimum))
    card = np.ones((n, k + 1))
    for t in range(1, k + 1):
        card[:, t] = sketch.hll_estimate_rows(registers[t])
    # balls only grow with radius
    card = np.maximum.accumulate(card, axis=1)
    return SketchSet(registers, signatures, card, k, p, h, seed, g)


def _ball_intersection(sk: SketchSet, u: int, x: int, v: int, y: int) -> float:
    union = sketch.hll_estimate(np.maximum(sk.registers[x][u], sk.registers[y][v]))
    jac = sketch.jaccard_estimate(sk.signatures[x][u], sk.signatures[y][v])
    return jac * union


def approx_counts(sketches: SketchSet, edge) -> StructuralFeature:
    """Sketch estimate of :func:`exact_counts` via inclusion-exclusion.

    Ball intersections ``I(x, y) = |ball(u, x) & ball(v, y)|`` come from
    MinHash Jaccard times the HyperLogLog union size. Exact-distance annuli
    then follow from second differences of ``I``; the endpoints' own
    contributions use an estimated ``dist(u, v)``.
    """
    sk = sketches
    k = sk.k
    u, v = int(edge[0]), int(edge[1])
    if not (0 <= u < sk.node_count and 0 <= v < sk.node_count):
        raise IndexError(f"edge ({u}, {v}) not covered by sketch set of {sk.node_count} nodes")
    inter = np.zeros((k + 1, k + 1))
    for x in range(1, k + 1):
        for y in range(1, k + 1):
            inter[x, y] = _ball_intersection(sk, u, x, v, y)
    if u == v:
        dist_uv = 0
    elif sk.graph.has_edges([[u, v]])[0]:
        dist_uv = 1
    else:
        dist_uv = np.inf
        for x in range(1, k + 1):
            for y in range(1, k + 1):
                if inter[x, y] >= 0.5:
                    dist_uv = min(dist_uv, x + y)
    for t in range(1, k + 1):
        inter[0, t] = float(dist_uv <= t)
        inter[t, 0] = float(dist_uv <= t)
    a = inter[1:, 1:] - inter[:-1, 1:] - inter[1:, :-1] + inter[:-1, :-1]
    a = np.maximum(a, 0.0)
    card_u = sk.cardinality[u]
    card_v = sk.cardinality[v]
    b_u = np.zeros(k)
    b_v = np.zeros(k)
    for d in range(1, k + 1):
        ann_u = card_u[d] - card_u[d - 1]
        ann_v = card_v[d] - card_v[d - 1]
        b_u[d - 1] = ann_u - a[d - 1].sum() - float(dist_uv == d)
        b_v[d - 1] = ann_v - a[:, d - 1].sum() - float(dist_uv == d)
    return StructuralFeature(a, np.maximum(b_u, 0.0), np.maximum(b_v, 0.0), k)
