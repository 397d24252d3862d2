"""Graph container, edge splitting, negative sampling and partitioning."""

from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np

from . import formats


class GraphError(ValueError):
    """Invalid graph input (bad endpoint, feature mismatch, ...)."""


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable undirected graph in CSR form with a float32 feature matrix.

    Neighbor lists are sorted, duplicate free and contain no self-loops.
    """

    node_count: int
    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    node_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        for arr in (self.indptr, self.indices, self.features):
            arr.setflags(write=False)
        if self.node_ids is not None:
            self.node_ids.setflags(write=False)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return len(self.indices) // 2

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def edges(self) -> np.ndarray:
        """Undirected edges as an ``(E, 2)`` array with ``u < v``, sorted."""
        src = np.repeat(np.arange(self.node_count), self.degrees())
        keep = src < self.indices
        return np.stack([src[keep], self.indices[keep]], axis=1)

    @cached_property
    def edge_keys(self) -> np.ndarray:
        """Sorted ``u * n + v`` keys of the canonical edges."""
        return _edge_keys(self.edges(), self.node_count)

    def has_edges(self, pairs) -> np.ndarray:
        """Vectorized membership test for an ``(M, 2)`` array of pairs."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        keys = self.edge_keys
        lo = np.minimum(pairs[:, 0], pairs[:, 1])
        hi = np.maximum(pairs[:, 0], pairs[:, 1])
        q = lo * self.node_count + hi
        if len(keys) == 0:
            return np.zeros(len(q), dtype=bool)
        pos = np.minimum(np.searchsorted(keys, q), len(keys) - 1)
        return keys[pos] == q

    def with_edges(self, edges) -> "Graph":
        """Same nodes and features, different edge set (e.g. the training graph)."""
        return from_edges(self.node_count, edges, self.features, node_ids=self.node_ids)

    def subgraph(self, nodes) -> "Graph":
        """Induced subgraph with contiguous ids; ``node_ids`` maps back to ours."""
        nodes = np.asarray(nodes, dtype=np.int64)
        remap = np.full(self.node_count, -1, dtype=np.int64)
        remap[nodes] = np.arange(len(nodes))
        e = self.edges()
        keep = (remap[e[:, 0]] >= 0) & (remap[e[:, 1]] >= 0)
        sub_edges = remap[e[keep]]
        base_ids = self.node_ids if self.node_ids is not None else np.arange(self.node_count)
        return from_edges(len(nodes), sub_edges, self.features[nodes], node_ids=base_ids[nodes])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.int64(self.node_count).tobytes())
        h.update(self.indptr.astype("<i8").tobytes())
        h.update(self.indices.astype("<i8").tobytes())
        h.update(self.features.astype("<f4").tobytes())
        return h.hexdigest()[:16]


def _edge_keys(edges: np.ndarray, n: int) -> np.ndarray:
    return np.sort(edges[:, 0].astype(np.int64) * n + edges[:, 1])


def from_edges(node_count: int, edges, features, node_ids=None) -> Graph:
    """Build a :class:`Graph`, symmetrizing and dropping duplicates/self-loops."""
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] != node_count:
        raise GraphError(
            f"feature matrix has shape {features.shape}, expected ({node_count}, d)")
    if not np.all(np.isfinite(features)):
        bad = np.argwhere(~np.isfinite(features))[0]
        raise GraphError(f"non-finite feature value at row {bad[0]}, column {bad[1]}")
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) and (edges.min() < 0 or edges.max() >= node_count):
        raise GraphError(f"edge endpoint out of range for {node_count} nodes")
    edges = edges[edges[:, 0] != edges[:, 1]]
    both = np.concatenate([edges, edges[:, ::-1]])
    keys = np.unique(both[:, 0] * node_count + both[:, 1])
    src, dst = np.divmod(keys, node_count)
    indptr = np.zeros(node_count + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    np.cumsum(indptr, out=indptr)
    ids = None if node_ids is None else np.asarray(node_ids, dtype=np.int64).copy()
    return Graph(node_count, indptr, dst.astype(np.int64), features.astype(np.float32).copy(), ids)


def read_edge_list(source) -> np.ndarray:
    """Parse ``u v`` lines; ``#`` comments and blank lines are skipped."""
    if isinstance(source, (str, Path)):
        lines = Path(source).read_text(encoding="utf-8").splitlines()
    else:
        lines = source
    pairs = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise GraphError(f"line {lineno}: expected 'u v', got {line!r}")
        pairs.append((int(parts[0]), int(parts[1])))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def write_edge_list(path, edges) -> None:
    lines = ["# u v"] + [f"{u} {v}" for u, v in np.asarray(edges)]
    formats.atomic_write_text(path, "\n".join(lines) + "\n")


def load_graph(edge_source, feature_source, node_count: int | None = None) -> Graph:
    """Load a graph from an edge list and a feature matrix.

    ``edge_source`` may be a path to an edge-list text file, an iterable of
    lines, or an ``(E, 2)`` array. ``feature_source`` may be a path to an LFMX
    file or an array. ``node_count`` defaults to the number of feature rows.
    """
    if isinstance(feature_source, (str, Path)):
        features = formats.read_matrix(feature_source)
    else:
        features = np.asarray(feature_source, dtype=np.float32)
    if features.ndim == 1:
        features = features[:, None]
    if node_count is None:
        node_count = features.shape[0]
    if features.shape[0] != node_count:
        raise GraphError(
            f"feature row count {features.shape[0]} does not match node count {node_count}")
    if isinstance(edge_source, np.ndarray):
        edges = edge_source
    elif isinstance(edge_source, (str, Path)) or _is_lines(edge_source):
        edges = read_edge_list(edge_source)
    else:
        edges = np.asarray(list(edge_source), dtype=np.int64)
    return from_edges(node_count, edges, features)


def _is_lines(obj) -> bool:
    return isinstance(obj, (list, tuple)) and bool(obj) and isinstance(obj[0], str)


# ---------------------------------------------------------------------------
# splitting and negative sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EdgeSplit:
    train_pos: np.ndarray
    valid_pos: np.ndarray
    test_pos: np.ndarray
    valid_neg: np.ndarray  # (len(valid_pos), num_eval_neg) target nodes
    test_neg: np.ndarray
    seed: int
    ratios: tuple
    num_eval_neg: int

    def positives(self, which: str) -> np.ndarray:
        return {"train": self.train_pos, "valid": self.valid_pos, "test": self.test_pos}[which]

    def negatives(self, which: str) -> np.ndarray:
        return {"valid": self.valid_neg, "test": self.test_neg}[which]

    def to_bytes(self) -> bytes:
        return formats.split_to_bytes(self)


def split_edges(g: Graph, ratios=(0.4, 0.1, 0.5), num_eval_neg: int = 100,
                seed: int = 0) -> EdgeSplit:
    """Randomly split the undirected edges into train/valid/test positives.

    Every valid/test positive ``(u, v)`` gets ``num_eval_neg`` corrupted
    targets ``w`` drawn uniformly from nodes that are neither ``u`` nor a
    neighbor of ``u`` in the full graph.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive reals summing to 1, got {ratios}")
    if num_eval_neg < 1:
        raise ValueError("num_eval_neg must be >= 1")
    edges = g.edges()
    m = len(edges)
    if m < 3:
        raise GraphError(f"graph has {m} edges; at least 3 are needed to populate all splits")
    rng = np.random.default_rng(seed)
    order = rng.permutation(m)
    n_valid = max(1, int(round(m * ratios[1])))
    n_test = max(1, int(round(m * ratios[2])))
    n_train = m - n_valid - n_test
    if n_train < 1:
        n_train, n_test = 1, m - n_valid - 1
    shuffled = edges[order]
    train = _sorted_pairs(shuffled[:n_train])
    valid = _sorted_pairs(shuffled[n_train:n_train + n_valid])
    test = _sorted_pairs(shuffled[n_train + n_valid:])
    valid_neg = _eval_negatives(g, valid[:, 0], num_eval_neg, rng)
    test_neg = _eval_negatives(g, test[:, 0], num_eval_neg, rng)
    return EdgeSplit(train, valid, test, valid_neg, test_neg, int(seed), ratios, int(num_eval_neg))


def _sorted_pairs(pairs: np.ndarray) -> np.ndarray:
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return np.ascontiguousarray(pairs[order])


def _eval_negatives(g: Graph, sources: np.ndarray, k: int, rng) -> np.ndarray:
    n = g.node_count
    out = np.empty((len(sources), k), dtype=np.int64)
    blocked = np.zeros(n, dtype=bool)
    for row, u in enumerate(sources):
        nbrs = g.neighbors(u)
        if len(nbrs) >= n - 1:
            raise GraphError(f"node {u} has no non-neighbors to sample negatives from")
        blocked[nbrs] = True
        blocked[u] = True
        filled = 0
        while filled < k:
            cand = rng.integers(0, n, size=2 * (k - filled) + 8)
            cand = cand[~blocked[cand]][:k - filled]
            out[row, filled:filled + len(cand)] = cand
            filled += len(cand)
        blocked[nbrs] = False
        blocked[u] = False
    return out


def corrupt_targets(g: Graph, sources, k: int, seed) -> np.ndarray:
    """``(len(sources), k)`` targets ``w``, each neither the source nor its neighbor."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return _eval_negatives(g, np.asarray(sources, dtype=np.int64), k, rng)


def sample_training_negatives(g: Graph, count: int, seed) -> np.ndarray:
    """Uniform non-edge, non-self pairs as ``(count, 2)`` with ``u < v``.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    n = g.node_count
    if g.num_edges >= n * (n - 1) // 2:
        raise GraphError("graph is complete; no negative pairs exist")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keys = g.edge_keys
    out = np.empty((count, 2), dtype=np.int64)
    filled = 0
    while filled < count:
        need = count - filled
        a = rng.integers(0, n, size=2 * need + 8)
        b = rng.integers(0, n, size=2 * need + 8)
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        q = lo * n + hi
        pos = np.minimum(np.searchsorted(keys, q), max(len(keys) - 1, 0))
        is_edge = (keys[pos] == q) if len(keys) else np.zeros(len(q), bool)
        ok = (lo != hi) & ~is_edge
        take = np.stack([lo[ok], hi[ok]], axis=1)[:need]
        out[filled:filled + len(take)] = take
        filled += len(take)
    return out


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Partitioning:
    assignments: np.ndarray
    parts: list = field(default_factory=list)
    cut_edges: int = 0


def cut_size(g: Graph, assignments: np.ndarray) -> int:
    e = g.edges()
    return int(np.count_nonzero(assignments[e[:, 0]] != assignments[e[:, 1]]))


def partition(g: Graph, num_parts: int, seed: int = 0) -> Partitioning:
    """Balanced low-cut partition by multi-seed BFS growth plus greedy refinement.

    A lightweight stand-in for METIS: part sizes stay within 25% of
    ``n / num_parts`` and the refinement pass only accepts moves that
    strictly reduce the number of cut edges.
    """
    n = g.node_count
    if not 1 <= num_parts <= n:
        raise ValueError(f"num_parts must be in [1, {n}], got {num_parts}")
    rng = np.random.default_rng(seed)
    if num_parts == 1:
        assign = np.zeros(n, dtype=np.int64)
    else:
        assign = _grow_regions(g, num_parts, rng)
        _refine(g, assign, num_parts)
    parts = [g.subgraph(np.flatnonzero(assign == p)) for p in range(num_parts)]
    return Partitioning(assign, parts, cut_size(g, assign))


def _bfs_dist(g: Graph, sources: list[int]) -> np.ndarray:
    dist = np.full(g.node_count, np.iinfo(np.int64).max, dtype=np.int64)
    q = deque()
    for s in sources:
        dist[s] = 0
        q.append(s)
    while q:
        x = q.popleft()
        for y in g.neighbors(x):
            if dist[y] > dist[x] + 1:
                dist[y] = dist[x] + 1
                q.append(y)
    return dist


def _grow_regions(g: Graph, k: int, rng) -> np.ndarray:
    n = g.node_count
    capacity = -(-n // k)
    # farthest-first seeding; unreachable nodes count as infinitely far
    seeds = [int(rng.integers(n))]
    while len(seeds) < k:
        dist = _bfs_dist(g, seeds)
        far = np.flatnonzero(dist == dist.max())
        far = far[~np.isin(far, seeds)]
        seeds.append(int(rng.choice(far)))
    assign = np.full(n, -1, dtype=np.int64)
    sizes = np.zeros(k, dtype=np.int64)
    frontiers = [deque([s]) for s in seeds]
    for p, s in enumerate(seeds):
        assign[s] = p
        sizes[p] = 1
    active = True
    while active:
        active = False
        for p in range(k):
            q = frontiers[p]
            while q and sizes[p] < capacity:
                x = q[0]
                grabbed = False
                for y in g.neighbors(x):
                    if assign[y] < 0:
                        assign[y] = p
                        sizes[p] += 1
                        q.append(y)
                        grabbed = True
                        break
                if not grabbed:
                    q.popleft()
                    continue
                active = True
                break
    for x in np.flatnonzero(assign < 0):
        p = int(np.argmin(sizes))
        assign[x] = p
        sizes[p] += 1
    return assign


def _refine(g: Graph, assign: np.ndarray, k: int) -> None:
    n = g.node_count
    target = n / k
    lo, hi = int(np.ceil(0.75 * target)), int(np.floor(1.25 * target))
    sizes = np.bincount(assign, minlength=k)
    for x in range(n):
        nbrs = g.neighbors(x)
        if len(nbrs) == 0:
            continue
        counts = np.bincount(assign[nbrs], minlength=k)
        here = assign[x]
        best = int(np.argmax(counts))
        gain = counts[best] - counts[here]
        if best != here and gain > 0 and sizes[here] - 1 >= lo and sizes[best] + 1 <= hi:
            assign[x] = best
            sizes[here] -= 1
            sizes[best] += 1
