"""Synthetic graphs with planted link mechanisms.

Two mechanisms are planted, alone or mixed:

* feature homophily (or heterophily) -- nodes carry a latent direction and
  link when the signed dot product of their directions is large;
* community closure -- nodes are grouped into small cliques, so linked pairs
  share common neighbours.

Each feature *domain* shifts node features by its own mean (dims ``0..3``)
and fixes the sign of the homophily rule, so a gate that reads raw features
can tell domains apart while a single shared scorer has to reconcile rules
of opposite sign.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import Graph, from_edges

FEATURE_DIM = 16
LATENT_DIMS = slice(4, 8)
NUM_DOMAINS = 4


@dataclass(frozen=True)
class Domain:
    index: int
    sign: int  # +1 homophily, -1 heterophily
    structure: str  # "clique" or "biclique"


DOMAINS = (
    Domain(0, +1, "clique"),
    Domain(1, -1, "biclique"),
    Domain(2, +1, "biclique"),
    Domain(3, -1, "clique"),
)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def domain_features(n: int, domain: int, rng, offset: float = 3.0, noise: float = 0.3):
    """Features and unit latent directions for ``n`` nodes of one domain."""
    z = rng.normal(size=(n, 4))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    x = noise * rng.normal(size=(n, FEATURE_DIM))
    x[:, domain] += offset
    x[:, LATENT_DIMS] += 1.5 * z
    return x.astype(np.float32), z


def similarity_edges(z: np.ndarray, sign: int, per_node: float, rng) -> np.ndarray:
    """Each node links to its ``c`` highest signed-similarity partners.

    ``c = round(per_node / 2)`` (at least 1), so the mean degree of the
    symmetrized result is close to ``per_node``.
    """
    n = len(z)
    c = max(1, int(round(per_node / 2)))
    s = sign * (z @ z.T)
    s += 1e-9 * rng.random(s.shape)  # random tie-breaking
    np.fill_diagonal(s, -np.inf)
    top = np.argsort(-s, axis=1, kind="stable")[:, :c]
    return np.stack([np.repeat(np.arange(n), c), top.ravel()], axis=1)


def clique_edges(n: int, size: int, rng, nodes=None) -> np.ndarray:
    """Disjoint cliques of ``size`` over a random permutation of ``nodes``."""
    nodes = np.arange(n) if nodes is None else np.asarray(nodes)
    perm = rng.permutation(nodes)
    out = []
    for start in range(0, len(perm) - size + 1, size):
        group = perm[start:start + size]
        a, b = np.triu_indices(size, 1)
        out.append(np.stack([group[a], group[b]], axis=1))
    return np.concatenate(out) if out else np.zeros((0, 2), dtype=np.int64)


def biclique_edges(n: int, side: int, rng, nodes=None) -> np.ndarray:
    """Disjoint complete bipartite blocks ``K(side, side)``: links without triangles."""
    nodes = np.arange(n) if nodes is None else np.asarray(nodes)
    perm = rng.permutation(nodes)
    out = []
    for start in range(0, len(perm) - 2 * side + 1, 2 * side):
        left, right = perm[start:start + side], perm[start + side:start + 2 * side]
        out.append(np.stack(np.meshgrid(left, right), axis=-1).reshape(-1, 2))
    return np.concatenate(out) if out else np.zeros((0, 2), dtype=np.int64)


def mechanism_graph(n: int, domain: Domain, seed, homophily: float = 0.5,
                    structure: float = 0.5, degree: float = 6.0) -> Graph:
    """One graph mixing both mechanisms.

    ``homophily`` and ``structure`` weight the two edge sources; ``degree``
    is the approximate mean degree contributed by a weight of 1.
    """
    rng = _rng(seed)
    x, z = domain_features(n, domain.index, rng)
    parts = []
    if homophily > 0:
        parts.append(similarity_edges(z, domain.sign, homophily * degree, rng))
    if structure > 0:
        covered = rng.permutation(n)[: max(6, int(round(structure * n)))]
        if domain.structure == "clique":
            parts.append(clique_edges(n, 5, rng, covered))
        else:
            parts.append(biclique_edges(n, 3, rng, covered))
    edges = np.concatenate(parts) if parts else np.zeros((0, 2), dtype=np.int64)
    return from_edges(n, edges, x)


def pretraining_corpus(num_shards: int = 8, n: int = 300, seed: int = 0,
                       mixes=(0.1, 0.9)) -> list[Graph]:
    """Shards cycling through the four domains; the homophily weight of shard
    ``s`` is ``mixes[(s // 4) % len(mixes)]`` and the closure weight its complement."""
    rng = np.random.default_rng(seed)
    shards = []
    for s in range(num_shards):
        domain = DOMAINS[s % NUM_DOMAINS]
        mix = mixes[(s // NUM_DOMAINS) % len(mixes)]
        shards.append(mechanism_graph(n, domain, rng, homophily=mix, structure=1.0 - mix))
    return shards


def downstream_graph(n: int = 1000, seed: int = 100, domain: int = 0) -> Graph:
    """Held-out graph mixing both mechanisms; half the nodes sit in closure groups."""
    return mechanism_graph(n, DOMAINS[domain], seed, homophily=1.0, structure=0.5)


# ---------------------------------------------------------------------------
# single-mechanism graphs for unit-scale training checks
# ---------------------------------------------------------------------------


def planted_homophily_graph(n: int = 40, d: int = 8, seed=0, quantile: float = 0.85) -> Graph:
    """Nodes link exactly when the dot product of their features exceeds a threshold."""
    rng = _rng(seed)
    x = rng.normal(size=(n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    s = x @ x.T
    iu, ju = np.triu_indices(n, 1)
    thr = np.quantile(s[iu, ju], quantile)
    keep = s[iu, ju] > thr
    return from_edges(n, np.stack([iu[keep], ju[keep]], axis=1), x.astype(np.float32))


def common_neighbor_graph(n: int = 60, d: int = 8, seed=0, size: int = 5) -> Graph:
    """Disjoint cliques with random features: every edge has common neighbours,
    no non-edge does."""
    rng = _rng(seed)
    x = rng.normal(size=(n, d)).astype(np.float32)
    return from_edges(n, clique_edges(n, size, rng), x)


def fusion_graph(n: int = 200, d: int = 16, seed=0, size: int = 6,
                 signal: float = 0.2) -> Graph:
    """Community-closure links with a weak feature signal.

    Nodes sit in cliques of ``size``; features are noise plus a small
    community-specific offset, so structure is far more predictive than
    features.
    """
    rng = _rng(seed)
    perm = rng.permutation(n)
    community = np.empty(n, dtype=np.int64)
    community[perm] = np.arange(n) // size
    centers = rng.normal(size=(community.max() + 1, d))
    x = rng.normal(size=(n, d)) + signal * centers[community]
    a, b = np.triu_indices(n, 1)
    same = community[a] == community[b]
    edges = np.stack([a[same], b[same]], axis=1)
    return from_edges(n, edges, x.astype(np.float32))


def demo_graph(seed: int = 7) -> Graph:
    """The 100-node mixed-mechanism graph bundled with the command-line tool."""
    return mechanism_graph(100, DOMAINS[0], seed, homophily=0.5, structure=1.0)
