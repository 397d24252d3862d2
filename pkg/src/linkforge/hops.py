"""Precomputed multi-hop feature propagation for the node encoder."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import formats
from .graph import Graph

NORM_MODES = ("symmetric", "row")


@dataclass(frozen=True, eq=False)
class HopFeatures:
    """``data[:, k, :]`` holds the ``k``-hop propagated features."""

    data: np.ndarray  # (n, K + 1, d) float32
    hops: int
    norm_mode: str

    @property
    def node_count(self) -> int:
        return self.data.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.data.shape[2]


def normalized_adjacency(g: Graph, norm_mode: str = "symmetric") -> sp.csr_matrix:
    """``A + I`` normalized as ``D^-1/2 (A+I) D^-1/2`` or ``D^-1 (A+I)``."""
    if norm_mode not in NORM_MODES:
        raise ValueError(f"norm_mode must be one of {NORM_MODES}, got {norm_mode!r}")
    n = g.node_count
    adj = sp.csr_matrix((np.ones(len(g.indices)), g.indices, g.indptr), shape=(n, n))
    adj = adj + sp.identity(n, format="csr")
    deg = np.asarray(adj.sum(axis=1)).ravel()
    if norm_mode == "symmetric":
        s = sp.diags(1.0 / np.sqrt(deg))
        return (s @ adj @ s).tocsr()
    return (sp.diags(1.0 / deg) @ adj).tocsr()


def propagate_hops(g: Graph, K: int = 3, norm_mode: str = "symmetric") -> HopFeatures:
    if K < 0:
        raise ValueError(f"K must be >= 0, got {K}")
    op = normalized_adjacency(g, norm_mode)
    x = g.features.astype(np.float64)
    out = np.empty((g.node_count, K + 1, g.feature_dim), dtype=np.float32)
    out[:, 0, :] = g.features
    for k in range(1, K + 1):
        x = op @ x
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite values after propagation hop {k}")
        out[:, k, :] = x
    return HopFeatures(out, K, norm_mode)


def hop_file(directory, k: int) -> Path:
    return Path(directory) / f"hop_{k}.lfmx"


def save_hops(hop: HopFeatures, directory) -> list[Path]:
    """Write one LFMX file per hop (``hop_0.lfmx`` ... ``hop_K.lfmx``)."""
    paths = []
    for k in range(hop.hops + 1):
        path = hop_file(directory, k)
        formats.write_matrix(path, hop.data[:, k, :])
        paths.append(path)
    return paths


def load_hops(directory, K: int, norm_mode: str = "symmetric") -> HopFeatures:
    mats = [formats.read_matrix(hop_file(directory, k)) for k in range(K + 1)]
    return HopFeatures(np.stack(mats, axis=1), K, norm_mode)
