"""Two-branch expert bank: node encoder, gates, and expert score heads.

Parameter layout inside the bank's :class:`ParamStore`::

    node.enc.*          shared hop-token encoder
    node.gate.mlp.*     node-branch gating MLP, node.gate.centers (m, latent)
    node.expert{i}.*    node score heads, input F
    edge.gate.mlp.*     edge-branch gating MLP, edge.gate.centers (n, latent)
    edge.expert{i}.*    edge score heads, input k*k + 2k
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import formats, nn
from .autodiff import Tensor
from .optim import ParamStore, TemperatureSchedule, temperature_at
from .structural import feature_length

BANK_FORMAT_VERSION = 1
BRANCHES = ("node", "edge")


@dataclass(frozen=True)
class BankMeta:
    d: int
    K: int = 3
    k: int = 2
    F: int = 768
    m: int = 4
    n: int = 4
    layers: int = 2
    score_hidden: int = 768
    score_layers: int = 3
    gate_hidden: int = 64
    gate_latent: int = 32
    dropout: float = 0.1
    tau0: float = 1.0
    tau_final: float = 0.1
    alpha: float = 0.8
    norm_mode: str = "symmetric"
    gate_feature: str = "raw"
    version: int = BANK_FORMAT_VERSION
    fingerprint: str = ""

    @property
    def edge_dim(self) -> int:
        return feature_length(self.k)

    @property
    def temperature(self) -> TemperatureSchedule:
        return TemperatureSchedule(self.tau0, self.tau_final, self.alpha)

    def experts(self, branch: str) -> int:
        return self.m if branch == "node" else self.n

    @classmethod
    def from_dict(cls, data: dict) -> "BankMeta":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


def edge_input(feats) -> np.ndarray:
    """Count features are fed to the edge heads on a log scale."""
    return np.log1p(np.asarray(feats, dtype=np.float64))


def gate_feature(x_i: np.ndarray, x_j: np.ndarray) -> np.ndarray:
    """Edge gate input: sum of the two endpoint feature vectors."""
    return x_i + x_j


def _score_sizes(fan_in: int, hidden: int, layers: int) -> list[int]:
    return [fan_in] + [hidden] * (layers - 1) + [1]


class ExpertBank:
    """Pretrained (or pretraining) two-branch mixture of experts."""

    def __init__(self, meta: BankMeta, store: ParamStore):
        self.meta = meta
        self.store = store

    # -- construction -----------------------------------------------------

    @classmethod
    def create(cls, meta: BankMeta, seed: int = 0, dtype=np.float32) -> "ExpertBank":
        store = ParamStore(dtype, seed)
        nn.init_encoder(store, "node.enc", meta.d, meta.F, meta.layers)
        for branch in BRANCHES:
            nn.init_mlp(store, f"{branch}.gate.mlp", [meta.d, meta.gate_hidden, meta.gate_latent])
            store.add(f"{branch}.gate.centers",
                      store.rng.normal(size=(meta.experts(branch), meta.gate_latent)))
        for i in range(meta.m):
            nn.init_mlp(store, f"node.expert{i}",
                        _score_sizes(meta.F, meta.score_hidden, meta.score_layers))
        for i in range(meta.n):
            nn.init_mlp(store, f"edge.expert{i}",
                        _score_sizes(meta.edge_dim, meta.score_hidden, meta.score_layers))
        return cls(meta, store)

    def expert_names(self) -> list[str]:
        return [f"N{i}" for i in range(self.meta.m)] + [f"E{i}" for i in range(self.meta.n)]

    def param_names(self, branch: str) -> list[str]:
        return [name for name in self.store if name.startswith(branch + ".")]

    # -- forward pieces ---------------------------------------------------

    def encode(self, tokens, train: bool = False, rng=None) -> Tensor:
        return nn.encode(self.store, "node.enc", tokens, self.meta.dropout, rng, train)

    def node_logits(self, h_i: Tensor, h_j: Tensor, train: bool = False, rng=None) -> Tensor:
        """``(B, m)`` expert logits ``MLP_k(h_i * h_j)``."""
        pooled = ad.mul(h_i, h_j)
        cols = [nn.mlp(self.store, f"node.expert{i}", pooled, self.meta.dropout, rng, train)
                for i in range(self.meta.m)]
        return cols[0] if len(cols) == 1 else ad.concat(cols, axis=-1)

    def edge_logits(self, feats, train: bool = False, rng=None) -> Tensor:
        """``(B, n)`` expert logits from raw count features ``(B, k*k + 2k)``."""
        feats = np.asarray(feats)
        if feats.ndim != 2 or feats.shape[1] != self.meta.edge_dim:
            raise ad.ShapeError(
                f"edge features must have {self.meta.edge_dim} columns, got shape {feats.shape}")
        x = Tensor(edge_input(feats).astype(self.store.dtype))
        cols = [nn.mlp(self.store, f"edge.expert{i}", x, self.meta.dropout, rng, train)
                for i in range(self.meta.n)]
        return cols[0] if len(cols) == 1 else ad.concat(cols, axis=-1)

    def gate_latent(self, branch: str, g, train: bool = False, rng=None) -> Tensor:
        g = g if isinstance(g, Tensor) else Tensor(np.asarray(g, dtype=self.store.dtype))
        if g.shape[-1] != self.meta.d:
            raise ad.ShapeError(f"gate input width {g.shape[-1]} != feature width {self.meta.d}")
        return nn.mlp(self.store, f"{branch}.gate.mlp", g, self.meta.dropout, rng, train)

    def gate_weights(self, branch: str, g, train: bool = False, rng=None) -> Tensor:
        """Negative Euclidean distances of gate latents to the cluster centers."""
        z = self.gate_latent(branch, g, train, rng)
        return cluster_weights(z, self.store[f"{branch}.gate.centers"])

    def gate(self, branch: str, x_i, x_j, epoch: int = 0, rng=None, mode: str = "eval",
             hard: bool = False) -> Tensor:
        """Expert probabilities for edges with endpoint features ``x_i``, ``x_j``.

        ``mode="train"`` samples Gumbel noise at the annealed temperature for
        ``epoch``; ``mode="eval"`` is the noise-free softmax at ``tau_final``.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        train = mode == "train"
        w = self.gate_weights(branch, gate_feature(np.asarray(x_i), np.asarray(x_j)), train, rng)
        tau = temperature_at(epoch, self.meta.temperature) if train else self.meta.tau_final
        probs, _ = ad.gumbel_softmax(w, tau, rng, hard=hard, noise=train)
        return probs

    # -- persistence ------------------------------------------------------

    def to_bytes(self) -> bytes:
        return formats.checkpoint_to_bytes(self.store.state_dict(), {"bank": asdict(self.meta)})

    def save(self, path) -> None:
        formats.atomic_write(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ExpertBank":
        params, meta, _ = formats.checkpoint_from_bytes(buf)
        store = ParamStore(np.float32)
        for name, value in params.items():
            store.add(name, value)
        bank = cls(BankMeta.from_dict(meta["bank"]), store)
        bank.check_shapes()
        return bank

    @classmethod
    def load(cls, path) -> "ExpertBank":
        return cls.from_bytes(Path(path).read_bytes())

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def astype(self, dtype) -> "ExpertBank":
        return ExpertBank(self.meta, self.store.astype(dtype))

    def check_shapes(self) -> None:
        meta = self.meta
        s = self.store
        if s["node.enc.proj.W"].shape != (meta.d, meta.F):
            raise ValueError("node encoder projection does not match metadata")
        for branch in BRANCHES:
            if s[f"{branch}.gate.centers"].shape != (meta.experts(branch), meta.gate_latent):
                raise ValueError(f"{branch} gate centers do not match metadata")
        for i in range(meta.n):
            if s[f"edge.expert{i}.0.W"].shape[0] != meta.edge_dim:
                raise ValueError("edge expert input width does not match k")


def cluster_weights(z: Tensor, centers: Tensor, eps: float = 1e-12) -> Tensor:
    """``w[b, c] = -||z[b] - centers[c]||``."""
    b, latent = z.shape
    diff = ad.reshape(z, (b, 1, latent)) - ad.reshape(centers, (1,) + centers.shape)
    sq = ad.sum_(diff * diff, axis=-1)
    return ad.neg(ad.sqrt(sq + eps))


def mix_logits(expert_logits: Tensor, probs: Tensor) -> Tensor:
    """Gate-weighted expected logit ``sum_k p_k * l_k`` per edge."""
    return ad.sum_(expert_logits * probs, axis=-1)


def meta_json(meta: BankMeta) -> str:
    return json.dumps(asdict(meta), sort_keys=True)
