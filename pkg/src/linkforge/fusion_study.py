"""Paired node-only vs early-fusion training runs with encoder-gradient tracking.

Both runs start from byte-identical encoder weights and see the same batch
sequence. The node-only run scores ``MLP(h_i * h_j)``; the early-fusion run
scores ``MLP([h_i * h_j, log1p(e_ij)])`` where ``e_ij`` are the structural
counts. When the counts alone predict links, the fused head leans on them
and the encoder's gradient shrinks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .graph import Graph, sample_training_negatives
from .hops import propagate_hops
from .model import edge_input
from .optim import ParamStore, adam_step
from .pretrain import target_folds
from .structural import distance_matrix, edge_features, feature_length

MODES = ("node_only", "early_fusion")


@dataclass(frozen=True)
class FusionConfig:
    hops: int = 3
    k: int = 2
    width: int = 32
    layers: int = 1
    score_hidden: int = 64
    score_layers: int = 3
    lr: float = 3e-3
    batch_size: int = 128
    dropout: float = 0.0


@dataclass
class FusionReport:
    grad_norms: dict  # mode -> (steps,) encoder gradient L2 norms
    losses: dict  # mode -> (steps,) training losses
    encoder_checksum: str
    seed: int

    @property
    def steps(self) -> int:
        return len(self.losses[MODES[0]])

    def mean_grad(self, mode: str, first: int = 10, last: int = 100) -> float:
        """Mean gradient norm over 1-based steps ``first..last`` (clipped to the run)."""
        g = self.grad_norms[mode]
        return float(np.mean(g[first - 1:min(last, len(g))]))

    def loss_at(self, mode: str, step: int) -> float:
        return float(self.losses[mode][step - 1])

    def to_tsv(self) -> str:
        lines = ["step\tgrad_node_only\tgrad_early_fusion\tloss_node_only\tloss_early_fusion"]
        for i in range(self.steps):
            lines.append(f"{i + 1}\t{self.grad_norms['node_only'][i]:.6g}\t"
                         f"{self.grad_norms['early_fusion'][i]:.6g}\t"
                         f"{self.losses['node_only'][i]:.6g}\t{self.losses['early_fusion'][i]:.6g}")
        return "\n".join(lines) + "\n"


def _build(mode: str, d: int, cfg: FusionConfig, seed: int) -> ParamStore:
    store = ParamStore(np.float32, seed)
    nn.init_encoder(store, "enc", d, cfg.width, cfg.layers)
    fan_in = cfg.width + (feature_length(cfg.k) if mode == "early_fusion" else 0)
    sizes = [fan_in] + [cfg.score_hidden] * (cfg.score_layers - 1) + [1]
    nn.init_mlp(store, "score", sizes)
    # zero output layer: both variants start at the prior (loss ln 2)
    store[f"score.{len(sizes) - 2}.W"].data[:] = 0.0
    return store


def encoder_checksum(store: ParamStore) -> str:
    enc = ParamStore(store.dtype)
    for name in store:
        if name.startswith("enc."):
            enc.add(name, store[name].data)
    return enc.checksum()


def _views(g: Graph, cfg: FusionConfig, seed: int, folds: int = 4):
    """Per-fold inputs: each fold's edges are hidden from its hop features and counts."""
    edges = g.edges()
    keys = edges[:, 0].astype(np.int64) * g.node_count + edges[:, 1]
    out = []
    for fold in target_folds(edges, min(folds, len(edges)), np.random.default_rng([seed, 0])):
        fk = fold[:, 0].astype(np.int64) * g.node_count + fold[:, 1]
        view = g.with_edges(edges[~np.isin(keys, fk)])
        dist = distance_matrix(view, cfg.k)
        out.append((view, propagate_hops(view, cfg.hops).data, dist, fold,
                    edge_features(view, fold, cfg.k, dist=dist)))
    return out


def run_fusion_study(g: Graph, steps: int = 100, seed: int = 0,
                     cfg: FusionConfig | None = None) -> FusionReport:
    """Train both variants for ``steps`` Adam steps and record encoder gradients."""
    if steps < 10:
        raise ValueError("fusion study needs at least 10 steps")
    cfg = cfg or FusionConfig()
    views = _views(g, cfg, seed)

    stores = {mode: _build(mode, g.feature_dim, cfg, seed) for mode in MODES}
    checks = {mode: encoder_checksum(s) for mode, s in stores.items()}
    if len(set(checks.values())) != 1:
        raise RuntimeError("paired runs must share encoder initialization")

    # one batch sequence shared by both runs
    rng = np.random.default_rng([seed, 1])
    batches = []
    for _ in range(steps):
        view, hops, dist, pos, pos_feats = views[int(rng.integers(len(views)))]
        idx = rng.choice(len(pos), size=min(cfg.batch_size, len(pos)), replace=False)
        neg = sample_training_negatives(g, len(idx), rng)
        feats = np.concatenate([pos_feats[idx],
                                edge_features(view, neg, cfg.k, mask_edge=False, dist=dist)])
        batches.append((np.concatenate([pos[idx], neg]), feats, hops))

    grads = {m: np.zeros(steps) for m in MODES}
    losses = {m: np.zeros(steps) for m in MODES}
    for mode, store in stores.items():
        drop_rng = np.random.default_rng([seed, 2])
        enc_names = [n for n in store if n.startswith("enc.")]
        for step, (pairs, feats, hops) in enumerate(batches):
            nodes, inv = np.unique(pairs.ravel(), return_inverse=True)
            inv = inv.reshape(-1, 2)
            h = nn.encode(store, "enc", hops[nodes], cfg.dropout, drop_rng, train=True)
            x = ad.mul(ad.take_rows(h, inv[:, 0]), ad.take_rows(h, inv[:, 1]))
            if mode == "early_fusion":
                x = ad.concat([x, ad.Tensor(edge_input(feats).astype(np.float32))], axis=-1)
            logits = ad.reshape(nn.mlp(store, "score", x, cfg.dropout, drop_rng, True), (-1,))
            npos = len(pairs) // 2
            loss = ad.bce_loss(logits[:npos], logits[npos:])
            store.zero_grad()
            loss.backward()
            grads[mode][step] = np.sqrt(sum(float(np.sum(store[n].grad.astype(np.float64) ** 2))
                                            for n in enc_names if store[n].grad is not None))
            losses[mode][step] = float(loss.data)
            adam_step(store, cfg.lr)
    return FusionReport(grads, losses, checks[MODES[0]], seed)
