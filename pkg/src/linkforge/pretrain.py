"""Independent pretraining of the node and edge branches of an expert bank."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.cluster.vq import kmeans2

from . import autodiff as ad
from .config import TrainConfig
from .graph import Graph, sample_training_negatives
from .hops import HopFeatures, propagate_hops
from .model import BankMeta, ExpertBank, mix_logits
from .optim import ScheduleConfig, adam_step, lr_at, temperature_at
from .structural import distance_matrix, edge_features

BRANCH_IDS = {"node": 0, "edge": 1}


class TrainingError(RuntimeError):
    pass


@dataclass(eq=False)
class ShardView:
    """Target edges plus branch inputs computed on a graph that hides them."""

    graph: Graph
    positives: np.ndarray
    hops: HopFeatures | None = None
    pos_feats: np.ndarray | None = None
    dist: np.ndarray | None = None


@dataclass(eq=False)
class ShardInputs:
    """One pretraining graph with everything the branches need precomputed."""

    graph: Graph
    views: list
    gate_x: np.ndarray

    @property
    def positives(self) -> np.ndarray:
        return self.graph.edges()


def target_folds(edges: np.ndarray, folds: int, rng) -> list[np.ndarray]:
    """Random partition of ``edges`` into ``folds`` non-empty groups."""
    perm = rng.permutation(len(edges))
    return [edges[np.sort(idx)] for idx in np.array_split(perm, folds) if len(idx)]


def prepare_view(g: Graph, positives: np.ndarray, cfg: TrainConfig, branches,
                 hidden: bool) -> ShardView:
    """Inputs for ``positives`` on ``g``; ``hidden`` means ``g`` lacks them already."""
    view = ShardView(graph=g, positives=positives)
    if "node" in branches:
        view.hops = propagate_hops(g, cfg.hops, cfg.norm_mode)
    if "edge" in branches:
        view.dist = distance_matrix(g, cfg.structural_k)
        view.pos_feats = edge_features(g, positives, cfg.structural_k,
                                       mask_edge=cfg.mask_edge and not hidden, dist=view.dist)
    return view


def prepare_shard(g: Graph, cfg: TrainConfig, branches=("node", "edge")) -> ShardInputs:
    """Precompute per-fold views of a shard.

    With ``cfg.target_folds > 1`` the edges are split into folds and each
    fold's inputs (hop features, distances) come from the graph without that
    fold, so training targets never appear in their own inputs. With one
    fold the full graph is used and only ``mask_edge`` hides the query edge
    from the structural counts.
    """
    edges = g.edges()
    if len(edges) == 0:
        raise TrainingError("shard has no edges")
    folds = min(cfg.target_folds, len(edges))
    if folds == 1:
        views = [prepare_view(g, edges, cfg, branches, hidden=False)]
    else:
        rng = np.random.default_rng([cfg.seed, g.node_count, len(edges)])
        views = []
        for fold in target_folds(edges, folds, rng):
            keep = ~np.isin(_keys(edges, g.node_count), _keys(fold, g.node_count))
            views.append(prepare_view(g.with_edges(edges[keep]), fold, cfg, branches,
                                      hidden=True))
    hops = propagate_hops(g, cfg.hops, cfg.norm_mode) if cfg.gate_feature == "hop_mean" else None
    return ShardInputs(graph=g, views=views, gate_x=gate_inputs(g, hops, cfg.gate_feature))


def _keys(edges: np.ndarray, n: int) -> np.ndarray:
    return edges[:, 0].astype(np.int64) * n + edges[:, 1]


def gate_inputs(g: Graph, hops: HopFeatures | None, mode: str) -> np.ndarray:
    if mode == "raw" or hops is None:
        return g.features
    return hops.data.mean(axis=1).astype(np.float32)


def meta_from_config(cfg: TrainConfig, d: int, experts: int | None = None) -> BankMeta:
    m = cfg.experts if experts is None else experts
    return BankMeta(d=d, K=cfg.hops, k=cfg.structural_k, F=cfg.hidden_dim, m=m, n=m,
                    layers=cfg.layers, score_hidden=cfg.score_hidden,
                    score_layers=cfg.score_layers, gate_hidden=cfg.gate_hidden,
                    gate_latent=cfg.gate_latent, dropout=cfg.dropout, tau0=cfg.tau0,
                    tau_final=cfg.tau_final, alpha=cfg.alpha, norm_mode=cfg.norm_mode,
                    gate_feature=cfg.gate_feature)


@dataclass
class StepRecord:
    step: int
    branch: str
    loss: float
    lr: float
    tau: float
    load: np.ndarray

    def line(self) -> str:
        loads = ",".join(f"{x:.4f}" for x in self.load)
        return f"{self.step}\t{self.branch}\t{self.loss:.6f}\t{self.lr:.6g}\t{self.tau:.6g}\t{loads}"


@dataclass
class TrainReport:
    branch: str
    steps: list = field(default_factory=list)
    probe_losses: list = field(default_factory=list)  # before training, then after each epoch

    def log_lines(self) -> list[str]:
        return [r.line() for r in self.steps]


LOG_HEADER = "step\tbranch\tloss\tlr\ttau\tload"


# ---------------------------------------------------------------------------
# per-batch forward
# ---------------------------------------------------------------------------


def branch_logits(bank: ExpertBank, branch: str, view: ShardView, pairs: np.ndarray,
                  feats: np.ndarray | None, train: bool, rng) -> ad.Tensor:
    """Per-expert logits ``(B, experts)`` for ``pairs`` of one shard view."""
    if branch == "node":
        nodes, inv = np.unique(pairs.ravel(), return_inverse=True)
        h = bank.encode(view.hops.data[nodes], train=train, rng=rng)
        inv = inv.reshape(-1, 2)
        return bank.node_logits(ad.take_rows(h, inv[:, 0]), ad.take_rows(h, inv[:, 1]),
                                train=train, rng=rng)
    return bank.edge_logits(feats, train=train, rng=rng)


@dataclass(eq=False)
class Batch:
    shard: ShardInputs
    view: ShardView
    pos_idx: np.ndarray
    pairs: np.ndarray  # positives then equally many negatives


def draw_batch(shard: ShardInputs, cfg: TrainConfig, rng) -> Batch:
    view = shard.views[int(rng.integers(len(shard.views)))]
    npos = len(view.positives)
    size = min(cfg.batch_size, npos)
    pos_idx = np.sort(rng.choice(npos, size=size, replace=False))
    neg = sample_training_negatives(shard.graph, size, rng)
    return Batch(shard, view, pos_idx, np.concatenate([view.positives[pos_idx], neg]))


def _batch_feats(batch: Batch, cfg: TrainConfig):
    view = batch.view
    if view.pos_feats is None:
        return None
    neg = edge_features(view.graph, batch.pairs[len(batch.pos_idx):], cfg.structural_k,
                        mask_edge=False, dist=view.dist)
    return np.concatenate([view.pos_feats[batch.pos_idx], neg])


def batch_loss(bank: ExpertBank, branch: str, batch: Batch, cfg: TrainConfig, epoch: int,
               rng, train: bool, hard: bool = False):
    """Gate-mixed BCE of one batch; returns ``(loss, gate probabilities)``."""
    logits = branch_logits(bank, branch, batch.view, batch.pairs, _batch_feats(batch, cfg),
                           train, rng)
    gx = batch.shard.gate_x
    pairs = batch.pairs
    probs = bank.gate(branch, gx[pairs[:, 0]], gx[pairs[:, 1]], epoch, rng,
                      mode="train" if train else "eval", hard=hard)
    mixed = mix_logits(logits, probs)
    npos = len(batch.pos_idx)
    return ad.bce_loss(mixed[:npos], mixed[npos:]), probs


def init_centers(bank: ExpertBank, branch: str, shards: Sequence[ShardInputs],
                 cfg: TrainConfig, rng) -> None:
    """k-means++ (plus Lloyd refinement) on gate latents of a warmup edge sample."""
    per_shard = max(1, cfg.center_init_edges // (2 * len(shards)))
    gates = []
    for shard in shards:
        edges = shard.positives
        pos = edges[rng.choice(len(edges), size=min(per_shard, len(edges)), replace=False)]
        neg = sample_training_negatives(shard.graph, per_shard, rng)
        pairs = np.concatenate([pos, neg])
        gates.append(shard.gate_x[pairs[:, 0]] + shard.gate_x[pairs[:, 1]])
    z = bank.gate_latent(branch, np.concatenate(gates)).data.astype(np.float64)
    k = bank.meta.experts(branch)
    if k == 1:
        centers = z.mean(axis=0, keepdims=True)
    else:
        centers, _ = kmeans2(z, k, minit="++", seed=int(rng.integers(2**31)))
    bank.store[f"{branch}.gate.centers"].data = centers.astype(bank.store.dtype)


def pretrain_branch(bank: ExpertBank, shards: Sequence[ShardInputs], cfg: TrainConfig,
                    branch: str, log=None) -> TrainReport:
    """Train one branch of ``bank`` in place and return the step log.

    Every step draws positives from one shard plus as many uniformly sampled
    negatives, mixes the expert logits with the Gumbel-Softmax gate, and
    takes an Adam step on that branch's parameters only. Shards are visited
    round-robin, ``batches_per_shard`` batches each per epoch; the gate
    temperature is annealed per epoch.
    """
    if branch not in BRANCH_IDS:
        raise ValueError(f"branch must be 'node' or 'edge', got {branch!r}")
    if not shards:
        raise TrainingError("empty shard list")
    for shard in shards:
        if branch == "node" and shard.views[0].hops is None:
            raise TrainingError("node branch needs precomputed hop features")
        if branch == "edge" and shard.views[0].pos_feats is None:
            raise TrainingError("edge branch needs precomputed structural features")
    rng = np.random.default_rng([cfg.seed, BRANCH_IDS[branch]])
    names = bank.param_names(branch)
    gate_names = [n for n in names if n.startswith(f"{branch}.gate.")]
    body_names = [n for n in names if n not in gate_names]
    total = cfg.total_steps(len(shards))
    sched = ScheduleConfig(cfg.peak_lr, cfg.end_lr, min(cfg.warmup, total - 1), total)
    init_centers(bank, branch, shards, cfg, rng)

    probe = [draw_batch(s, cfg, rng) for s in shards[:4]]
    report = TrainReport(branch)

    def probe_loss():
        return float(np.mean([batch_loss(bank, branch, b, cfg, 0, None, False)[0].data
                              for b in probe]))

    report.probe_losses.append(probe_loss())
    step = 0
    for epoch in range(cfg.epochs):
        tau = temperature_at(epoch, bank.meta.temperature)
        for shard in shards:
            for _ in range(cfg.batches_per_shard):
                batch = draw_batch(shard, cfg, rng)
                loss, probs = batch_loss(bank, branch, batch, cfg, epoch, rng, True,
                                         cfg.hard_routing)
                if not np.isfinite(loss.data):
                    raise TrainingError(f"non-finite loss at step {step}")
                bank.store.zero_grad(names)
                loss.backward()
                step += 1
                lr = lr_at(step, sched)
                adam_step(bank.store, lr, names=body_names)
                if cfg.gate_lr_scale > 0:
                    adam_step(bank.store, lr * cfg.gate_lr_scale, names=gate_names)
                load = np.bincount(probs.data.argmax(axis=1), minlength=probs.shape[1])
                rec = StepRecord(step, branch, float(loss.data), lr, tau, load / load.sum())
                report.steps.append(rec)
                if log is not None:
                    log(rec)
        report.probe_losses.append(probe_loss())
    return report


def pretrain(shard_graphs: Sequence[Graph], cfg: TrainConfig, branches=("node", "edge"),
             experts: int | None = None, log=None) -> tuple[ExpertBank, list[TrainReport]]:
    """Build a bank sized from ``cfg`` and pretrain the requested branches."""
    if not shard_graphs:
        raise TrainingError("empty shard list")
    shards = [prepare_shard(g, cfg, branches) for g in shard_graphs]
    meta = meta_from_config(cfg, shard_graphs[0].feature_dim, experts)
    bank = ExpertBank.create(meta, seed=cfg.seed)
    reports = [pretrain_branch(bank, shards, cfg, b, log) for b in branches]
    fp = hashlib.sha256()
    fp.update(cfg.dumps().encode())
    for g in shard_graphs:
        fp.update(g.fingerprint().encode())
    bank.meta = replace(bank.meta, fingerprint=fp.hexdigest()[:16])
    return bank, reports


def expert_load(bank: ExpertBank, branch: str, shards: Sequence[ShardInputs]) -> np.ndarray:
    """Fraction of positive edges routed to each expert by eval-mode argmax."""
    counts = np.zeros(bank.meta.experts(branch))
    for shard in shards:
        e = shard.positives
        probs = bank.gate(branch, shard.gate_x[e[:, 0]], shard.gate_x[e[:, 1]])
        counts += np.bincount(probs.data.argmax(axis=1), minlength=len(counts))
    return counts / counts.sum()
