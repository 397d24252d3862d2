"""Downstream use of a frozen expert bank: logit collection, zero-shot late
fusion and the linear adapter over expert logits."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import formats
from .graph import Graph
from .hops import propagate_hops
from .model import ExpertBank, mix_logits
from .optim import ParamStore, adam_step
from .pretrain import gate_inputs
from .structural import distance_matrix, edge_features

ADAPTER_FORMAT_VERSION = 1


class AdapterError(ValueError):
    pass


@dataclass(eq=False)
class LogitMatrix:
    """Expert logits for labeled edges: one row per edge, one column per expert."""

    logits: np.ndarray  # (R, m + n) float64
    labels: np.ndarray  # (R,) 0/1
    expert_ids: tuple

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.logits.ndim != 2 or self.logits.shape[1] != len(self.expert_ids):
            raise AdapterError("logit columns do not match expert ids")
        if len(self.labels) != len(self.logits):
            raise AdapterError("one label per row required")
        if not np.all(np.isfinite(self.logits)):
            raise AdapterError("non-finite expert logits")
        if not np.isin(self.labels, (0, 1)).all():
            raise AdapterError("labels must be 0 or 1")

    def column(self, name: str) -> np.ndarray:
        return self.logits[:, self.expert_ids.index(name)]

    def select(self, names) -> "LogitMatrix":
        cols = [self.expert_ids.index(n) for n in names]
        return LogitMatrix(self.logits[:, cols], self.labels, tuple(names))

    def to_matrix(self) -> np.ndarray:
        """``[logits | label]`` for the binary matrix cache."""
        return np.column_stack([self.logits, self.labels]).astype(np.float32)

    @classmethod
    def from_matrix(cls, mat: np.ndarray, expert_ids) -> "LogitMatrix":
        return cls(mat[:, :-1], mat[:, -1].round().astype(np.int8), tuple(expert_ids))


class BankScorer:
    """Frozen per-graph evaluation context for one bank.

    Hop features, node embeddings and the capped distance matrix of the
    observed graph are computed once; afterwards logits for any pair set are
    cheap. Nothing here touches the bank's parameters.
    """

    def __init__(self, bank: ExpertBank, g: Graph, mask_edge: bool = True,
                 batch: int = 8192):
        meta = bank.meta
        if g.feature_dim != meta.d:
            raise AdapterError(f"graph has {g.feature_dim} feature columns, bank expects {meta.d}")
        self.bank = bank
        self.graph = g
        self.mask_edge = mask_edge
        self.batch = batch
        hops = propagate_hops(g, meta.K, meta.norm_mode)
        self.gate_x = gate_inputs(g, hops, meta.gate_feature)
        self.embeddings = np.concatenate(
            [bank.encode(hops.data[s:s + batch]).data for s in range(0, g.node_count, batch)])
        self.dist = distance_matrix(g, meta.k) if g.node_count <= 6000 else None

    @property
    def expert_ids(self) -> tuple:
        return tuple(self.bank.expert_names())

    def _chunks(self, pairs):
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        for s in range(0, len(pairs), self.batch):
            yield pairs[s:s + self.batch]

    def node_logits(self, pairs) -> np.ndarray:
        h = self.embeddings
        out = [self.bank.node_logits(ad.Tensor(h[p[:, 0]]), ad.Tensor(h[p[:, 1]])).data
               for p in self._chunks(pairs)]
        return np.concatenate(out).reshape(-1, self.bank.meta.m)

    def edge_feats(self, pairs) -> np.ndarray:
        return edge_features(self.graph, pairs, self.bank.meta.k, mask_edge=self.mask_edge,
                             dist=self.dist)

    def edge_logits(self, pairs) -> np.ndarray:
        out = [self.bank.edge_logits(self.edge_feats(p)).data for p in self._chunks(pairs)]
        return np.concatenate(out).reshape(-1, self.bank.meta.n)

    def logits(self, pairs) -> np.ndarray:
        """``(M, m + n)`` float64 expert logits, node experts first."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        return np.concatenate([self.node_logits(pairs), self.edge_logits(pairs)],
                              axis=1).astype(np.float64)

    def gate_probs(self, branch: str, pairs) -> np.ndarray:
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        gx = self.gate_x
        return self.bank.gate(branch, gx[pairs[:, 0]], gx[pairs[:, 1]]).data.astype(np.float64)

    def branch_logits(self, pairs) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode gate-weighted branch logits ``(l_N, l_E)``."""
        lg = self.logits(pairs)
        m = self.bank.meta.m
        l_n = mix_logits(ad.Tensor(lg[:, :m]), ad.Tensor(self.gate_probs("node", pairs))).data
        l_e = mix_logits(ad.Tensor(lg[:, m:]), ad.Tensor(self.gate_probs("edge", pairs))).data
        return l_n, l_e


def collect_expert_logits(bank: ExpertBank, g: Graph, edges, labels,
                          mask_edge: bool = True, scorer: BankScorer | None = None) -> LogitMatrix:
    """Single frozen forward pass over labeled ``edges`` of the observed graph ``g``."""
    scorer = scorer or BankScorer(bank, g, mask_edge)
    return LogitMatrix(scorer.logits(edges), labels, scorer.expert_ids)


def labeled_edges(pos, neg) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(pos, dtype=np.int64).reshape(-1, 2)
    neg = np.asarray(neg, dtype=np.int64).reshape(-1, 2)
    labels = np.concatenate([np.ones(len(pos), np.int8), np.zeros(len(neg), np.int8)])
    return np.concatenate([pos, neg]), labels


# ---------------------------------------------------------------------------
# zero-shot late fusion
# ---------------------------------------------------------------------------


def zero_shot_sum(l_n, l_e):
    """``sigmoid(sigmoid(l_N) + sigmoid(l_E))``; the outer sigmoid keeps it a probability."""
    s = ad.sigmoid(np.asarray(l_n, dtype=np.float64)) + ad.sigmoid(np.asarray(l_e, dtype=np.float64))
    return ad.sigmoid(s)


# ---------------------------------------------------------------------------
# adapter
# ---------------------------------------------------------------------------


@dataclass
class AdapterWeights:
    p: np.ndarray
    expert_ids: tuple
    bias: float = 0.0
    use_bias: bool = False
    steps: int = 0
    final_loss: float = float("nan")
    seed: int = 0
    losses: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        if len(self.p) != len(self.expert_ids):
            raise AdapterError("one weight per expert required")
        if not np.all(np.isfinite(self.p)):
            raise AdapterError("non-finite adapter weights")

    def dumps(self) -> str:
        lines = [
            "# linkforge adapter weights",
            f"version = {ADAPTER_FORMAT_VERSION}",
            f"steps = {self.steps}",
            f"final_loss = {self.final_loss!r}",
            f"seed = {self.seed}",
            f"use_bias = {'true' if self.use_bias else 'false'}",
            f"bias = {self.bias!r}",
        ]
        lines += [f"weight {name} = {float(w)!r}" for name, w in zip(self.expert_ids, self.p)]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "AdapterWeights":
        head, names, weights = {}, [], []
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = (s.strip() for s in line.partition("="))
            if key.startswith("weight "):
                names.append(key[len("weight "):])
                weights.append(float(value))
            else:
                head[key] = value
        if int(head.get("version", -1)) != ADAPTER_FORMAT_VERSION:
            raise AdapterError(f"unsupported adapter version {head.get('version')}")
        return cls(np.array(weights), tuple(names), bias=float(head["bias"]),
                   use_bias=head["use_bias"] == "true", steps=int(head["steps"]),
                   final_loss=float(head["final_loss"]), seed=int(head["seed"]))

    def save(self, path) -> None:
        formats.atomic_write_text(path, self.dumps())

    @classmethod
    def load(cls, path) -> "AdapterWeights":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def bce(logits: np.ndarray, labels: np.ndarray) -> float:
    signs = np.where(labels > 0, -1.0, 1.0)
    return float(np.mean(np.logaddexp(0.0, signs * logits)))


def single_expert_losses(lm: LogitMatrix) -> np.ndarray:
    """Training BCE of every expert used alone (weight vector ``e_k``)."""
    return np.array([bce(lm.logits[:, k], lm.labels) for k in range(lm.logits.shape[1])])


def fit_adapter(lm: LogitMatrix, lr: float = 1e-3, max_steps: int = 2000, seed: int = 0,
                valid: LogitMatrix | None = None, patience: int = 20,
                use_bias: bool = False) -> AdapterWeights:
    """Fit ``p`` in ``sigmoid(sum_k p_k l_k)`` by full-batch Adam on the BCE.

    Starts from the uniform ensemble ``p = 1/(m+n)``. With ``valid`` given,
    training stops once the validation BCE has not improved for ``patience``
    steps and the best-validation weights are returned. The problem is
    convex and full batch, so ``seed`` only labels the result.
    """
    if lm.labels.min() == lm.labels.max():
        raise AdapterError("adapter needs both positive and negative rows")
    if valid is not None and valid.expert_ids != lm.expert_ids:
        raise AdapterError("validation logits use a different expert order")
    x, y = lm.logits, lm.labels.astype(np.float64)
    k = x.shape[1]
    store = ParamStore(np.float64)
    p = store.add("p", np.full(k, 1.0 / k))
    b = store.add("b", np.zeros(1))
    names = ["p", "b"] if use_bias else ["p"]

    def loss_at(weights, bias, mat):
        return bce(mat.logits @ weights + bias, mat.labels)

    losses = [loss_at(p.data, b.data[0], lm)]
    best = (np.inf, p.data.copy(), b.data.copy(), 0)
    stale = 0
    steps = 0
    for steps in range(1, max_steps + 1):
        resid = ad.sigmoid(x @ p.data + b.data[0]) - y
        p.grad = x.T @ resid / len(y)
        b.grad = np.array([resid.mean()])
        adam_step(store, lr, names=names)
        losses.append(loss_at(p.data, b.data[0], lm))
        if valid is not None:
            v = loss_at(p.data, b.data[0], valid)
            if v < best[0] - 1e-12:
                best = (v, p.data.copy(), b.data.copy(), steps)
                stale = 0
            else:
                stale += 1
                if stale >= patience:
                    break
    weights, bias = p.data, b.data
    if valid is not None:
        _, weights, bias, best_step = best
        losses = losses[:best_step + 1]
        steps = best_step
    return AdapterWeights(weights.copy(), lm.expert_ids, bias=float(bias[0]) if use_bias else 0.0,
                          use_bias=use_bias, steps=steps, final_loss=losses[-1], seed=seed,
                          losses=losses)


def predict_adapted(w: AdapterWeights, expert_logits) -> np.ndarray:
    """``sigmoid(l @ p + bias)`` for one logit vector or a matrix of them."""
    logits = np.asarray(expert_logits, dtype=np.float64)
    if logits.shape[-1] != len(w.p):
        raise AdapterError(f"expected {len(w.p)} expert logits, got {logits.shape[-1]}")
    return ad.sigmoid(logits @ w.p + w.bias)


def adapted_logit(w: AdapterWeights, expert_logits) -> np.ndarray:
    return np.asarray(expert_logits, dtype=np.float64) @ w.p + w.bias


# ---------------------------------------------------------------------------
# logit cache
# ---------------------------------------------------------------------------


def logit_cache_path(directory, bank_fingerprint: str, graph_fingerprint: str,
                     split_seed: int, part: str) -> Path:
    return Path(directory) / f"logits_{bank_fingerprint}_{graph_fingerprint}_{split_seed}_{part}.lfmx"


def save_logits(path, lm: LogitMatrix) -> None:
    formats.write_matrix(path, lm.to_matrix())


def load_logits(path, expert_ids) -> LogitMatrix:
    return LogitMatrix.from_matrix(formats.read_matrix(path), expert_ids)
