"""End-to-end downstream protocol on one graph: split, score, adapt, rank."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapt import (AdapterWeights, BankScorer, LogitMatrix, adapted_logit, fit_adapter,
                    labeled_edges, load_logits, logit_cache_path, save_logits, zero_shot_sum)
from .config import TrainConfig
from .evaluation import EvalReport, corrupted_pairs, pessimistic_ranks
from .graph import EdgeSplit, Graph, corrupt_targets, split_edges
from .model import ExpertBank
from .pretrain import target_folds


@dataclass(eq=False)
class Downstream:
    """A split graph with everything needed to score its held-out edges."""

    graph: Graph
    split: EdgeSplit
    observed: Graph
    scorer: BankScorer | None
    train: LogitMatrix
    valid: LogitMatrix
    test_pos: np.ndarray = field(repr=False)
    test_neg: np.ndarray = field(repr=False)

    def test_report(self, scores_pos, scores_neg, label: str) -> EvalReport:
        ranks = pessimistic_ranks(scores_pos, scores_neg)
        return EvalReport.from_ranks(ranks, scores_neg.shape[1], self.split.seed, label)


def prepare_downstream(bank: ExpertBank, g: Graph, cfg: TrainConfig, seed: int = 0) -> Downstream:
    """Split ``g``, score training/validation/test pairs once with the frozen bank.

    The observed graph keeps only training edges. Adapter training rows come
    from :func:`training_logits`; validation rows are validation positives
    plus one corrupted target each.
    """
    split = split_edges(g, cfg.ratios, cfg.num_eval_neg, seed)
    observed = g.with_edges(split.train_pos)
    scorer = BankScorer(bank, observed, mask_edge=cfg.mask_edge)
    train = training_logits(bank, observed, split.train_pos, cfg, seed)
    vpos = split.valid_pos
    vneg = corrupted_pairs(vpos, split.valid_neg[:, :1])
    pairs, labels = labeled_edges(vpos, vneg)
    valid = LogitMatrix(scorer.logits(pairs), labels, scorer.expert_ids)
    test_pos = scorer.logits(split.test_pos)
    test_neg = scorer.logits(corrupted_pairs(split.test_pos, split.test_neg))
    test_neg = test_neg.reshape(split.test_neg.shape + (test_pos.shape[1],))
    return Downstream(g, split, observed, scorer, train, valid, test_pos, test_neg)


CACHE_PARTS = ("train", "valid", "test_pos", "test_neg")


def downstream_key(g: Graph, cfg: TrainConfig) -> str:
    """Fingerprint of the graph plus every setting that changes the collected logits."""
    h = hashlib.sha256(g.fingerprint().encode())
    h.update(repr((cfg.ratios, cfg.num_eval_neg, cfg.mask_edge, cfg.target_folds)).encode())
    return h.hexdigest()[:16]


def cached_downstream(bank: ExpertBank, g: Graph, cfg: TrainConfig, seed: int,
                      cache_dir) -> tuple[Downstream, bool]:
    """:func:`prepare_downstream` behind an on-disk logit cache.

    Returns ``(downstream, hit)``. On a hit no expert is evaluated and the
    returned object has no scorer. Logits are float32 values widened to
    float64, so the binary cache round-trips them exactly.
    """
    bank_fp = bank.checksum()[:16]
    key = downstream_key(g, cfg)
    paths = {part: logit_cache_path(cache_dir, bank_fp, key, seed, part) for part in CACHE_PARTS}
    split = split_edges(g, cfg.ratios, cfg.num_eval_neg, seed)
    ids = tuple(bank.expert_names())
    if all(Path(p).exists() for p in paths.values()):
        parts = {part: load_logits(p, ids) for part, p in paths.items()}
        test_neg = parts["test_neg"].logits.reshape(split.test_neg.shape + (len(ids),))
        ds = Downstream(g, split, g.with_edges(split.train_pos), None, parts["train"],
                        parts["valid"], parts["test_pos"].logits, test_neg)
        return ds, True
    ds = prepare_downstream(bank, g, cfg, seed)
    save_logits(paths["train"], ds.train)
    save_logits(paths["valid"], ds.valid)
    pos = ds.test_pos
    save_logits(paths["test_pos"], LogitMatrix(pos, np.ones(len(pos), np.int8), ids))
    neg = ds.test_neg.reshape(-1, len(ids))
    save_logits(paths["test_neg"], LogitMatrix(neg, np.zeros(len(neg), np.int8), ids))
    return ds, False


def training_logits(bank: ExpertBank, observed: Graph, positives: np.ndarray,
                    cfg: TrainConfig, seed: int) -> LogitMatrix:
    """Adapter training rows scored the same way held-out edges are.

    Training positives are split into ``cfg.target_folds`` folds; each fold
    is scored on the observed graph minus that fold, so its structural
    counts look like those of unseen edges. Every positive ``(u, v)`` is
    paired with one corrupted target ``(u, w)``, the negative form used at
    evaluation. With one fold, the observed graph is used as is.
    """
    rng = np.random.default_rng([seed, 7])
    folds = min(cfg.target_folds, len(positives))
    groups = [positives] if folds == 1 else target_folds(positives, folds, rng)
    parts, labels = [], []
    keys = positives[:, 0].astype(np.int64) * observed.node_count + positives[:, 1]
    for fold in groups:
        if folds == 1:
            scorer = BankScorer(bank, observed, mask_edge=cfg.mask_edge)
        else:
            fk = fold[:, 0].astype(np.int64) * observed.node_count + fold[:, 1]
            scorer = BankScorer(bank, observed.with_edges(positives[~np.isin(keys, fk)]),
                                mask_edge=cfg.mask_edge)
        neg = np.stack([fold[:, 0], corrupt_targets(observed, fold[:, 0], 1, rng)[:, 0]], axis=1)
        pairs, lab = labeled_edges(fold, neg)
        parts.append(scorer.logits(pairs))
        labels.append(lab)
    return LogitMatrix(np.concatenate(parts), np.concatenate(labels), tuple(bank.expert_names()))


def adapt_and_rank(ds: Downstream, cfg: TrainConfig, experts=None,
                   label: str = "adapt") -> tuple[AdapterWeights, EvalReport]:
    """Fit the adapter on ``experts`` (default: all) and rank the test edges."""
    names = tuple(experts or ds.train.expert_ids)
    cols = [ds.train.expert_ids.index(n) for n in names]
    w = fit_adapter(ds.train.select(names), cfg.adapter_lr, cfg.adapter_max_steps, cfg.seed,
                    valid=ds.valid.select(names), patience=cfg.adapter_patience,
                    use_bias=cfg.adapter_bias)
    rep = ds.test_report(adapted_logit(w, ds.test_pos[:, cols]),
                         adapted_logit(w, ds.test_neg[..., cols]), label)
    return w, rep


def single_expert_reports(ds: Downstream) -> dict[str, EvalReport]:
    return {name: ds.test_report(ds.test_pos[:, k], ds.test_neg[..., k], name)
            for k, name in enumerate(ds.train.expert_ids)}


def zero_shot_report(ds: Downstream) -> EvalReport:
    """Late fusion of eval-mode gate-weighted branch logits, no downstream training."""
    split = ds.split
    if ds.scorer is None:
        raise ValueError("zero-shot scoring needs a live scorer")
    l_n, l_e = ds.scorer.branch_logits(split.test_pos)
    pos = zero_shot_sum(l_n, l_e)
    n_n, n_e = ds.scorer.branch_logits(corrupted_pairs(split.test_pos, split.test_neg))
    neg = zero_shot_sum(n_n, n_e).reshape(split.test_neg.shape)
    return ds.test_report(pos, neg, "zeroshot")


def branch_names(bank: ExpertBank, branch: str) -> list[str]:
    prefix = "N" if branch == "node" else "E"
    return [n for n in bank.expert_names() if n.startswith(prefix)]


def downstream_summary(bank: ExpertBank, g: Graph, cfg: TrainConfig, seed: int = 0) -> dict:
    """MRR of the full adapter, each branch's adapter, zero-shot fusion and every expert."""
    ds = prepare_downstream(bank, g, cfg, seed)
    out = {"adapt": adapt_and_rank(ds, cfg)[1].mrr}
    for branch in ("node", "edge"):
        out[f"adapt_{branch}"] = adapt_and_rank(ds, cfg, branch_names(bank, branch), branch)[1].mrr
    out["zeroshot"] = zero_shot_report(ds).mrr
    for name, rep in single_expert_reports(ds).items():
        out[name] = rep.mrr
    return out
