"""Ranking evaluation, expert-overlap analysis, MMD, correlation and FLOPs."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.spatial.distance import cdist, pdist

from . import formats
from .graph import EdgeSplit

HITS_AT = (1, 3, 10)
INT64_MAX = 2**63 - 1


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# MRR
# ---------------------------------------------------------------------------


def pessimistic_ranks(pos_scores, neg_scores) -> np.ndarray:
    """``1 + #{negatives scoring >= positive}`` per row."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if neg.ndim != 2 or neg.shape[0] != pos.shape[0]:
        raise EvalError(f"need one row of negatives per positive, got {neg.shape} for {pos.shape}")
    if neg.shape[1] == 0:
        raise EvalError("no negatives to rank against")
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
        raise EvalError("non-finite score")
    return 1 + (neg >= pos[:, None]).sum(axis=1)


@dataclass
class EvalReport:
    mrr: float
    ranks: np.ndarray
    num_negatives: int
    hits: dict = field(default_factory=dict)
    seed: int = 0
    label: str = ""

    @classmethod
    def from_ranks(cls, ranks, num_negatives: int, seed: int = 0, label: str = "") -> "EvalReport":
        ranks = np.asarray(ranks, dtype=np.int64)
        if len(ranks) == 0:
            raise EvalError("no positives to evaluate")
        hits = {k: float(np.mean(ranks <= k)) for k in HITS_AT}
        return cls(float(np.mean(1.0 / ranks)), ranks, num_negatives, hits, seed, label)

    def dumps(self) -> str:
        lines = [f"label = {self.label}", f"mrr = {self.mrr!r}",
                 f"num_positives = {len(self.ranks)}", f"num_negatives = {self.num_negatives}",
                 f"seed = {self.seed}"]
        lines += [f"hits@{k} = {self.hits[k]!r}" for k in HITS_AT]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, ranks=None) -> "EvalReport":
        kv = dict(line.split(" = ", 1) for line in text.splitlines() if " = " in line)
        hits = {k: float(kv[f"hits@{k}"]) for k in HITS_AT}
        ranks = np.zeros(int(kv["num_positives"]), np.int64) if ranks is None else ranks
        return cls(float(kv["mrr"]), np.asarray(ranks), int(kv["num_negatives"]), hits,
                   int(kv["seed"]), kv.get("label", ""))

    def save(self, path, rank_dump: bool = True) -> None:
        formats.atomic_write_text(path, self.dumps())
        if rank_dump:
            formats.atomic_write_text(Path(path).with_suffix(".ranks"),
                                      "\n".join(map(str, self.ranks.tolist())) + "\n")


def evaluate_mrr(score_fn, split: EdgeSplit, which: str = "test", label: str = "") -> EvalReport:
    """Rank each positive ``(u, v)`` against its corrupted targets ``(u, w)``.

    ``score_fn`` maps an ``(M, 2)`` pair array to ``M`` scores; higher means
    more likely. Ties count against the positive.
    """
    if which not in ("valid", "test"):
        raise EvalError(f"which must be 'valid' or 'test', got {which!r}")
    pos = split.positives(which)
    neg = split.negatives(which)
    if neg is None or neg.size == 0:
        raise EvalError(f"split has no {which} negatives")
    pairs = corrupted_pairs(pos, neg)
    scores = np.asarray(score_fn(np.concatenate([pos, pairs])), dtype=np.float64)
    ranks = pessimistic_ranks(scores[:len(pos)], scores[len(pos):].reshape(neg.shape))
    return EvalReport.from_ranks(ranks, neg.shape[1], split.seed, label)


def corrupted_pairs(pos: np.ndarray, neg_targets: np.ndarray) -> np.ndarray:
    """``(P * Q, 2)`` pairs ``(u, w)`` row-major over positives then negatives."""
    src = np.repeat(pos[:, 0], neg_targets.shape[1])
    return np.stack([src, neg_targets.ravel()], axis=1)


# ---------------------------------------------------------------------------
# expert overlap
# ---------------------------------------------------------------------------


def jaccard_matrix(correct: np.ndarray) -> np.ndarray:
    """Pairwise Jaccard of the columns of a boolean ``(edges, experts)`` matrix.

    Two experts that are both never correct get similarity 1.
    """
    c = np.asarray(correct, dtype=np.int64)
    inter = c.T @ c
    sizes = c.sum(axis=0)
    union = sizes[:, None] + sizes[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    return out


def expert_correctness(expert_scores_pos: np.ndarray, expert_scores_neg: np.ndarray,
                       top: int = 3) -> np.ndarray:
    """``(P, experts)`` flags: positive ranked within ``top`` by that expert alone.

    ``expert_scores_neg`` has shape ``(P, Q, experts)``.
    """
    ranks = 1 + (expert_scores_neg >= expert_scores_pos[:, None, :]).sum(axis=1)
    return ranks <= top


def expert_jaccard(bank, g, split: EdgeSplit, which: str = "test", top: int = 3,
                   scorer=None) -> np.ndarray:
    """Similarity of experts by the sets of evaluation edges each gets right.

    An edge counts as correct for an expert when the true target lands in
    the top ``top`` of the candidates (itself plus its sampled negatives).
    """
    from .adapt import BankScorer

    scorer = scorer or BankScorer(bank, g)
    pos = split.positives(which)
    neg = split.negatives(which)
    lp = scorer.logits(pos)
    ln = scorer.logits(corrupted_pairs(pos, neg)).reshape(neg.shape + (lp.shape[1],))
    return jaccard_matrix(expert_correctness(lp, ln, top))


# ---------------------------------------------------------------------------
# distribution shift
# ---------------------------------------------------------------------------


def subsample_rows(x: np.ndarray, max_rows: int = 2000, seed: int = 0) -> np.ndarray:
    x = np.asarray(x)
    if len(x) <= max_rows:
        return x
    idx = np.sort(np.random.default_rng(seed).choice(len(x), max_rows, replace=False))
    return x[idx]


def median_bandwidth(pooled: np.ndarray) -> float:
    d = pdist(pooled)
    bw = float(np.median(d)) if len(d) else 0.0
    if bw <= 0:
        raise EvalError("median pairwise distance is 0; bandwidth undefined")
    return bw


def mmd(sample_a, sample_b) -> float:
    """Biased (V-statistic) squared MMD with an RBF kernel.

    The bandwidth is the median pairwise distance of the pooled sample;
    ``k(x, y) = exp(-|x - y|^2 / (2 * bw^2))``.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or len(a) == 0 or len(b) == 0:
        raise EvalError("both samples must be non-empty matrices")
    if a.shape[1] != b.shape[1]:
        raise EvalError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    bw = median_bandwidth(np.concatenate([a, b]))
    gamma = 1.0 / (2.0 * bw * bw)

    def kmean(x, y):
        return float(np.mean(np.exp(-gamma * cdist(x, y, "sqeuclidean"))))

    return max(0.0, kmean(a, a) + kmean(b, b) - 2.0 * kmean(a, b))


def correlate(x, y) -> tuple[float, float]:
    """Pearson ``r`` and its two-sided t-test p-value."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise EvalError("need two equal-length 1-D samples")
    if len(x) < 3:
        raise EvalError("need at least 3 points")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise EvalError("zero variance")
    res = stats.pearsonr(x, y)
    return float(res.statistic), float(res.pvalue)


def roc_auc(pos_scores, neg_scores) -> float:
    """Probability a random positive outscores a random negative (ties count half)."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    ranks = stats.rankdata(np.concatenate([pos, neg]))
    u = ranks[:len(pos)].sum() - len(pos) * (len(pos) + 1) / 2
    return float(u / (len(pos) * len(neg)))


# ---------------------------------------------------------------------------
# complexity
# ---------------------------------------------------------------------------


class FlopsOverflowWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class FlopsConfig:
    N: int
    E: int
    K: int
    F: int
    d_avg: float = 1.0

    def __post_init__(self):
        if min(self.N, self.E, self.F) <= 0 or self.K < 0 or self.d_avg <= 0:
            raise EvalError("FLOPs config values must be positive (K may be 0)")


def _saturate(value: int) -> int:
    if value > INT64_MAX:
        warnings.warn(f"FLOPs estimate {value} exceeds int64; saturating", FlopsOverflowWarning)
        return INT64_MAX
    return value


def node_term(cfg: FlopsConfig, method: str) -> Fraction:
    f2 = cfg.F * cfg.F
    if method == "palp":
        return Fraction(cfg.N * cfg.K * f2)
    if method == "subgraph":
        return cfg.N * Fraction(cfg.d_avg) ** cfg.K * f2
    raise EvalError(f"method must be 'palp' or 'subgraph', got {method!r}")


def flops_estimate(cfg: FlopsConfig, method: str = "palp") -> int:
    """Per-epoch operation count ``node term + E * F^2`` (exact integer, saturating)."""
    total = node_term(cfg, method) + cfg.E * cfg.F * cfg.F
    return _saturate(int(total))  # d_avg ** K may be fractional; truncate


def node_term_ratio(cfg: FlopsConfig) -> Fraction:
    """palp / subgraph node-term ratio, ``K / d^K`` exactly."""
    return node_term(cfg, "palp") / node_term(cfg, "subgraph")


def flops_table(rows) -> str:
    """Two-column text table: ``name<TAB>flops`` for ``(name, cfg, method)`` rows."""
    lines = ["method\tflops_per_epoch"]
    for name, cfg, method in rows:
        lines.append(f"{name}\t{flops_estimate(cfg, method)}")
    return "\n".join(lines) + "\n"
