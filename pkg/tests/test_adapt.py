import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from linkforge import autodiff as ad
from linkforge import synthetic
from linkforge.adapt import (AdapterError, AdapterWeights, BankScorer, LogitMatrix,
                             collect_expert_logits, fit_adapter, labeled_edges, load_logits,
                             predict_adapted, save_logits, single_expert_losses, zero_shot_sum)
from linkforge.graph import sample_training_negatives
from linkforge.model import BankMeta, ExpertBank

SIG = lambda x: 1.0 / (1.0 + np.exp(-x))


def random_matrix(seed, rows=300, experts=5):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, rows)
    signal = (2 * y - 1)[:, None] * rng.uniform(0, 2, experts)
    x = signal + rng.normal(scale=rng.uniform(0.5, 3, experts), size=(rows, experts))
    if y.min() == y.max():
        y[0] = 1 - y[0]
    return LogitMatrix(x, y, tuple(f"X{i}" for i in range(experts)))


def tiny_bank(m=1, n=1, d=16, seed=0):
    meta = BankMeta(d=d, F=8, m=m, n=n, layers=1, score_hidden=6, gate_hidden=5, gate_latent=3)
    return ExpertBank.create(meta, seed=seed)


def test_zero_shot_sum_values():
    assert float(zero_shot_sum(0.0, 0.0)) == pytest.approx(0.731059, abs=1e-6)
    assert float(zero_shot_sum(2.0, -2.0)) == pytest.approx(SIG(1.0), abs=1e-12)
    assert float(zero_shot_sum(50.0, 50.0)) == pytest.approx(SIG(2.0), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(-30, 30), st.floats(-30, 30), st.floats(0, 5))
def test_zero_shot_sum_bounds_and_monotone(a, b, step):
    v = float(zero_shot_sum(a, b))
    assert SIG(0.0) <= v <= SIG(2.0)
    assert float(zero_shot_sum(a + step, b)) >= v
    assert float(zero_shot_sum(a, b + step)) >= v


def test_zero_shot_rank_matches_inner_sum():
    rng = np.random.default_rng(0)
    ln, le = rng.normal(size=1000) * 4, rng.normal(size=1000) * 4
    outer = np.argsort(zero_shot_sum(ln, le), kind="stable")
    inner = np.argsort(SIG(ln) + SIG(le), kind="stable")
    assert np.array_equal(outer, inner)


def test_separable_expert_wins():
    rng = np.random.default_rng(1)
    y = np.r_[np.ones(100), np.zeros(100)]
    x = np.zeros((200, 4))
    x[:, 2] = np.where(y > 0, 10.0, -10.0)
    x[:, [0, 1, 3]] = rng.normal(size=(200, 3)) * 0.01
    w = fit_adapter(LogitMatrix(x, y, ("a", "b", "c", "d")))
    assert np.argmax(w.p) == 2
    assert np.mean((predict_adapted(w, x) > 0.5) == y) == 1.0


def test_one_column_matches_grid_optimum():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 2, 400)
    x = ((2 * y - 1) * 0.8 + rng.normal(size=400))[:, None]
    lm = LogitMatrix(x, y, ("only",))
    grid = np.linspace(0, 4, 40_001)
    signs = np.where(y > 0, -1.0, 1.0)
    best = min(np.mean(np.logaddexp(0, signs * x[:, 0] * p)) for p in grid[::10])
    w = fit_adapter(lm, lr=1e-2, max_steps=3000)
    assert w.final_loss <= best + 1e-4


def test_identical_columns_match_single_optimum():
    rng = np.random.default_rng(3)
    y = rng.integers(0, 2, 300)
    col = (2 * y - 1) * 0.5 + rng.normal(size=300)
    one = fit_adapter(LogitMatrix(col[:, None], y, ("a",)), lr=1e-2, max_steps=3000)
    three = fit_adapter(LogitMatrix(np.repeat(col[:, None], 3, 1), y, ("a", "b", "c")),
                        lr=1e-2, max_steps=3000)
    assert three.final_loss == pytest.approx(one.final_loss, abs=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_dominance_and_monotone_loss(seed):
    lm = random_matrix(seed)
    w = fit_adapter(lm)
    assert w.final_loss <= single_expert_losses(lm).min() + 1e-3
    diffs = np.diff(w.losses[10:])
    assert diffs.max() <= 1e-6
    assert w.p[0] != 0 and w.steps == 2000


def test_initial_weights_are_uniform():
    w = fit_adapter(random_matrix(0, experts=4), max_steps=1)
    assert len(w.losses) == 2
    base = LogitMatrix(random_matrix(0, experts=4).logits, random_matrix(0, experts=4).labels,
                       tuple(f"X{i}" for i in range(4)))
    sig = SIG(base.logits @ np.full(4, 0.25))
    want = -np.mean(base.labels * np.log(sig) + (1 - base.labels) * np.log(1 - sig))
    assert w.losses[0] == pytest.approx(want, abs=1e-12)


def test_early_stopping_returns_best_validation():
    lm, valid = random_matrix(4), random_matrix(5)
    w = fit_adapter(lm, valid=valid, patience=5)
    assert w.steps <= 2000 and len(w.losses) == w.steps + 1


def test_adapter_is_deterministic():
    lm = random_matrix(6)
    a, b = fit_adapter(lm, seed=1), fit_adapter(lm, seed=1)
    assert np.array_equal(a.p, b.p) and a.losses == b.losses


def test_adapter_errors():
    with pytest.raises(AdapterError):
        fit_adapter(LogitMatrix(np.zeros((3, 1)), np.ones(3), ("a",)))
    with pytest.raises(AdapterError):
        LogitMatrix(np.array([[np.inf]]), np.ones(1), ("a",))
    with pytest.raises(AdapterError):
        LogitMatrix(np.zeros((2, 2)), np.ones(2), ("a",))
    w = AdapterWeights(np.ones(2), ("a", "b"))
    with pytest.raises(AdapterError):
        predict_adapted(w, np.zeros(3))


def test_predict_special_weights():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(50, 3))
    unit = AdapterWeights(np.array([0.0, 1.0, 0.0]), ("a", "b", "c"))
    assert np.array_equal(predict_adapted(unit, logits), ad.sigmoid(logits[:, 1]))
    zero = AdapterWeights(np.zeros(3), ("a", "b", "c"))
    assert np.all(predict_adapted(zero, logits) == 0.5)
    p = rng.normal(size=3)
    rand = AdapterWeights(p, ("a", "b", "c"))
    assert np.max(np.abs(predict_adapted(rand, logits) - SIG(logits @ p))) <= 1e-9


def test_weights_text_round_trip(tmp_path):
    w = fit_adapter(random_matrix(8), max_steps=50)
    w.save(tmp_path / "a.txt")
    back = AdapterWeights.load(tmp_path / "a.txt")
    assert np.array_equal(back.p, w.p) and back.expert_ids == w.expert_ids
    assert back.final_loss == w.final_loss and back.steps == 50


def test_collect_logits_frozen_and_deterministic():
    g = synthetic.demo_graph()
    bank = tiny_bank(1, 1)
    before = bank.checksum()
    pos = g.edges()[:40]
    pairs, labels = labeled_edges(pos, sample_training_negatives(g, 40, 0))
    a = collect_expert_logits(bank, g, pairs, labels)
    b = collect_expert_logits(bank, g, pairs, labels)
    assert a.logits.shape == (80, 2)
    assert np.array_equal(a.logits, b.logits)
    assert bank.checksum() == before


def test_collect_logits_width_mismatch():
    with pytest.raises(AdapterError):
        BankScorer(tiny_bank(d=5), synthetic.demo_graph())


def test_logit_cache_exact(tmp_path):
    g = synthetic.demo_graph()
    scorer = BankScorer(tiny_bank(2, 2), g)
    pairs, labels = labeled_edges(g.edges()[:30], sample_training_negatives(g, 30, 1))
    lm = LogitMatrix(scorer.logits(pairs), labels, scorer.expert_ids)
    save_logits(tmp_path / "c.lfmx", lm)
    back = load_logits(tmp_path / "c.lfmx", scorer.expert_ids)
    assert np.array_equal(back.logits, lm.logits) and np.array_equal(back.labels, lm.labels)


def test_branch_logits_are_gate_mixtures():
    g = synthetic.demo_graph()
    scorer = BankScorer(tiny_bank(3, 2), g)
    pairs = g.edges()[:20]
    l_n, l_e = scorer.branch_logits(pairs)
    lg = scorer.logits(pairs)
    assert np.allclose(l_n, np.sum(lg[:, :3] * scorer.gate_probs("node", pairs), axis=1))
    assert np.all(l_e >= lg[:, 3:].min(axis=1) - 1e-9)
    assert np.all(l_e <= lg[:, 3:].max(axis=1) + 1e-9)
