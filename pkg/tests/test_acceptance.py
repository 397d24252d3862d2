"""Acceptance suite: one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v``. The end-to-end
criteria (6 and 7) pretrain ten desk-scale banks and take several minutes.
"""

import time
from fractions import Fraction

import numpy as np
import pytest

from linkforge import autodiff as ad
from linkforge import pipeline, synthetic
from linkforge.adapt import (adapted_logit, collect_expert_logits, fit_adapter, labeled_edges,
                             single_expert_losses, zero_shot_sum)
from linkforge.checks import GRAD_TOLERANCE, brute_force_counts, brute_force_ranks, gradient_suite
from linkforge.config import desk_config
from linkforge.evaluation import (EvalReport, FlopsConfig, evaluate_mrr, flops_estimate,
                                  node_term_ratio)
from linkforge.fusion_study import run_fusion_study
from linkforge.graph import from_edges, split_edges
from linkforge.optim import TemperatureSchedule, temperature_at
from linkforge.pretrain import pretrain
from linkforge.structural import approx_counts, build_sketches, exact_counts

from conftest import random_graph

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2, 3, 4)


def verdict(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
    assert ok, detail


def test_c01_gradient_correctness(capsys):
    start = time.perf_counter()
    errors = gradient_suite(instances=20, seed=0)
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = errors[worst] <= GRAD_TOLERANCE and elapsed < 60
    verdict(capsys, 1, "gradient correctness", ok,
            f"{len(errors)} cases x 20 instances, worst {worst}={errors[worst]:.2e}, {elapsed:.0f}s")


def geometric_graph(n, radius, seed):
    rng = np.random.default_rng(seed)
    x = rng.random((n, 2))
    a, b = np.triu_indices(n, 1)
    keep = np.linalg.norm(x[a] - x[b], axis=1) < radius
    return from_edges(n, np.stack([a[keep], b[keep]], axis=1), x)


def test_c02_structural_counts(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    mismatches = checked = 0
    for i in range(50):
        n = int(rng.integers(5, 41))
        g = random_graph(n, float(rng.uniform(0.05, 0.3)), 100 + i)
        edges = g.edges()
        k = 1 + i % 3
        pairs = np.concatenate([edges[:10], rng.integers(0, n, (10, 2))])
        for u, v in pairs:
            if u == v:
                continue
            for mask in (True, False):
                got = exact_counts(g, (u, v), k, mask_edge=mask).flatten()
                mismatches += not np.array_equal(got, brute_force_counts(n, edges, u, v, k, mask))
                checked += 1

    medians = []
    for seed in range(3):
        g = geometric_graph(200, 0.12, seed)
        sk = build_sketches(g, 2, p=14, h=256)
        errs = []
        for e in g.edges():
            exact = exact_counts(g, e, 2).a_counts[0, 0]
            if exact > 0:
                errs.append(abs(approx_counts(sk, e).a_counts[0, 0] - exact) / exact)
        medians.append(float(np.median(errs)))
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and max(medians) <= 0.10 and elapsed < 120
    verdict(capsys, 2, "structural-count oracle", ok,
            f"{mismatches}/{checked} exact mismatches, sketch median A[1,1] error "
            f"{', '.join(f'{m:.3f}' for m in medians)}, {elapsed:.0f}s")


def test_c03_gumbel_fidelity(capsys):
    rng = np.random.default_rng(2024)
    draws = 20_000
    _, idx = ad.gumbel_softmax(ad.Tensor(np.zeros((draws, 2))), 1.0, rng, hard=True)
    freq = float(np.mean(idx == 0))
    freq_ok = abs(freq - 0.5) <= 3 * np.sqrt(0.25 / draws)

    worst = 0.0
    for _ in range(200):
        w = rng.normal(size=int(rng.integers(2, 9))) * 3
        tau = float(rng.uniform(0.05, 3))
        p, _ = ad.gumbel_softmax(ad.Tensor(w), tau, noise=False)
        e = np.exp((w - w.max()) / tau)
        worst = max(worst, float(np.max(np.abs(p.data - e / e.sum()))))

    sched = TemperatureSchedule(1.0, 0.1, 0.8)
    sched_ok = all(temperature_at(t, sched) == max(0.1, 1.0 * 0.8 ** t) for t in range(61))
    ok = freq_ok and worst <= 1e-9 and sched_ok
    verdict(capsys, 3, "gumbel-softmax fidelity", ok,
            f"hard frequency {freq:.4f}, noise-free max error {worst:.1e}, "
            f"schedule exact={sched_ok}")


def test_c04_fusion_study(capsys):
    start = time.perf_counter()
    grad_wins = loss_wins = 0
    for seed in range(10):
        rep = run_fusion_study(synthetic.fusion_graph(seed=seed), steps=100, seed=seed)
        grad_wins += rep.mean_grad("early_fusion", 10, 100) < rep.mean_grad("node_only", 10, 100)
        loss_wins += rep.loss_at("early_fusion", 20) < rep.loss_at("node_only", 20)
    elapsed = time.perf_counter() - start
    ok = grad_wins >= 9 and loss_wins >= 9 and elapsed < 300
    verdict(capsys, 4, "fusion study", ok,
            f"smaller encoder gradient {grad_wins}/10, lower step-20 loss {loss_wins}/10, "
            f"{elapsed:.0f}s")


def test_c05_adapter_dominance(capsys):
    start = time.perf_counter()
    gaps, deltas = [], []
    for i in range(20):
        rng = np.random.default_rng(i)
        experts = int(rng.integers(1, 5))
        cfg = desk_config(seed=i, epochs=10, batches_per_shard=4, experts=experts)
        bank, _ = pretrain(synthetic.pretraining_corpus(4, 150, seed=i), cfg)
        g = synthetic.mechanism_graph(1000, synthetic.DOMAINS[i % 4], 1000 + i,
                                      homophily=float(rng.uniform(0, 1)),
                                      structure=float(rng.uniform(0.2, 1)))
        ds = pipeline.prepare_downstream(bank, g, cfg, i)
        w = fit_adapter(ds.train, cfg.adapter_lr, cfg.adapter_max_steps, i)
        gaps.append(w.final_loss - single_expert_losses(ds.train).min())
        rep = ds.test_report(adapted_logit(w, ds.test_pos), adapted_logit(w, ds.test_neg), "a")
        best = max(r.mrr for r in pipeline.single_expert_reports(ds).values())
        deltas.append(rep.mrr - best)
    elapsed = time.perf_counter() - start
    ok = max(gaps) <= 1e-3 and min(deltas) >= -0.02 and elapsed < 180
    verdict(capsys, 5, "adapter dominance", ok,
            f"20 banks, worst BCE gap {max(gaps):+.4f}, worst MRR margin {min(deltas):+.3f}, "
            f"{elapsed:.0f}s")


@pytest.fixture(scope="module")
def transfer_runs():
    """Desk-scale banks with 4 and 1 experts per branch, adapted on the mixed graph."""
    runs = {}
    for seed in SEEDS:
        g = synthetic.downstream_graph(seed=100 + seed)
        for experts in (4, 1):
            start = time.perf_counter()
            cfg = desk_config(seed=seed, experts=experts)
            bank, _ = pretrain(synthetic.pretraining_corpus(cfg.corpus_shards, seed=seed), cfg)
            ds = pipeline.prepare_downstream(bank, g, cfg, seed)
            row = {"adapt": pipeline.adapt_and_rank(ds, cfg)[1].mrr}
            for branch in ("node", "edge"):
                names = pipeline.branch_names(bank, branch)
                row[branch] = pipeline.adapt_and_rank(ds, cfg, names, branch)[1].mrr
            row["seconds"] = time.perf_counter() - start
            runs[seed, experts] = row
    return runs


def test_c06_desk_transfer(capsys, transfer_runs):
    row = transfer_runs[0, 4]
    margin = row["adapt"] - max(row["node"], row["edge"])
    ok = margin >= 0.02 and row["seconds"] < 900
    verdict(capsys, 6, "desk-scale transfer", ok,
            f"adapt {row['adapt']:.3f}, node-only {row['node']:.3f}, edge-only {row['edge']:.3f}, "
            f"margin {margin:+.3f}, {row['seconds']:.0f}s")


def test_c07_moe_ablation(capsys, transfer_runs):
    diffs = [transfer_runs[s, 4]["adapt"] - transfer_runs[s, 1]["adapt"] for s in SEEDS]
    ok = min(diffs) >= -0.005 and float(np.median(diffs)) > 0
    verdict(capsys, 7, "mixture-of-experts ablation", ok,
            "4-expert minus 1-expert MRR per seed " + ", ".join(f"{d:+.3f}" for d in diffs))


def test_c08_evaluation_oracle(capsys):
    rng = np.random.default_rng(8)
    graphs = [random_graph(int(rng.integers(10, 40)), 0.2, s) for s in range(10)]
    splits = [split_edges(g, num_eval_neg=int(rng.integers(1, 30)), seed=s)
              for s, g in enumerate(graphs)]
    bad = ties = 0
    for t in range(1000):
        split = splits[t % len(splits)]
        n = graphs[t % len(graphs)].node_count
        if t % 2:
            table = rng.random((n, n))
        else:
            table = rng.integers(0, int(rng.integers(2, 8)), (n, n)).astype(float)
        score = lambda p: table[p[:, 0], p[:, 1]]
        got = evaluate_mrr(score, split, "test")
        pos = score(split.test_pos)
        neg = table[np.repeat(split.test_pos[:, 0], split.test_neg.shape[1]),
                    split.test_neg.ravel()].reshape(split.test_neg.shape)
        ties += int(np.any(neg == pos[:, None]))
        want = EvalReport.from_ranks(brute_force_ranks(pos, neg), neg.shape[1])
        bad += not (np.array_equal(got.ranks, want.ranks) and got.mrr == want.mrr)
    verdict(capsys, 8, "evaluation oracle", bad == 0,
            f"{bad}/1000 tables differ from full-sort ranking, {ties} with ties")


def test_c09_late_fusion(capsys):
    sig = lambda x: 1.0 / (1.0 + np.exp(-x))
    zero = float(zero_shot_sum(0.0, 0.0))
    rng = np.random.default_rng(9)
    l_n, l_e = rng.normal(size=1000) * 6, rng.normal(size=1000) * 6
    fused = zero_shot_sum(l_n, l_e)
    extremes = zero_shot_sum(np.array([50.0, 1e3, 700.0]), np.array([50.0, 1e3, -1e3]))
    bounded = bool(np.all(fused <= sig(2.0)) and np.all(extremes <= sig(2.0)))
    inner = sig(l_n) + sig(l_e)
    same_order = np.array_equal(np.argsort(fused, kind="stable"), np.argsort(inner, kind="stable"))
    ok = abs(zero - 0.731059) <= 1e-6 and bounded and same_order
    verdict(capsys, 9, "late-fusion sum", ok,
            f"zero logits {zero:.6f}, bounded by sigmoid(2)={bounded}, rank order kept={same_order}")


def test_c10_complexity(capsys):
    example = flops_estimate(FlopsConfig(N=100, E=200, K=3, F=8))
    rng = np.random.default_rng(10)
    formula_ok = ratio_ok = True
    for _ in range(200):
        n, e, k, f = (int(rng.integers(1, 10**4)) for _ in range(4))
        d = int(rng.integers(1, 20))
        cfg = FlopsConfig(N=n, E=e, K=k % 6, F=f, d_avg=d)
        formula_ok &= flops_estimate(cfg) == n * (k % 6) * f * f + e * f * f
        if k % 6:
            ratio_ok &= node_term_ratio(cfg) == Fraction(k % 6, d ** (k % 6))
    ok = example == 32_000 and formula_ok and ratio_ok
    verdict(capsys, 10, "complexity estimator", ok,
            f"example {example}, formula exact={formula_ok}, node-term ratio exact={ratio_ok}")


def test_c11_frozen_and_deterministic(capsys):
    shards = synthetic.pretraining_corpus(2, 80, seed=11)
    cfg = desk_config(seed=11, epochs=3, batches_per_shard=3, experts=2, threads=1)
    a, logs_a = pretrain(shards, cfg)
    b, logs_b = pretrain(shards, cfg)
    same_bank = a.to_bytes() == b.to_bytes() and [r.log_lines() for r in logs_a] == \
        [r.log_lines() for r in logs_b]

    g = synthetic.demo_graph()
    before = a.checksum()
    split = split_edges(g, seed=11)
    observed = g.with_edges(split.train_pos)
    neg = np.stack([split.valid_pos[:, 0], split.valid_neg[:, 0]], axis=1)
    pairs, labels = labeled_edges(split.valid_pos, neg)
    lm = collect_expert_logits(a, observed, pairs, labels)
    fit_adapter(lm, 1e-2, 200, 11)
    frozen = a.checksum() == before

    reports = []
    for bank in (a, b):
        ds = pipeline.prepare_downstream(bank, g, cfg, 11)
        wts, rep = pipeline.adapt_and_rank(ds, cfg)
        reports.append((wts.dumps(), rep.dumps(), rep.ranks.tobytes()))
    same_reports = reports[0] == reports[1]
    ok = same_bank and frozen and same_reports
    verdict(capsys, 11, "frozenness and determinism", ok,
            f"identical checkpoints={same_bank}, checksum unchanged={frozen}, "
            f"identical reports={same_reports}")
