"""Built-in self-checks: finite-difference gradient checks and small oracle suites.

The same suites back the ``selftest`` command and the test-suite, so a user
can verify an installation without pytest.
"""

from __future__ import annotations

import itertools
from collections import deque
from contextlib import contextmanager

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .model import BankMeta, ExpertBank, cluster_weights, mix_logits
from .optim import ParamStore, TemperatureSchedule, temperature_at

GRAD_TOLERANCE = 1e-4
# central differences are only meaningful when no relu input lies within a
# step of its kink; instances closer than this are redrawn
KINK_MARGIN = 1e-3


def _leaf(rng, *shape, positive=False, scale=1.0):
    x = rng.normal(size=shape) * scale
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def _project(out: Tensor, rng) -> callable:
    """Fixed random linear functional so any output becomes a scalar loss."""
    r = rng.normal(size=out.shape) / np.sqrt(max(out.data.size, 1))
    return lambda t: ad.sum_(t * Tensor(r))


def _op_case(fn, shapes, rng, positive=()):
    leaves = [_leaf(rng, *s, positive=i in positive) for i, s in enumerate(shapes)]
    proj = _project(fn(*leaves), rng)
    return (lambda: proj(fn(*leaves))), leaves


def _away_from_zero(t: Tensor) -> Tensor:
    # keeps relu inputs off the kink, where central differences are meaningless
    t.data = np.where(np.abs(t.data) < 0.05, 0.3, t.data)
    return t


def _relu_case(rng):
    x = _away_from_zero(_leaf(rng, 4, 5))
    proj = _project(ad.relu(x), rng)
    return (lambda: proj(ad.relu(x))), [x]


def _softmax_case(rng):
    return _op_case(lambda a: ad.softmax(a, axis=-1), [(3, 5)], rng)


def _layer_norm_case(rng):
    x, g, b = _leaf(rng, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
    proj = _project(ad.layer_norm(x, g, b), rng)
    return (lambda: proj(ad.layer_norm(x, g, b))), [x, g, b]


def _dropout_case(rng):
    x = _leaf(rng, 4, 6)
    seed = int(rng.integers(2**31))

    def f():
        return ad.dropout(x, 0.3, np.random.default_rng(seed), True)

    proj = _project(f(), rng)
    return (lambda: proj(f())), [x]


def _gumbel_case(rng):
    w = _leaf(rng, 5, 3)
    seed = int(rng.integers(2**31))
    tau = float(rng.uniform(0.5, 2.0))

    def f():
        return ad.gumbel_softmax(w, tau, np.random.default_rng(seed))[0]

    proj = _project(f(), rng)
    return (lambda: proj(f())), [w]


def _bce_case(rng):
    p, q = _leaf(rng, 6), _leaf(rng, 7)
    return (lambda: ad.bce_loss(p, q)), [p, q]


def _weighted_bce_case(rng):
    x = _leaf(rng, 8)
    labels = rng.integers(0, 2, size=8)
    return (lambda: ad.weighted_bce(x, labels)), [x]


def _take_rows_case(rng):
    rows = rng.integers(0, 4, size=7)
    return _op_case(lambda a: ad.take_rows(a, rows), [(4, 3)], rng)


def _getitem_case(rng):
    return _op_case(lambda a: a[:, 1:3], [(4, 5)], rng)


def _cluster_case(rng):
    return _op_case(cluster_weights, [(5, 3), (4, 3)], rng)


def _mix_case(rng):
    return _op_case(mix_logits, [(5, 4), (5, 4)], rng)


OP_CASES = {
    "add": lambda r: _op_case(ad.add, [(3, 4), (4,)], r),
    "sub": lambda r: _op_case(ad.sub, [(3, 4), (3, 1)], r),
    "mul": lambda r: _op_case(ad.mul, [(3, 4), (3, 4)], r),
    "div": lambda r: _op_case(ad.div, [(3, 4), (3, 4)], r, positive=(1,)),
    "neg": lambda r: _op_case(ad.neg, [(3, 4)], r),
    "power": lambda r: _op_case(lambda a: ad.power(a, 2.5), [(3, 4)], r, positive=(0,)),
    "exp": lambda r: _op_case(ad.exp, [(3, 4)], r),
    "log": lambda r: _op_case(ad.log, [(3, 4)], r, positive=(0,)),
    "sqrt": lambda r: _op_case(ad.sqrt, [(3, 4)], r, positive=(0,)),
    "relu": _relu_case,
    "sigmoid": lambda r: _op_case(ad.sigmoid, [(3, 4)], r),
    "softplus": lambda r: _op_case(ad.softplus, [(3, 4)], r),
    "sum": lambda r: _op_case(lambda a: ad.sum_(a, axis=1, keepdims=True), [(3, 4)], r),
    "mean": lambda r: _op_case(lambda a: ad.mean(a, axis=0), [(3, 4)], r),
    "reshape": lambda r: _op_case(lambda a: ad.reshape(a, (6, 2)), [(3, 4)], r),
    "transpose": lambda r: _op_case(lambda a: ad.transpose(a, (2, 0, 1)), [(2, 3, 4)], r),
    "getitem": _getitem_case,
    "take_rows": _take_rows_case,
    "concat": lambda r: _op_case(lambda a, b: ad.concat([a, b], axis=-1), [(3, 2), (3, 4)], r),
    "stack": lambda r: _op_case(lambda a, b: ad.stack([a, b], axis=1), [(3, 2), (3, 2)], r),
    "matmul": lambda r: _op_case(ad.matmul, [(2, 3, 4), (4, 5)], r),
    "softmax": _softmax_case,
    "layer_norm": _layer_norm_case,
    "dropout": _dropout_case,
    "gumbel_softmax": _gumbel_case,
    "bce_loss": _bce_case,
    "weighted_bce": _weighted_bce_case,
    "cluster_weights": _cluster_case,
    "mix_logits": _mix_case,
}


# ---------------------------------------------------------------------------
# composed models
# ---------------------------------------------------------------------------

_TINY = dict(d=3, K=2, k=2, F=4, m=2, n=2, layers=1, score_hidden=5, score_layers=3,
             gate_hidden=4, gate_latent=3, dropout=0.2)


def _tiny_bank(rng) -> ExpertBank:
    bank = ExpertBank.create(BankMeta(**_TINY), seed=int(rng.integers(2**31)),
                             dtype=np.float64)
    # zero-initialized biases put relu inputs exactly on the kink for rows
    # whose hidden units are all dropped; jitter every parameter off it
    for name in bank.store:
        t = bank.store[name]
        t.data = t.data + 0.1 * rng.normal(size=t.shape)
    return bank


def _params(store: ParamStore, prefix: str) -> list[Tensor]:
    return [store[n] for n in store if n.startswith(prefix)]


def _encoder_case(rng):
    bank = _tiny_bank(rng)
    tokens = rng.normal(size=(3, _TINY["K"] + 1, _TINY["d"]))
    seed = int(rng.integers(2**31))

    def f():
        return bank.encode(tokens, train=True, rng=np.random.default_rng(seed))

    proj = _project(f(), rng)
    return (lambda: proj(f())), _params(bank.store, "node.enc")


def _node_branch_case(rng):
    """Encoder, node experts, gate and expected-logit mixing under one BCE."""
    bank = _tiny_bank(rng)
    nodes = rng.normal(size=(6, _TINY["K"] + 1, _TINY["d"]))
    x = rng.normal(size=(6, _TINY["d"]))
    pairs = np.array([[0, 1], [2, 3], [4, 5], [0, 5]])
    seed = int(rng.integers(2**31))

    def f():
        r = np.random.default_rng(seed)
        h = bank.encode(nodes, train=True, rng=r)
        logits = bank.node_logits(ad.take_rows(h, pairs[:, 0]), ad.take_rows(h, pairs[:, 1]),
                                  train=True, rng=r)
        probs = bank.gate("node", x[pairs[:, 0]], x[pairs[:, 1]], epoch=2, rng=r, mode="train")
        mixed = mix_logits(logits, probs)
        return ad.bce_loss(mixed[:2], mixed[2:])

    return f, _params(bank.store, "node.")


def _edge_branch_case(rng):
    bank = _tiny_bank(rng)
    feats = rng.integers(0, 6, size=(6, bank.meta.edge_dim)).astype(np.float64)
    x = rng.normal(size=(12, _TINY["d"]))
    seed = int(rng.integers(2**31))

    def f():
        r = np.random.default_rng(seed)
        logits = bank.edge_logits(feats, train=True, rng=r)
        probs = bank.gate("edge", x[:6], x[6:], epoch=1, rng=r, mode="train")
        mixed = mix_logits(logits, probs)
        return ad.bce_loss(mixed[:3], mixed[3:])

    return f, _params(bank.store, "edge.")


def _gate_case(rng):
    bank = _tiny_bank(rng)
    x_i, x_j = rng.normal(size=(5, _TINY["d"])), rng.normal(size=(5, _TINY["d"]))
    seed = int(rng.integers(2**31))

    def f():
        return bank.gate("node", x_i, x_j, epoch=0, rng=np.random.default_rng(seed), mode="train")

    proj = _project(f(), rng)
    return (lambda: proj(f())), _params(bank.store, "node.gate.")


def _adapter_case(rng):
    logits = rng.normal(size=(12, 4))
    labels = rng.integers(0, 2, size=12)
    p = _leaf(rng, 4, 1)
    lt = Tensor(logits)
    return (lambda: ad.weighted_bce(ad.reshape(ad.matmul(lt, p), (-1,)), labels)), [p]


MODEL_CASES = {
    "hop_encoder": _encoder_case,
    "node_branch_loss": _node_branch_case,
    "edge_branch_loss": _edge_branch_case,
    "gate": _gate_case,
    "adapter_loss": _adapter_case,
}


@contextmanager
def relu_margin():
    """Track the smallest ``|input|`` seen by any relu while the block runs."""
    seen = [np.inf]
    original = ad.relu

    def tracked(a):
        if a.data.size:
            seen[0] = min(seen[0], float(np.min(np.abs(a.data))))
        return original(a)

    ad.relu = tracked
    try:
        yield seen
    finally:
        ad.relu = original


def smooth_instance(build, rng, tries: int = 100):
    """Draw instances until the loss is evaluated away from every relu kink."""
    for _ in range(tries):
        loss_fn, leaves = build(rng)
        with relu_margin() as seen:
            loss_fn()
        if seen[0] >= KINK_MARGIN:
            return loss_fn, leaves
    raise RuntimeError(f"no instance with relu margin {KINK_MARGIN} in {tries} draws")


def gradient_suite(instances: int = 20, seed: int = 0, cases=None) -> dict[str, float]:
    """Worst relative error per case over ``instances`` random instances."""
    cases = cases or {**OP_CASES, **MODEL_CASES}
    out = {}
    for i, (name, build) in enumerate(cases.items()):
        rng = np.random.default_rng([seed, i])
        worst = 0.0
        for _ in range(instances):
            loss_fn, leaves = smooth_instance(build, rng)
            worst = max(worst, ad.gradcheck(loss_fn, leaves))
        out[name] = worst
    return out


# ---------------------------------------------------------------------------
# oracle suites
# ---------------------------------------------------------------------------


def brute_force_counts(n: int, edges, u: int, v: int, k: int, mask_edge: bool) -> np.ndarray:
    """Distance-bucket counts from plain all-pairs BFS on an adjacency dict."""
    adj = {i: set() for i in range(n)}
    for a, b in edges:
        if a != b:
            adj[a].add(b)
            adj[b].add(a)
    if mask_edge:
        adj[u].discard(v)
        adj[v].discard(u)

    def bfs(src):
        dist = {src: 0}
        queue = deque([src])
        while queue:
            x = queue.popleft()
            for y in adj[x]:
                if y not in dist:
                    dist[y] = dist[x] + 1
                    queue.append(y)
        return dist

    du, dv = bfs(u), bfs(v)
    big = k + 1
    a = np.zeros((k, k))
    b_u = np.zeros(k)
    b_v = np.zeros(k)
    for w in range(n):
        if w in (u, v):
            continue
        x, y = du.get(w, big), dv.get(w, big)
        if x <= k and y <= k:
            a[x - 1, y - 1] += 1
        elif x <= k:
            b_u[x - 1] += 1
        elif y <= k:
            b_v[y - 1] += 1
    return np.concatenate([a.ravel(), b_u, b_v])


def brute_force_ranks(pos: np.ndarray, neg: np.ndarray) -> np.ndarray:
    """Rank by sorting each candidate list, placing the positive after its ties."""
    ranks = np.empty(len(pos), dtype=np.int64)
    for i in range(len(pos)):
        ordered = sorted(neg[i].tolist(), reverse=True)
        ranks[i] = 1 + sum(1 for s in ordered if s >= pos[i])
    return ranks


def oracle_suite(seed: int = 0) -> dict[str, bool]:
    """Cheap exact checks of counts, ranking, late fusion, FLOPs and the temperature."""
    from .adapt import zero_shot_sum
    from .evaluation import FlopsConfig, flops_estimate, pessimistic_ranks
    from .graph import from_edges
    from .structural import exact_counts

    rng = np.random.default_rng(seed)
    out = {}

    ok = True
    for _ in range(10):
        n = int(rng.integers(4, 20))
        pairs = np.array(list(itertools.combinations(range(n), 2)))
        edges = pairs[rng.random(len(pairs)) < 0.25]
        g = from_edges(n, edges, np.zeros((n, 1), np.float32))
        for k in (1, 2, 3):
            for _ in range(3):
                u, v = (int(x) for x in rng.choice(n, 2, replace=False))
                mask = bool(rng.integers(2))
                got = exact_counts(g, (u, v), k, mask_edge=mask).flatten()
                ok &= np.array_equal(got, brute_force_counts(n, edges, u, v, k, mask))
    out["structural_counts"] = bool(ok)

    ok = True
    for _ in range(50):
        p = int(rng.integers(1, 8))
        q = int(rng.integers(1, 10))
        pos = rng.integers(0, 4, size=p).astype(float)
        neg = rng.integers(0, 4, size=(p, q)).astype(float)
        ok &= np.array_equal(pessimistic_ranks(pos, neg), brute_force_ranks(pos, neg))
    out["mrr_ranking"] = bool(ok)

    sig1 = 1.0 / (1.0 + np.exp(-1.0))
    out["late_fusion"] = bool(abs(float(zero_shot_sum(0.0, 0.0)) - sig1) <= 1e-6)

    out["flops"] = flops_estimate(FlopsConfig(N=100, E=200, K=3, F=8)) == 32_000

    sched = TemperatureSchedule(1.0, 0.1, 0.8)
    out["temperature"] = all(temperature_at(t, sched) == max(0.1, 1.0 * 0.8 ** t)
                             for t in range(61))
    return out
