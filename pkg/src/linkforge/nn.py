"""Functional layers over a :class:`~linkforge.optim.ParamStore`.

Parameters live in the store under dotted names; every layer takes the
store, its name prefix and the input tensor. Keeping layers as functions
makes it trivial to evaluate the same weights in float32 (training) and
float64 (gradient checks).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import ParamStore


def init_dense(store: ParamStore, prefix: str, fan_in: int, fan_out: int) -> None:
    store.glorot(f"{prefix}.W", fan_in, fan_out)
    store.zeros(f"{prefix}.b", fan_out)


def dense(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    return x @ store[f"{prefix}.W"] + store[f"{prefix}.b"]


def init_mlp(store: ParamStore, prefix: str, sizes) -> None:
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        init_dense(store, f"{prefix}.{i}", a, b)


def mlp_depth(store: ParamStore, prefix: str) -> int:
    depth = 0
    while f"{prefix}.{depth}.W" in store:
        depth += 1
    return depth


def mlp(store: ParamStore, prefix: str, x: Tensor, rate: float = 0.0, rng=None,
        train: bool = False) -> Tensor:
    """Dense layers with ReLU and dropout between them, linear output."""
    depth = mlp_depth(store, prefix)
    for i in range(depth):
        x = dense(store, f"{prefix}.{i}", x)
        if i < depth - 1:
            x = ad.dropout(ad.relu(x), rate, rng, train)
    return x


def init_layer_norm(store: ParamStore, prefix: str, width: int) -> None:
    store.ones(f"{prefix}.g", width)
    store.zeros(f"{prefix}.b", width)


def layer_norm(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, store[f"{prefix}.g"], store[f"{prefix}.b"])


# ---------------------------------------------------------------------------
# hop-token transformer encoder
# ---------------------------------------------------------------------------


def init_encoder(store: ParamStore, prefix: str, d: int, width: int, layers: int,
                 ffn_mult: int = 2) -> None:
    init_dense(store, f"{prefix}.proj", d, width)
    for l in range(layers):
        p = f"{prefix}.layer{l}"
        init_layer_norm(store, f"{p}.ln1", width)
        for name in ("q", "k", "v", "o"):
            init_dense(store, f"{p}.attn.{name}", width, width)
        init_layer_norm(store, f"{p}.ln2", width)
        init_dense(store, f"{p}.ffn.0", width, ffn_mult * width)
        init_dense(store, f"{p}.ffn.1", ffn_mult * width, width)
    init_layer_norm(store, f"{prefix}.ln_out", width)
    init_dense(store, f"{prefix}.readout", 2 * width, 1)


def encoder_layers(store: ParamStore, prefix: str) -> int:
    n = 0
    while f"{prefix}.layer{n}.ln1.g" in store:
        n += 1
    return n


def encode(store: ParamStore, prefix: str, tokens, rate: float = 0.0, rng=None,
           train: bool = False, return_readout: bool = False):
    """Encode ``(B, K+1, d)`` hop tokens into ``(B, F)`` node vectors.

    Pre-norm transformer layers run over the hop tokens; an attention readout
    then scores every hop token against the hop-0 token and adds the
    softmax-weighted hop tokens to it.
    """
    x = tokens if isinstance(tokens, Tensor) else Tensor(np.asarray(tokens))
    if x.ndim != 3:
        raise ad.ShapeError(f"encoder expects (B, K+1, d) tokens, got {x.shape}")
    w_in = store[f"{prefix}.proj.W"]
    if x.shape[2] != w_in.shape[0]:
        raise ad.ShapeError(f"encoder expects feature width {w_in.shape[0]}, got {x.shape[2]}")
    width = w_in.shape[1]
    scale = 1.0 / np.sqrt(width)
    h = dense(store, f"{prefix}.proj", x)
    for l in range(encoder_layers(store, prefix)):
        p = f"{prefix}.layer{l}"
        a = layer_norm(store, f"{p}.ln1", h)
        q = dense(store, f"{p}.attn.q", a)
        k = dense(store, f"{p}.attn.k", a)
        v = dense(store, f"{p}.attn.v", a)
        att = ad.softmax(ad.matmul(q, ad.swap_last(k)) * scale, axis=-1)
        a = dense(store, f"{p}.attn.o", ad.matmul(att, v))
        h = h + ad.dropout(a, rate, rng, train)
        f = layer_norm(store, f"{p}.ln2", h)
        f = ad.dropout(ad.relu(dense(store, f"{p}.ffn.0", f)), rate, rng, train)
        f = dense(store, f"{p}.ffn.1", f)
        h = h + ad.dropout(f, rate, rng, train)
    h = layer_norm(store, f"{prefix}.ln_out", h)
    node = h[:, 0, :]
    hops = x.shape[1] - 1
    if hops == 0:
        return (node, None) if return_readout else node
    neigh = h[:, 1:, :]
    node_rep = ad.mul(ad.reshape(node, (node.shape[0], 1, width)),
                      Tensor(np.ones((1, hops, 1), dtype=node.dtype)))
    scores = dense(store, f"{prefix}.readout", ad.concat([node_rep, neigh], axis=-1))
    alpha = ad.softmax(scores, axis=1)  # (B, K, 1)
    out = node + ad.sum_(alpha * neigh, axis=1)
    return (out, alpha) if return_readout else out
