"""Vectorized HyperLogLog registers and MinHash signatures.

Sketches are plain numpy arrays so that whole node populations can be built
and merged at once: a HyperLogLog sketch is a ``uint8`` register row of
length ``2**p`` (merge = elementwise max), a MinHash signature is a
``uint64`` row of length ``h`` (merge = elementwise min).
"""

from __future__ import annotations

import math

import numpy as np

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)


def splitmix64(x) -> np.ndarray:
    """SplitMix64 finalizer applied elementwise (wrapping uint64 arithmetic)."""
    with np.errstate(over="ignore"):
        z = np.asarray(x, dtype=_U64) + _GOLDEN
        z = (z ^ (z >> _U64(30))) * _MIX1
        z = (z ^ (z >> _U64(27))) * _MIX2
        return z ^ (z >> _U64(31))


def hash_items(items, seed: int) -> np.ndarray:
    items = np.asarray(items, dtype=np.int64).astype(_U64)
    return splitmix64(items ^ splitmix64(_U64(seed)))


def _clz64(w: np.ndarray) -> np.ndarray:
    w = w.astype(_U64, copy=True)
    n = np.zeros(w.shape, dtype=np.int64)
    for s in (32, 16, 8, 4, 2, 1):
        top_zero = w < (_U64(1) << _U64(64 - s))
        n += np.where(top_zero, s, 0)
        w = np.where(top_zero, w << _U64(s), w)
    return n + (w == 0)


def hll_registers(hashes: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Register index and rank for each 64-bit hash (one item per hash)."""
    idx = (hashes >> _U64(64 - p)).astype(np.int64)
    rank = np.minimum(_clz64(hashes << _U64(p)), 64 - p) + 1
    return idx, rank.astype(np.uint8)


def hll_from_items(items, p: int, seed: int) -> np.ndarray:
    reg = np.zeros(1 << p, dtype=np.uint8)
    if len(items):
        idx, rank = hll_registers(hash_items(items, seed), p)
        np.maximum.at(reg, idx, rank)
    return reg


def _sigma(x: float) -> float:
    if x == 1.0:
        return math.inf
    y, z = 1.0, x
    while True:
        x *= x
        prev = z
        z += x * y
        y += y
        if z == prev:
            return z


def _tau(x: float) -> float:
    if x == 0.0 or x == 1.0:
        return 0.0
    y, z = 1.0, 1.0 - x
    while True:
        x = math.sqrt(x)
        prev = z
        y *= 0.5
        z -= (1.0 - x) ** 2 * y
        if z == prev:
            return z / 3.0


def hll_estimate(registers: np.ndarray) -> float:
    """Cardinality estimate using Ertl's improved raw estimator.

    Unlike the classic estimator this needs neither linear-counting
    switch-over nor empirical bias tables and is close to unbiased across
    the whole range.
    """
    registers = np.asarray(registers)
    m = registers.shape[-1]
    p = int(round(math.log2(m)))
    q = 64 - p
    counts = np.bincount(registers.ravel(), minlength=q + 2)
    if counts[0] >= m - 1:
        # zero or one occupied register: the set has that many items
        return float(m - counts[0])
    z = m * _tau(1.0 - counts[q + 1] / m)
    for k in range(q, 0, -1):
        z = 0.5 * (z + counts[k])
    z += m * _sigma(counts[0] / m)
    if math.isinf(z):
        return 0.0
    return m * m / (2.0 * math.log(2.0) * z)


def hll_estimate_rows(registers: np.ndarray) -> np.ndarray:
    return np.array([hll_estimate(r) for r in registers.reshape(-1, registers.shape[-1])])


def minhash_seeds(h: int, seed: int) -> np.ndarray:
    return splitmix64(np.arange(h, dtype=_U64) + splitmix64(_U64(seed) ^ _U64(0xA5A5A5A5)))


def minhash_from_items(items, seeds: np.ndarray) -> np.ndarray:
    """Signature of a set: per hash function, the minimum hashed value."""
    items = np.asarray(items, dtype=np.int64).astype(_U64)
    if len(items) == 0:
        return np.full(len(seeds), np.iinfo(_U64).max, dtype=_U64)
    vals = splitmix64(items[:, None] ^ seeds[None, :])
    return vals.min(axis=0)


def jaccard_estimate(sig_a: np.ndarray, sig_b: np.ndarray) -> float:
    return float(np.mean(sig_a == sig_b))
