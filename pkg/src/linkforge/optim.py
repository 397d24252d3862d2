"""Parameter storage, Adam, and the learning-rate / temperature schedules."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import formats
from .autodiff import Tensor


class ParamStore:
    """Named trainable tensors with their Adam state.

    Iteration order is insertion order, which model builders keep fixed so
    initialization consumes the random stream identically on every run.
    """

    def __init__(self, dtype=np.float32, seed: int = 0):
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        self.t[name] = 0
        return t

    def glorot(self, name: str, fan_in: int, fan_out: int) -> Tensor:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, self.rng.uniform(-limit, limit, size=(fan_in, fan_out)))

    def zeros(self, name: str, *shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, *shape) -> Tensor:
        return self.add(name, np.ones(shape))

    def zero_grad(self, names=None):
        for name in names or self.params:
            self.params[name].grad = None

    def grad_norm(self, prefix: str = "") -> float:
        total = 0.0
        for name, t in self.params.items():
            if name.startswith(prefix) and t.grad is not None:
                total += float(np.sum(t.grad.astype(np.float64) ** 2))
        return float(np.sqrt(total))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            if name in self.params:
                if self.params[name].shape != value.shape:
                    raise ValueError(f"shape mismatch for {name}: "
                                     f"{self.params[name].shape} vs {value.shape}")
                self.params[name].data = np.array(value, dtype=self.dtype)
            else:
                self.add(name, value)

    def astype(self, dtype) -> "ParamStore":
        other = ParamStore(dtype)
        for name, t in self.params.items():
            other.add(name, t.data)
        return other

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def to_bytes(self, metadata: dict | None = None, with_optimizer: bool = False) -> bytes:
        opt = None
        if with_optimizer:
            opt = {f"m/{k}": v for k, v in self.m.items()}
            opt.update({f"v/{k}": v for k, v in self.v.items()})
            opt.update({f"t/{k}": np.array([t], dtype=np.float32) for k, t in self.t.items()})
        return formats.checkpoint_to_bytes(self.state_dict(), metadata, opt)

    @classmethod
    def from_bytes(cls, buf: bytes) -> tuple["ParamStore", dict]:
        params, meta, opt = formats.checkpoint_from_bytes(buf)
        store = cls(np.float32)
        for name, value in params.items():
            store.add(name, value)
        for key, value in opt.items():
            if key.startswith("t/"):
                store.t[key[2:]] = int(value[0])
            elif key.startswith("m/"):
                store.m[key[2:]] = value
            elif key.startswith("v/"):
                store.v[key[2:]] = value
        return store, meta


def adam_step(store: ParamStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
              names=None) -> None:
    """One bias-corrected Adam update of every parameter with a gradient.

    Step counts are tracked per parameter, so branches trained one after the
    other each get a fresh bias correction. Raises ``FloatingPointError``
    without touching any parameter if a gradient is non-finite.
    """
    names = [n for n in (names or store.params) if store.params[n].grad is not None]
    for n in names:
        if not np.all(np.isfinite(store.params[n].grad)):
            raise FloatingPointError(f"non-finite gradient for parameter {n!r}; step aborted")
    b1, b2 = betas
    for n in names:
        store.t[n] += 1
        c1 = 1.0 - b1 ** store.t[n]
        c2 = 1.0 - b2 ** store.t[n]
        p = store.params[n]
        g = p.grad.astype(store.dtype, copy=False)
        m = store.m[n]
        v = store.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(store.dtype, copy=False)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float = 1e-4
    end_lr: float = 1e-5
    warmup_steps: int = 10_000
    total_steps: int = 100_000

    def __post_init__(self):
        if not 0 < self.end_lr <= self.peak_lr:
            raise ValueError("need 0 < end_lr <= peak_lr")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Linear warmup from 0 to ``peak_lr`` then linear decay to ``end_lr``."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.peak_lr * (1.0 - frac) + cfg.end_lr * frac


@dataclass(frozen=True)
class TemperatureSchedule:
    tau0: float = 1.0
    tau_final: float = 0.1
    alpha: float = 0.8

    def __post_init__(self):
        if not 0 < self.tau_final <= self.tau0:
            raise ValueError("need 0 < tau_final <= tau0")
        if not 0 < self.alpha < 1:
            raise ValueError("need 0 < alpha < 1")


def temperature_at(epoch: int, sched: TemperatureSchedule) -> float:
    """``max(tau_final, tau0 * alpha ** epoch)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return max(sched.tau_final, sched.tau0 * sched.alpha ** epoch)
