"""Flat ``key = value`` training configuration with typed validation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # pretraining hyperparameters (large-scale defaults)
    peak_lr: float = 1e-4
    end_lr: float = 1e-5
    warmup: int = 10_000
    epochs: int = 10
    hops: int = 3
    experts: int = 4
    dropout: float = 0.1
    hidden_dim: int = 768
    layers: int = 2
    # architecture details
    score_hidden: int = 768
    score_layers: int = 3
    gate_hidden: int = 64
    gate_latent: int = 32
    norm_mode: str = "symmetric"
    gate_feature: str = "raw"
    # training loop
    batch_size: int = 4096
    batches_per_shard: int = 1
    seed: int = 0
    center_init_edges: int = 10_000
    target_folds: int = 4
    gate_lr_scale: float = 1.0
    hard_routing: bool = False
    tau0: float = 1.0
    tau_final: float = 0.1
    alpha: float = 0.8
    # structural features
    structural_k: int = 2
    mask_edge: bool = True
    sketch_mode: str = "exact"
    sketch_p: int = 12
    sketch_h: int = 128
    # downstream
    split_train: float = 0.4
    split_valid: float = 0.1
    split_test: float = 0.5
    num_eval_neg: int = 100
    adapter_lr: float = 1e-3
    adapter_max_steps: int = 2000
    adapter_patience: int = 20
    adapter_bias: bool = False
    # inputs (empty = bundled demo data / synthetic corpus)
    edges: str = ""
    features: str = ""
    corpus: str = ""
    corpus_shards: int = 8
    threads: int = 1

    def __post_init__(self):
        checks = [
            (0 < self.end_lr <= self.peak_lr, "need 0 < end_lr <= peak_lr"),
            (self.warmup >= 0, "warmup must be >= 0"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (0 <= self.hops <= 10, "hops must be in [0, 10]"),
            (1 <= self.experts <= 64, "experts must be in [1, 64]"),
            (0 <= self.dropout < 1, "dropout must be in [0, 1)"),
            (self.hidden_dim >= 1 and self.score_hidden >= 1, "widths must be >= 1"),
            (self.layers >= 0, "layers must be >= 0"),
            (self.score_layers >= 1, "score_layers must be >= 1"),
            (self.gate_hidden >= 1 and self.gate_latent >= 1, "gate widths must be >= 1"),
            (self.norm_mode in ("symmetric", "row"), "norm_mode must be symmetric or row"),
            (self.gate_feature in ("raw", "hop_mean"), "gate_feature must be raw or hop_mean"),
            (self.batch_size >= 1 and self.batches_per_shard >= 1, "batch sizes must be >= 1"),
            (self.center_init_edges >= 1, "center_init_edges must be >= 1"),
            (1 <= self.target_folds <= 64, "target_folds must be in [1, 64]"),
            (0 <= self.gate_lr_scale <= 10, "gate_lr_scale must be in [0, 10]"),
            (0 < self.tau_final <= self.tau0, "need 0 < tau_final <= tau0"),
            (0 < self.alpha < 1, "alpha must be in (0, 1)"),
            (1 <= self.structural_k <= 10, "structural_k must be in [1, 10]"),
            (self.sketch_mode in ("exact", "sketch"), "sketch_mode must be exact or sketch"),
            (4 <= self.sketch_p <= 18, "sketch_p must be in [4, 18]"),
            (self.sketch_h >= 16, "sketch_h must be >= 16"),
            (min(self.split_train, self.split_valid, self.split_test) > 0
             and abs(self.split_train + self.split_valid + self.split_test - 1) <= 1e-9,
             "split ratios must be positive and sum to 1"),
            (self.num_eval_neg >= 1, "num_eval_neg must be >= 1"),
            (self.adapter_lr > 0 and self.adapter_max_steps >= 1, "bad adapter settings"),
            (self.adapter_patience >= 1, "adapter_patience must be >= 1"),
            (self.corpus_shards >= 1, "corpus_shards must be >= 1"),
            (self.threads >= 1, "threads must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def ratios(self) -> tuple[float, float, float]:
        return (self.split_train, self.split_valid, self.split_test)

    def total_steps(self, num_shards: int) -> int:
        return self.epochs * num_shards * self.batches_per_shard

    def with_overrides(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)

    # -- text form --------------------------------------------------------

    def dumps(self) -> str:
        lines = ["# linkforge training configuration"]
        for key, value in asdict(self).items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value!r}" if isinstance(value, float) else f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = _parse(types[key], value, key)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.loads(text)

    def save(self, path) -> None:
        from .formats import atomic_write_text

        atomic_write_text(path, self.dumps())


def _parse(kind, value: str, key: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if kind == "int":
            return int(value.replace("_", ""))
        if kind == "float":
            return float(value)
        return value.strip("'\"")
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r} (expected {kind})") from None


def desk_config(**overrides) -> TrainConfig:
    """Scaled-down settings that pretrain a bank in seconds on a laptop CPU."""
    base = dict(peak_lr=3e-3, end_lr=3e-4, warmup=20, epochs=20, hidden_dim=32,
                score_hidden=16, batch_size=256, batches_per_shard=8,
                center_init_edges=2000, dropout=0.1, gate_lr_scale=0.0)
    base.update(overrides)
    return TrainConfig(**base)
