import pytest
from hypothesis import given, settings, strategies as st

from linkforge.config import ConfigError, TrainConfig, desk_config


def test_large_scale_defaults():
    cfg = TrainConfig()
    assert (cfg.peak_lr, cfg.end_lr, cfg.warmup, cfg.epochs) == (1e-4, 1e-5, 10_000, 10)
    assert (cfg.hops, cfg.experts, cfg.dropout, cfg.hidden_dim, cfg.layers) == (3, 4, 0.1, 768, 2)
    assert cfg.alpha == 0.8


def test_round_trip_default_and_desk(tmp_path):
    for cfg in (TrainConfig(), desk_config(), desk_config(edges="a b.txt", mask_edge=False)):
        assert TrainConfig.loads(cfg.dumps()) == cfg
        cfg.save(tmp_path / "c.cfg")
        assert TrainConfig.load(tmp_path / "c.cfg") == cfg


@settings(max_examples=40, deadline=None)
@given(lr=st.floats(1e-6, 1.0), ratio=st.floats(0.01, 1.0), seed=st.integers(0, 2**31),
       experts=st.integers(1, 64), drop=st.floats(0, 0.99), mask=st.booleans())
def test_round_trip_property(lr, ratio, seed, experts, drop, mask):
    cfg = TrainConfig(peak_lr=lr, end_lr=lr * ratio, seed=seed, experts=experts, dropout=drop,
                      mask_edge=mask)
    assert TrainConfig.loads(cfg.dumps()) == cfg


def test_comments_and_partial_files():
    cfg = TrainConfig.loads("# comment\n\nepochs = 3  # trailing\nseed=7\nmask_edge = no\n")
    assert (cfg.epochs, cfg.seed, cfg.mask_edge) == (3, 7, False)
    assert cfg.hops == 3


@pytest.mark.parametrize("text", [
    "colour = red",
    "epochs = three",
    "epochs = 1\nepochs = 2",
    "just words",
    "epochs = 0",
    "peak_lr = 1e-5\nend_lr = 1e-4",
    "split_train = 0.5",
    "mask_edge = maybe",
    "norm_mode = column",
])
def test_rejects_bad_configs(text):
    with pytest.raises(ConfigError):
        TrainConfig.loads(text)


def test_missing_file():
    with pytest.raises(ConfigError):
        TrainConfig.load("/nonexistent/linkforge.cfg")


def test_total_steps_and_overrides():
    cfg = desk_config()
    assert cfg.total_steps(8) == cfg.epochs * 8 * cfg.batches_per_shard
    assert cfg.with_overrides(seed=3).seed == 3
    with pytest.raises(ConfigError):
        cfg.with_overrides(threads=0)
