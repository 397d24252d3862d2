import numpy as np
import pytest

from linkforge.fusion_study import MODES, FusionConfig, _build, encoder_checksum, run_fusion_study
from linkforge.graph import from_edges
from linkforge.synthetic import fusion_graph


def test_paired_runs_share_encoder_init():
    a = _build("node_only", 16, FusionConfig(), 3)
    b = _build("early_fusion", 16, FusionConfig(), 3)
    assert encoder_checksum(a) == encoder_checksum(b)
    assert a.checksum() != b.checksum()


def test_short_runs_rejected():
    with pytest.raises(ValueError):
        run_fusion_study(fusion_graph(seed=0), steps=9)


def test_report_shape_and_tsv():
    rep = run_fusion_study(fusion_graph(n=60, seed=1), steps=12, seed=1)
    assert rep.steps == 12
    for mode in MODES:
        assert rep.grad_norms[mode].shape == (12,)
        assert np.all(np.isfinite(rep.losses[mode]))
        # zero-initialized output layer: both start at the prior
        assert rep.losses[mode][0] == pytest.approx(np.log(2), abs=1e-6)
    lines = rep.to_tsv().splitlines()
    assert len(lines) == 13 and lines[1].startswith("1\t")


def test_deterministic():
    g = fusion_graph(n=60, seed=2)
    a = run_fusion_study(g, steps=10, seed=2)
    b = run_fusion_study(g, steps=10, seed=2)
    for mode in MODES:
        assert np.array_equal(a.grad_norms[mode], b.grad_norms[mode])
        assert np.array_equal(a.losses[mode], b.losses[mode])


def test_zero_features_give_vanishing_encoder_gradient():
    # features carry nothing: every node embeds identically and the node-only
    # loss cannot move the encoder
    base = fusion_graph(n=60, seed=4)
    g = from_edges(60, base.edges(), np.zeros((60, 4), np.float32))
    rep = run_fusion_study(g, steps=60, seed=4)
    assert rep.grad_norms["node_only"].max() < 1e-6


def test_early_fusion_shrinks_encoder_gradient():
    rep = run_fusion_study(fusion_graph(seed=0), steps=100, seed=0)
    assert rep.mean_grad("early_fusion") < rep.mean_grad("node_only")
    assert rep.loss_at("early_fusion", 20) < rep.loss_at("node_only", 20)
