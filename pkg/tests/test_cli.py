import subprocess
import sys

import pytest

from linkforge import cli
from linkforge.adapt import AdapterWeights
from linkforge.config import TrainConfig, desk_config
from linkforge.evaluation import EvalReport
from linkforge.model import ExpertBank


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out.strip(), err.strip()


def fields(line):
    return dict(part.split("=", 1) for part in line.split()[2:])


@pytest.fixture(scope="module")
def small_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.cfg"
    desk_config(epochs=3, batches_per_shard=2, corpus_shards=2, num_eval_neg=20).save(path)
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, small_cfg):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["pretrain", "--config", small_cfg, "--out-dir", str(out)]) == 0
    return out


def test_selftest(capsys, tmp_path):
    code, out, _ = run(capsys, "selftest", "--instances", "1", "--out-dir", str(tmp_path))
    assert code == 0
    assert out.startswith("linkforge selftest status=ok")


def test_preprocess_cache(capsys, tmp_path, small_cfg):
    argv = ("preprocess", "--config", small_cfg, "--out-dir", str(tmp_path))
    code, out, _ = run(capsys, *argv)
    assert code == 0 and fields(out)["cache"] == "miss"
    names = {p.name for p in (tmp_path / "preprocess").iterdir()}
    assert {"split.lfsp", "edge_feats_test.lfmx", "manifest.json"} <= names
    assert fields(run(capsys, *argv)[1])["cache"] == "hit"
    # a changed setting invalidates the cache
    code, out, _ = run(capsys, *argv, "--no-mask-edge")
    assert fields(out)["cache"] == "miss"


def test_pretrain_outputs(trained):
    bank = ExpertBank.load(trained / cli.BANK_FILE)
    assert bank.expert_names() == ["N0", "N1", "N2", "N3", "E0", "E1", "E2", "E3"]
    log = (trained / "pretrain_log.tsv").read_text().splitlines()
    assert len(log) > 1
    assert TrainConfig.load(trained / "config.txt").epochs == 3


def test_adapt_eval_flow(capsys, trained, small_cfg):
    base = ("--config", small_cfg, "--out-dir", str(trained))
    before = (trained / cli.BANK_FILE).read_bytes()
    code, out, _ = run(capsys, "zeroshot", *base)
    assert code == 0 and 0 < float(fields(out)["mrr"]) <= 1
    code, out, _ = run(capsys, "adapt", *base)
    assert code == 0
    w = AdapterWeights.load(trained / cli.ADAPTER_FILE)
    assert len(w.p) == 8
    code, out, _ = run(capsys, "eval", *base)
    f = fields(out)
    assert code == 0 and f["cache"] == "hit"
    rep = EvalReport.loads((trained / "eval_report.txt").read_text())
    assert float(f["mrr"]) == pytest.approx(rep.mrr, rel=1e-5)
    assert (trained / "expert_mrr.tsv").read_text().count("\n") == 9
    assert (trained / cli.BANK_FILE).read_bytes() == before


def test_analyze(capsys, trained, small_cfg):
    code, out, _ = run(capsys, "analyze", "--config", small_cfg, "--out-dir", str(trained))
    assert code == 0
    assert float(fields(out)["mmd"]) >= 0
    assert (trained / "flops.tsv").is_file() and (trained / "expert_jaccard.tsv").is_file()


def test_fusion_study_command(capsys, tmp_path):
    code, out, _ = run(capsys, "fusion-study", "--steps", "10", "--out-dir", str(tmp_path))
    assert code == 0
    assert (tmp_path / "fusion_study.tsv").read_text().count("\n") == 11


def test_bad_config_exit_2(capsys, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key = 1\n")
    code, _, err = run(capsys, "pretrain", "--config", str(bad), "--out-dir", str(tmp_path))
    assert code == cli.EXIT_CONFIG and "kind=config" in err
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == cli.EXIT_CONFIG


def test_missing_data_exit_3(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--out-dir", str(tmp_path))
    assert code == cli.EXIT_DATA and "kind=data" in err
    cfg = tmp_path / "c.cfg"
    TrainConfig(edges=str(tmp_path / "none.txt"), features=str(tmp_path / "none.lfmx")).save(cfg)
    code, _, _ = run(capsys, "preprocess", "--config", str(cfg), "--out-dir", str(tmp_path))
    assert code == cli.EXIT_DATA


def test_lock_exit_4(capsys, tmp_path):
    (tmp_path / cli.LOCK_NAME).write_text("123")
    code, _, err = run(capsys, "fusion-study", "--steps", "10", "--out-dir", str(tmp_path))
    assert code == cli.EXIT_RUNTIME and "locked" in err
    # the stale lock is left for the user to inspect
    assert (tmp_path / cli.LOCK_NAME).exists()


def test_lock_released_after_run(capsys, tmp_path):
    run(capsys, "fusion-study", "--steps", "10", "--out-dir", str(tmp_path))
    assert not (tmp_path / cli.LOCK_NAME).exists()


def test_threads_resolution(monkeypatch, capsys, tmp_path):
    assert cli.resolve_threads(3, "5") == 3
    assert cli.resolve_threads(None, "5") == 5
    assert cli.resolve_threads(None, "") is None
    monkeypatch.setenv("LINKFORGE_THREADS", "many")
    code, _, err = run(capsys, "fusion-study", "--steps", "10", "--out-dir", str(tmp_path))
    assert code == cli.EXIT_CONFIG and "LINKFORGE_THREADS" in err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "linkforge", "fusion-study", "--steps", "10",
                           "--out-dir", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.startswith("linkforge fusion-study status=ok")
