"""Batch command-line interface.

Every command prints one summary line ``linkforge <command> status=ok k=v ...``
on success. Exit codes: 0 success, 2 configuration or usage error, 3 data
error (missing or malformed inputs), 4 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from contextlib import contextmanager
from importlib import resources
from pathlib import Path

import numpy as np

from . import formats
from .config import ConfigError, TrainConfig
from .graph import Graph, GraphError, load_graph, partition, split_edges
from .hops import propagate_hops, save_hops
from .structural import distance_matrix, edge_features, save_edge_features

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

COMMANDS = ("preprocess", "pretrain", "zeroshot", "adapt", "eval", "analyze", "fusion-study",
            "selftest")
LOCK_NAME = ".linkforge.lock"
BANK_FILE = "bank.lfck"
ADAPTER_FILE = "adapter.txt"


class DataError(RuntimeError):
    pass


class LockError(RuntimeError):
    pass


def _data_path(name: str) -> Path:
    return Path(str(resources.files("linkforge") / "data" / name))


# ---------------------------------------------------------------------------
# configuration and inputs
# ---------------------------------------------------------------------------


def load_config(args) -> TrainConfig:
    """Config file (or the bundled ``desk`` preset) plus command-line overrides."""
    if args.config is None:
        cfg = TrainConfig()
    elif args.config == "desk":
        cfg = TrainConfig.load(_data_path("desk.cfg"))
    else:
        cfg = TrainConfig.load(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.mask_edge is not None:
        overrides["mask_edge"] = args.mask_edge
    if args.hard_routing:
        overrides["hard_routing"] = True
    threads = resolve_threads(args.threads, os.environ.get("LINKFORGE_THREADS"))
    if threads is not None:
        overrides["threads"] = threads
    return cfg.with_overrides(**overrides) if overrides else cfg


def resolve_threads(flag, env) -> int | None:
    if flag is not None:
        return flag
    if env in (None, ""):
        return None
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"LINKFORGE_THREADS must be an integer, got {env!r}") from None


def _read_graph(edges, features) -> Graph:
    for path in (edges, features):
        if not Path(path).is_file():
            raise DataError(f"missing input file {path}")
    return load_graph(edges, features)


def demo_graph() -> Graph:
    return _read_graph(_data_path("demo_edges.txt"), _data_path("demo_features.lfmx"))


def downstream_graph(cfg: TrainConfig) -> Graph:
    if bool(cfg.edges) != bool(cfg.features):
        raise ConfigError("set both 'edges' and 'features', or neither for the demo graph")
    return _read_graph(cfg.edges, cfg.features) if cfg.edges else demo_graph()


def corpus_graphs(cfg: TrainConfig) -> list[Graph]:
    """Pretraining shards.

    An empty ``corpus`` selects the synthetic two-mechanism corpus. A
    directory with ``shard_*/edges.txt`` subdirectories is read shard by
    shard; a directory holding a single ``edges.txt``/``features.lfmx`` pair is
    partitioned into ``corpus_shards`` parts.
    """
    if not cfg.corpus:
        from .synthetic import pretraining_corpus

        return pretraining_corpus(cfg.corpus_shards, seed=cfg.seed)
    root = Path(cfg.corpus)
    if not root.is_dir():
        raise DataError(f"corpus directory {root} does not exist")
    shard_dirs = sorted(p for p in root.glob("shard_*") if p.is_dir())
    if shard_dirs:
        return [_read_graph(d / "edges.txt", d / "features.lfmx") for d in shard_dirs]
    g = _read_graph(root / "edges.txt", root / "features.lfmx")
    return partition(g, cfg.corpus_shards, cfg.seed).parts


def _load_bank(out: Path):
    from .model import ExpertBank

    path = out / BANK_FILE
    if not path.is_file():
        raise DataError(f"no bank at {path}; run 'pretrain' first")
    return ExpertBank.load(path)


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------


@contextmanager
def output_lock(out: Path):
    """Exclusive lock file in the output directory for the duration of a command."""
    out.mkdir(parents=True, exist_ok=True)
    path = out / LOCK_NAME
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{out} is locked by another run (remove {path} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


def summary(command: str, **fields) -> str:
    parts = [f"linkforge {command} status=ok"]
    for key, value in fields.items():
        if isinstance(value, float):
            value = f"{value:.6g}"
        parts.append(f"{key}={value}")
    return " ".join(parts)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_preprocess(cfg: TrainConfig, out: Path, args) -> str:
    """Hop features of the observed graph and structural features of every split."""
    g = downstream_graph(cfg)
    target = out / "preprocess"
    manifest_path = target / "manifest.json"
    key = {"graph": g.fingerprint(), "hops": cfg.hops, "norm_mode": cfg.norm_mode,
           "structural_k": cfg.structural_k, "mask_edge": cfg.mask_edge, "seed": cfg.seed,
           "ratios": list(cfg.ratios), "num_eval_neg": cfg.num_eval_neg}
    if manifest_path.is_file():
        old = json.loads(manifest_path.read_text())
        files = old.get("files", {})
        if old.get("key") == key and all(
                (target / name).is_file() and _sha256(target / name) == digest
                for name, digest in files.items()):
            return summary("preprocess", cache="hit", files=len(files), out=target)

    split = split_edges(g, cfg.ratios, cfg.num_eval_neg, cfg.seed)
    observed = g.with_edges(split.train_pos)
    written = save_hops(propagate_hops(observed, cfg.hops, cfg.norm_mode), target)
    formats.write_split(target / "split.lfsp", split)
    written.append(target / "split.lfsp")
    dist = distance_matrix(observed, cfg.structural_k)
    for which in ("train", "valid", "test"):
        path = target / f"edge_feats_{which}.lfmx"
        save_edge_features(path, edge_features(observed, split.positives(which), cfg.structural_k,
                                               mask_edge=cfg.mask_edge, dist=dist))
        written.append(path)
    manifest = {"key": key, "files": {p.name: _sha256(p) for p in written}}
    formats.atomic_write_text(manifest_path, json.dumps(manifest, indent=1, sort_keys=True))
    return summary("preprocess", cache="miss", files=len(written), out=target)


def cmd_pretrain(cfg: TrainConfig, out: Path, args) -> str:
    from .pretrain import LOG_HEADER, pretrain

    branches = ("node", "edge") if args.branch == "both" else (args.branch,)
    shards = corpus_graphs(cfg)
    lines = [LOG_HEADER]
    start = time.perf_counter()
    bank, reports = pretrain(shards, cfg, branches, log=lambda rec: lines.append(rec.line()))
    bank.save(out / BANK_FILE)
    formats.atomic_write_text(out / "pretrain_log.tsv", "\n".join(lines) + "\n")
    cfg.save(out / "config.txt")
    fields = {"bank": out / BANK_FILE, "fingerprint": bank.meta.fingerprint,
              "shards": len(shards), "seconds": round(time.perf_counter() - start, 1)}
    for rep in reports:
        fields[f"probe_{rep.branch}"] = rep.probe_losses[-1]
    return summary("pretrain", **fields)


def cmd_zeroshot(cfg: TrainConfig, out: Path, args) -> str:
    from .pipeline import prepare_downstream, zero_shot_report

    bank = _load_bank(out)
    rep = zero_shot_report(prepare_downstream(bank, downstream_graph(cfg), cfg, cfg.seed))
    rep.save(out / "zeroshot_report.txt")
    return summary("zeroshot", mrr=rep.mrr, report=out / "zeroshot_report.txt")


def cmd_adapt(cfg: TrainConfig, out: Path, args) -> str:
    from .adapt import fit_adapter
    from .pipeline import cached_downstream

    bank = _load_bank(out)
    ds, hit = cached_downstream(bank, downstream_graph(cfg), cfg, cfg.seed, out / "cache")
    w = fit_adapter(ds.train, cfg.adapter_lr, cfg.adapter_max_steps, cfg.seed, valid=ds.valid,
                    patience=cfg.adapter_patience, use_bias=cfg.adapter_bias)
    w.save(out / ADAPTER_FILE)
    return summary("adapt", cache="hit" if hit else "miss", steps=w.steps, loss=w.final_loss,
                   adapter=out / ADAPTER_FILE)


def cmd_eval(cfg: TrainConfig, out: Path, args) -> str:
    from .adapt import AdapterWeights, adapted_logit
    from .pipeline import cached_downstream, single_expert_reports

    bank = _load_bank(out)
    if not (out / ADAPTER_FILE).is_file():
        raise DataError(f"no adapter at {out / ADAPTER_FILE}; run 'adapt' first")
    w = AdapterWeights.load(out / ADAPTER_FILE)
    ds, hit = cached_downstream(bank, downstream_graph(cfg), cfg, cfg.seed, out / "cache")
    if tuple(w.expert_ids) != tuple(ds.train.expert_ids):
        raise DataError("adapter experts do not match the bank")
    rep = ds.test_report(adapted_logit(w, ds.test_pos), adapted_logit(w, ds.test_neg), "adapt")
    rep.save(out / "eval_report.txt")
    singles = single_expert_reports(ds)
    rows = ["expert\tmrr"] + [f"{name}\t{r.mrr!r}" for name, r in singles.items()]
    formats.atomic_write_text(out / "expert_mrr.tsv", "\n".join(rows) + "\n")
    best = max(r.mrr for r in singles.values())
    return summary("eval", mrr=rep.mrr, best_single=best, cache="hit" if hit else "miss",
                   report=out / "eval_report.txt")


def cmd_analyze(cfg: TrainConfig, out: Path, args) -> str:
    """Expert overlap on test edges, feature shift to the corpus, cost table."""
    from .evaluation import FlopsConfig, expert_jaccard, flops_table, mmd, subsample_rows
    from .pipeline import prepare_downstream

    bank = _load_bank(out)
    g = downstream_graph(cfg)
    ds = prepare_downstream(bank, g, cfg, cfg.seed)
    jac = expert_jaccard(bank, ds.observed, ds.split, "test", scorer=ds.scorer)
    names = bank.expert_names()
    rows = ["expert\t" + "\t".join(names)]
    rows += [names[i] + "\t" + "\t".join(f"{v:.4f}" for v in jac[i]) for i in range(len(names))]
    formats.atomic_write_text(out / "expert_jaccard.tsv", "\n".join(rows) + "\n")

    corpus = np.concatenate([s.features for s in corpus_graphs(cfg)])
    shift = mmd(subsample_rows(g.features, seed=cfg.seed), subsample_rows(corpus, seed=cfg.seed))

    d_avg = max(2 * g.num_edges / g.node_count, 1.0)
    fc = FlopsConfig(N=g.node_count, E=g.num_edges, K=cfg.hops, F=cfg.hidden_dim, d_avg=d_avg)
    formats.atomic_write_text(out / "flops.tsv", flops_table(
        [("precomputed_hops", fc, "palp"), ("subgraph_per_edge", fc, "subgraph")]))
    off = jac[~np.eye(len(jac), dtype=bool)]
    formats.atomic_write_text(out / "analysis.txt",
                              f"mmd = {shift!r}\nmean_offdiag_jaccard = {float(off.mean())!r}\n")
    return summary("analyze", mmd=shift, mean_jaccard=float(off.mean()), out=out)


def cmd_fusion_study(cfg: TrainConfig, out: Path, args) -> str:
    from .fusion_study import run_fusion_study
    from .synthetic import fusion_graph

    g = _read_graph(cfg.edges, cfg.features) if cfg.edges else fusion_graph(seed=cfg.seed)
    rep = run_fusion_study(g, steps=args.steps, seed=cfg.seed)
    formats.atomic_write_text(out / "fusion_study.tsv", rep.to_tsv())
    last = min(100, rep.steps)
    step = min(20, rep.steps)
    return summary("fusion-study",
                   grad_node_only=rep.mean_grad("node_only", 10, last),
                   grad_early_fusion=rep.mean_grad("early_fusion", 10, last),
                   loss_node_only=rep.loss_at("node_only", step),
                   loss_early_fusion=rep.loss_at("early_fusion", step),
                   out=out / "fusion_study.tsv")


def cmd_selftest(cfg: TrainConfig, out: Path, args) -> str:
    from .checks import GRAD_TOLERANCE, gradient_suite, oracle_suite

    grads = gradient_suite(args.instances, cfg.seed)
    oracles = oracle_suite(cfg.seed)
    bad = [n for n, e in grads.items() if not e <= GRAD_TOLERANCE]
    bad += [n for n, ok in oracles.items() if not ok]
    if bad:
        raise RuntimeError("selftest failed: " + ", ".join(bad))
    return summary("selftest", gradient_cases=len(grads), oracle_cases=len(oracles),
                   worst_grad_error=max(grads.values()))


HANDLERS = {
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "zeroshot": cmd_zeroshot,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "fusion-study": cmd_fusion_study,
    "selftest": cmd_selftest,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file, or 'desk' for the bundled small preset")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", default="linkforge_out")
    common.add_argument("--threads", type=int, help="BLAS threads (env LINKFORGE_THREADS)")
    common.add_argument("--branch", choices=("node", "edge", "both"), default="both")
    common.add_argument("--mask-edge", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--hard-routing", action="store_true")

    parser = _Parser(prog="linkforge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=HANDLERS[name].__doc__)
        if name == "fusion-study":
            p.add_argument("--steps", type=int, default=100)
        if name == "selftest":
            p.add_argument("--instances", type=int, default=20)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"linkforge {args.command} status=error kind=config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out_dir)
    try:
        from threadpoolctl import threadpool_limits

        with output_lock(out), threadpool_limits(limits=cfg.threads):
            line = HANDLERS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"linkforge {args.command} status=error kind=config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, GraphError, formats.FormatError) as exc:
        print(f"linkforge {args.command} status=error kind=data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 -- any other failure is a runtime failure
        print(f"linkforge {args.command} status=error kind=runtime: "
              f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(line)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
