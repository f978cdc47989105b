"""Command-line entry point: ``tgar {partition,train,eval,gradcheck,oracle}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import signal
import sys
from pathlib import Path

from . import checks
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load, serialize
from .datasets import load_named, planted_partition
from .graph_store import DatasetBundle, GraphFormatError, IngestOptions, load_dataset
from .partitioner import (ClusterAssignment, PartitionError, cluster_louvain, load_clusters, modularity,
                          partition_even, replica_factor, write_clusters, write_plan)
from .trainer import Trainer, TrainingError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

# name -> kwargs for planted_partition; "cora-like" mimics Cora's shape
SYNTHETIC = {
    "planted": {},
    "cora-like": dict(n=2708, classes=7, d_in=1433, p_in=0.0035, p_out=0.0002, split=(20, 500, 1000)),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file (INI sections data/model/train/run)")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--deterministic", action="store_true", default=None,
                        help="exact reductions, bit-reproducible output")
    common.add_argument("--partitions", type=int, help="override run.partitions")
    common.add_argument("--out", help="output directory (overrides run.out)")
    parser = _Parser(prog="tgar", description="Partitioned GNN training engine.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("partition", parents=[common], help="partition the graph and detect clusters")
    sub.add_parser("train", parents=[common], help="train and checkpoint the best-validation parameters")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the full graph")
    ev.add_argument("--checkpoint", help="checkpoint file (default <out>/best.ckpt)")
    gc = sub.add_parser("gradcheck", parents=[common], help="run the verification suite")
    gc.add_argument("--inject-fault", metavar="CHECK", help="corrupt the named check (harness self-test)")
    gc.add_argument("--full", action="store_true", help="larger P sweep")
    orc = sub.add_parser("oracle", parents=[common], help="engine vs dense reference on random graphs")
    orc.add_argument("--graphs", type=int, default=50)
    orc.add_argument("--tol", type=float, default=1e-10)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load(args.config) if args.config else RunConfig()
    return cfg.with_overrides(seed=args.seed, deterministic=args.deterministic, partitions=args.partitions,
                              out=args.out)


def load_bundle(cfg: RunConfig) -> DatasetBundle:
    d = cfg.data
    if d.synthetic:
        if d.synthetic not in SYNTHETIC:
            raise ConfigError(f"unknown synthetic dataset {d.synthetic!r}; choose from {sorted(SYNTHETIC)}")
        return planted_partition(seed=cfg.run.seed, **SYNTHETIC[d.synthetic])
    if d.edges:
        if not (d.features and d.labels):
            raise ConfigError("data.edges needs data.features and data.labels")
        return load_dataset(d.edges, d.features, d.labels, IngestOptions(symmetrize=d.symmetrize),
                            name=d.name or Path(d.edges).stem)
    if d.name:
        return load_named(d.name, symmetrize=d.symmetrize)
    raise ConfigError("config names no dataset (set data.synthetic, data.name or data.edges)")


def _clusters(cfg: RunConfig, bundle: DatasetBundle) -> ClusterAssignment | None:
    if cfg.data.clusters:
        return load_clusters(cfg.data.clusters, bundle.graph.num_nodes)
    if cfg.train.strategy == "cluster":
        return cluster_louvain(bundle.graph, seed=cfg.run.seed)
    return None


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _spec(cfg: RunConfig, bundle: DatasetBundle):
    g = bundle.graph
    return cfg.model.spec(g.feature_dim, bundle.class_count, g.edge_feature_dim)


def cmd_partition(cfg: RunConfig) -> int:
    bundle = load_bundle(cfg)
    g = bundle.graph
    out = _out(cfg)
    plan = partition_even(g, cfg.run.partitions, seed=cfg.run.seed, contiguous=cfg.train.contiguous)
    clusters = load_clusters(cfg.data.clusters, g.num_nodes) if cfg.data.clusters else cluster_louvain(g, seed=cfg.run.seed)
    write_plan(out / "plan.txt", plan)
    write_clusters(out / "clusters.txt", clusters)
    lines = [f"nodes {g.num_nodes}", f"edges {g.num_edges}", f"partitions {plan.partition_count}"]
    for p in range(plan.partition_count):
        lines.append(f"partition {p} masters {int(plan.master_count[p])} mirrors {int(plan.mirror_count[p])} "
                     f"edges {len(plan.edges_of[p])}")
    lines.append(f"replica_factor_placeholder {replica_factor(plan, True)!r}")
    lines.append(f"replica_factor_classic {replica_factor(plan, False)!r}")
    lines.append(f"clusters {clusters.cluster_count}")
    lines.append(f"modularity {modularity(g, clusters.cluster_of)!r}")
    text = "\n".join(lines) + "\n"
    (out / "partition_stats.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


class _StopFlag:
    """Set by SIGINT/SIGTERM; the training loop polls it after each step."""

    def __init__(self):
        self.signum = None
        self._old = {}

    def __enter__(self):
        for s in (signal.SIGINT, signal.SIGTERM):
            try:
                self._old[s] = signal.signal(s, self._handle)
            except ValueError:  # not the main thread
                pass
        return self

    def _handle(self, signum, frame):
        self.signum = signum

    def __exit__(self, *exc):
        for s, h in self._old.items():
            signal.signal(s, h)
        return False


def cmd_train(cfg: RunConfig) -> int:
    bundle = load_bundle(cfg)
    spec = _spec(cfg, bundle)
    out = _out(cfg)
    (out / "config.ini").write_text(serialize(cfg))
    trainer = Trainer(bundle, spec, cfg.training_config(), clusters=_clusters(cfg, bundle))
    try:
        with _StopFlag() as stop:
            try:
                result = trainer.fit(metrics_path=out / "metrics.tsv",
                                     on_step=lambda step, res, ev: stop.signum is not None)
            except TrainingError as exc:
                print(f"error: training diverged at step {exc.step}: {exc}", file=sys.stderr)
                (out / "failed_step.txt").write_text(f"{exc.step}\n")
                return EXIT_NUMERIC
        best = result["best"]
        save_checkpoint(out / "best.ckpt", best["params"], spec.spec_hash(), best["version"], best["step"],
                        {"dataset": bundle.name})
        ev = trainer.evaluate(best["params"])
    finally:
        trainer.engine.close()
    if stop.signum is not None:
        print(f"interrupted by signal {stop.signum} after {result['steps']} steps; checkpoint written")
    print(f"steps {result['steps']} best_step {best['step']} val_acc {ev['val_acc']:.4f}")
    print(f"test acc {ev['test_acc']:.4f} macro_f1 {ev['test_f1']:.4f}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint: str | None) -> int:
    bundle = load_bundle(cfg)
    spec = _spec(cfg, bundle)
    path = Path(checkpoint) if checkpoint else Path(cfg.run.out) / "best.ckpt"
    params, header = load_checkpoint(path, expect_hash=spec.spec_hash())
    trainer = Trainer(bundle, spec, cfg.training_config(), init=params)
    try:
        ev = trainer.evaluate(params)
    finally:
        trainer.engine.close()
    for split in ("train", "val", "test"):
        print(f"{split} acc {ev[f'{split}_acc']:.4f} macro_f1 {ev[f'{split}_f1']:.4f}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, fault: str | None, full: bool) -> int:
    results = checks.run_suite(inject_fault=fault, seed=cfg.run.seed, quick=not full)
    print(checks.format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_oracle(cfg: RunConfig, graphs: int, tol: float) -> int:
    worst = 0.0
    for i in range(graphs):
        seed = cfg.run.seed + i
        for P in (1, 2, 3, 5):
            for mode in ("laplacian", "renormalized"):
                worst = max(worst, checks.oracle_diff(seed, P, mode=mode))
    ok = worst < tol
    print(f"{'PASS' if ok else 'FAIL'} oracle: {graphs} graphs, P in 1,2,3,5, max abs diff {worst:.3e} (tol {tol:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "partition":
            return cmd_partition(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args.inject_fault, args.full)
        if args.command == "oracle":
            return cmd_oracle(cfg, args.graphs, args.tol)
    except (ConfigError, GraphFormatError, PartitionError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
