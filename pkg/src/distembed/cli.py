"""Command-line pipeline: load, partition, train on simulated ranks, evaluate, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .evaluation import evaluate_embeddings, make_split
from .graph import edge_count_stats, build_local_partition, load_graph, partition_first_fit, read_labels
from .sampling import Sync, Variant, WalkConfig
from .training import (Hyperparams, batches_per_epoch, train, write_embeddings_binary,
                       write_embeddings_text)
from .transport import cost_model_terms, counter_report

logger = logging.getLogger("distembed")


@dataclass
class RunConfig:
    input: str
    format: str = "edgelist"
    ranks: int = 1
    walk: WalkConfig = field(default_factory=WalkConfig)
    hyper: Hyperparams = field(default_factory=Hyperparams)
    epochs: int | None = None
    seed: int = 0
    schedule: str = "deterministic"
    labels: str | None = None
    out_embeddings: str | None = None
    out_metrics: str | None = None
    trace_pairs: str | None = None
    omit_timings: bool = False


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="distembed", description=__doc__)
    ap.add_argument("--input", required=True, help="edge list or binary CSR file")
    ap.add_argument("--format", choices=["edgelist", "csr"], default="edgelist")
    ap.add_argument("--ranks", type=int, default=1, help="number of simulated ranks")
    ap.add_argument("--variant", choices=[v.value for v in Variant], default="local")
    ap.add_argument("--sync", choices=[s.value for s in Sync], default="allreduce")
    ap.add_argument("--batch-size", type=int, default=1000)
    ap.add_argument("--batches", type=int, default=1)
    ap.add_argument("--epochs", type=int, default=None,
                    help="overrides --batches with epochs x batches-per-epoch")
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--lr", type=float, default=0.025)
    ap.add_argument("--weight-decay", type=float, default=1e-4)
    ap.add_argument("--negatives", type=int, default=1)
    ap.add_argument("--neg-weight", type=float, default=1.0)
    ap.add_argument("--walk-steps", type=int, default=100)
    ap.add_argument("--window", type=int, default=2)
    ap.add_argument("--buffer-size", type=int, default=128)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--labels", help="'vertex_id class_id' lines; enables evaluation")
    ap.add_argument("--out-embeddings", help="text export; a .bin suffix selects the binary format")
    ap.add_argument("--out-metrics", help="metrics JSON (stdout if omitted)")
    ap.add_argument("--trace-pairs", help="dump every trained pair as 'rank u v batch'")
    ap.add_argument("--schedule", choices=["deterministic", "fuzzed"], default="deterministic")
    ap.add_argument("--omit-timings", action="store_true",
                    help="leave CPU times out so repeated runs produce identical metrics")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def config_from_args(args: argparse.Namespace) -> RunConfig:
    walk = WalkConfig(steps=args.walk_steps, buffer_size=args.buffer_size, window=args.window,
                      variant=args.variant, sync=args.sync, batch_size=args.batch_size,
                      num_batches=args.batches)
    hyper = Hyperparams(dim=args.dim, lr=args.lr, weight_decay=args.weight_decay,
                        negatives=args.negatives, neg_weight=args.neg_weight)
    if args.ranks < 1:
        raise ValueError("--ranks must be >= 1")
    if args.epochs is not None and args.epochs < 0:
        raise ValueError("--epochs must be >= 0")
    return RunConfig(args.input, args.format, args.ranks, walk, hyper, args.epochs, args.seed,
                     args.schedule, args.labels, args.out_embeddings, args.out_metrics,
                     args.trace_pairs, args.omit_timings)


def _spread(values) -> dict:
    a = np.asarray(values, dtype=np.float64)
    return {"per_rank": [int(x) for x in a], "min": int(a.min()), "max": int(a.max()),
            "sigma": float(a.std())}


def run_pipeline(cfg: RunConfig) -> dict:
    """Run one configuration end to end and return the metrics document."""
    wall = {}
    t = time.perf_counter()
    graph = load_graph(cfg.input, cfg.format)
    pmap = partition_first_fit(graph, cfg.ranks)
    parts = [build_local_partition(graph, pmap, r) for r in range(cfg.ranks)]
    wall["load_partition"] = time.perf_counter() - t

    walk = cfg.walk
    if cfg.epochs is not None:
        walk = WalkConfig(**{**asdict(walk), "num_batches": cfg.epochs * batches_per_epoch(
            graph, cfg.ranks, walk.batch_size)})
    t = time.perf_counter()
    result = train(graph, pmap, walk, cfg.hyper, seed=cfg.seed, schedule=cfg.schedule,
                   record_trace=cfg.trace_pairs is not None)
    wall["train_world"] = time.perf_counter() - t

    U, _ = result.embeddings()
    if cfg.out_embeddings:
        if cfg.out_embeddings.endswith(".bin"):
            write_embeddings_binary(cfg.out_embeddings, graph.ids, U)
        else:
            write_embeddings_text(cfg.out_embeddings, graph.ids, U)
    if cfg.trace_pairs:
        with open(cfg.trace_pairs, "w") as fh:
            for out in result.outputs:
                for b, pairs in enumerate(out.trace):
                    for u, v in pairs.tolist():
                        fh.write(f"{out.rank} {u} {v} {b}\n")

    metrics = {
        "config": {
            "input": cfg.input, "format": cfg.format, "ranks": cfg.ranks, "seed": cfg.seed,
            "schedule": cfg.schedule, "epochs": cfg.epochs,
            "walk": {k: (v.value if hasattr(v, "value") else v) for k, v in asdict(walk).items()},
            "hyper": asdict(cfg.hyper),
        },
        "kernels": kernels.BACKEND,
        "graph": {"vertices": graph.num_vertices, "edges": graph.num_edges,
                  "partition": list(pmap.boundaries), "edges_per_rank": edge_count_stats(parts)},
        "samples": _spread([sum(o.sample_counts) for o in result.outputs]),
        "walks_invoked": [o.walks_invoked for o in result.outputs],
        "counters": counter_report(result.counters),
        "cost_model": cost_model_terms(result.counters),
    }
    if cfg.labels:
        t = time.perf_counter()
        labels = read_labels(cfg.labels, graph)
        report = evaluate_embeddings(U, make_split(labels, 0.10, cfg.seed))
        wall["evaluate"] = time.perf_counter() - t
        metrics["evaluation"] = report.as_dict()
    if not cfg.omit_timings:
        phases = sorted({k for o in result.outputs for k in o.cpu_seconds})
        metrics["timings"] = {
            "wall_seconds": wall,
            "rank_cpu_seconds": {ph: [o.cpu_seconds.get(ph, 0.0) for o in result.outputs] for ph in phases},
        }
    return metrics


def _failing_module(exc: BaseException) -> str:
    """Innermost package module on the traceback, else the exception's own module."""
    name = type(exc).__module__
    tb = exc.__traceback__
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("distembed.") and mod != __name__:
            name = mod
        tb = tb.tb_next
    return name.rsplit(".", 1)[-1]


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
    except ValueError as e:
        ap.error(str(e))
    try:
        metrics = run_pipeline(cfg)
    except Exception as e:  # noqa: BLE001 - every failure becomes a one-line message
        module = _failing_module(e)
        print(f"distembed: error [{module}] {type(e).__name__}: {e}", file=sys.stderr)
        logger.debug("traceback", exc_info=True)
        return 1
    text = json.dumps(metrics, indent=2, sort_keys=True) + "\n"
    if cfg.out_metrics:
        Path(cfg.out_metrics).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
