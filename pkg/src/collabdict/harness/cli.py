"""Command line entry point: ``collabdict run|gen|audit|graph``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .. import ggm, privacy, topology
from ..errors import StageError
from .config import load_config
from .experiment import export_report, load_data_dir, run_experiment, write_data_dir
from .synthetic import SyntheticSpec, generate_synthetic

GRAPH_BUILDERS = {
    "inverse-chord": topology.build_cycle_inverse_chord,
    "complete": topology.build_complete,
    "path": topology.build_path,
}


def _cmd_run(args) -> int:
    with _stage("config"):
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        out = args.out or cfg.out_dir
    report = run_experiment(cfg)
    with _stage("export"):
        if out:
            paths = export_report(report, out)
            print(f"wrote {', '.join(str(p) for p in paths.values())}")
    auc = "n/a" if report.auc is None else f"{report.auc:.4f}"
    print(f"model={report.model} auc={auc} test_samples={len(report.scores)} "
          f"total_seconds={report.timings['total']:.2f}")
    return 0


def _cmd_gen(args) -> int:
    with _stage("config"):
        spec = SyntheticSpec(**json.loads(Path(args.spec).read_text()))
    with _stage("data"):
        data = generate_synthetic(spec, args.seed)
        write_data_dir(args.out, data.datasets, data.labels)
        truth = {"means": data.means.tolist(), "covariances": data.covariances.tolist(),
                 "weights": data.weights.tolist()}
        (Path(args.out) / "truth.json").write_text(json.dumps(truth, indent=2))
    print(f"wrote {spec.S} participant files to {args.out}")
    return 0


def _cmd_audit(args) -> int:
    with _stage("load"):
        model, weights = ggm.load_checkpoint(args.model)
        datasets, _ = load_data_dir(args.data)
        if len(datasets) != len(weights):
            raise ValueError(f"checkpoint has {len(weights)} participants, data has {len(datasets)}")
        dim = model.means.shape[1]
        for s, d in enumerate(datasets):
            if d.shape[1] != dim:
                raise ValueError(f"participant {s} has {d.shape[1]} features, model expects {dim}")
    with _stage("privacy"):
        rep = privacy.privacy_report(model, weights, datasets, ell0=args.ell0, trials=args.trials,
                                     quantile=args.quantile, seed=args.seed)
    text = json.dumps(rep, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


def _cmd_graph(args) -> int:
    with _stage("graph"):
        if args.kind == "random":
            graph = topology.build_random_connected(args.size, args.p, seed=args.seed)
        else:
            graph = GRAPH_BUILDERS[args.kind](args.size)
        topology.write_edge_list(graph, args.out)
        gap = topology.spectral_gap(topology.consensus_weights(graph)).gap
    print(f"wrote {graph.size} nodes, {len(graph.edges())} edges, spectral gap {gap:.6g}")
    return 0


class _stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError) and isinstance(exc, Exception):
            raise StageError(self.name, exc) from exc
        return False


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="collabdict", description="Decentralized multi-task anomaly detection.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("gen", help="write a synthetic dataset from a JSON spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("audit", help="privacy report for a GGM checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--ell0", type=float, default=2.0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--quantile", type=float, default=0.99)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_audit)

    p = sub.add_parser("graph", help="write a communication graph as an edge list")
    p.add_argument("--kind", choices=[*GRAPH_BUILDERS, "random"], default="inverse-chord")
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--p", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_graph)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"collabdict {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
