"""Command-line entry point: ``hflight run | cost | validate``.

Exit codes: 0 success, 1 configuration or parse error, 2 runtime error,
3 topology has legality violations.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from hflight import analytics
from hflight.experiment import ConfigError, ExperimentConfig, run_experiment
from hflight.runtime import RoundError
from hflight.topology import TopologyError, balanced_tree, parse_yaml, validate

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ILLEGAL = 0, 1, 2, 3


def _pair(text: str) -> tuple[int, int]:
    try:
        b, h = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected branching,height, got {text!r}") from None
    return b, h


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hflight", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a federated training experiment")
    run.add_argument("--config", help="JSON config (e.g. a previous run's config.json); flags are ignored")
    src = run.add_mutually_exclusive_group()
    src.add_argument("--tree", type=_pair, help="balanced tree as branching,height")
    src.add_argument("--topo", help="topology YAML file")
    src.add_argument("--workers", type=int, help="two-tier topology with this many workers")
    run.add_argument("--strategy", default="fedavg", choices=["fedsgd", "fedavg", "fedprox", "fedasync"])
    run.add_argument("--mu", type=float, default=0.01)
    run.add_argument("--beta", type=float, default=0.5)
    run.add_argument("--participation", type=float, default=1.0)
    run.add_argument("--model", default="mlp", choices=["tinynet", "linear", "mlp", "smallmlp"])
    run.add_argument("--hidden", type=_ints, default=(32,))
    run.add_argument("--data", default="synth", choices=["synth", "idx", "csv"])
    run.add_argument("--images")
    run.add_argument("--labels")
    run.add_argument("--csv")
    run.add_argument("--classes", type=int, default=4)
    run.add_argument("--dims", type=int, default=8)
    run.add_argument("--per-class", type=int, default=100)
    run.add_argument("--spread", type=float, default=1.0)
    run.add_argument("--alpha-samples", type=float, default=3.0)
    run.add_argument("--alpha-labels", type=float, default=1.0)
    run.add_argument("--num-samples", type=int)
    run.add_argument("--rounds", type=int, default=5)
    run.add_argument("--seed", type=int)
    run.add_argument("--lr", dest="learning_rate", type=float, default=0.01)
    run.add_argument("--epochs", type=int, default=1)
    run.add_argument("--batch-size", type=int, default=32)
    run.add_argument("--launcher", default="threads", choices=["threads", "processes"])
    run.add_argument("--slots", type=int, default=4)
    run.add_argument("--out", default="hflight-out")
    run.add_argument("--straggler-base", type=float, default=0.0, help="synthetic seconds per training job")
    run.add_argument("--straggler-factor", type=float, default=5.0)
    run.add_argument("--eval-stride", type=int, default=1)

    cost = sub.add_parser("cost", help="closed-form communication cost of a balanced tree")
    cost.add_argument("--tree", type=_pair)
    what = cost.add_mutually_exclusive_group()
    what.add_argument("--model", help=f"one of {sorted(analytics.MODEL_BYTES)}")
    what.add_argument("--bytes", type=int)
    cost.add_argument("--table", action="store_true", help="CSV of savings for every model and height")
    cost.add_argument("--leaves", type=int, default=256, help="leaf count for --table")

    val = sub.add_parser("validate", help="check a topology YAML file")
    val.add_argument("path")
    return parser


def _config_from_args(args) -> ExperimentConfig:
    if args.config:
        return ExperimentConfig.from_json(Path(args.config).read_text())
    if args.seed is None:
        raise ConfigError("--seed is required")
    names = {f for f in ExperimentConfig.__dataclass_fields__}
    return ExperimentConfig(**{k: v for k, v in vars(args).items() if k in names})


def cmd_run(args) -> int:
    try:
        cfg = _config_from_args(args)
        cfg.check()
    except (ConfigError, TopologyError, OSError, ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        metrics = run_experiment(cfg)
    except (ConfigError, TopologyError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RoundError as exc:
        print(f"runtime error: node {exc.node_id}: {exc.cause}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(metrics["final"], sort_keys=True))
    return EXIT_OK


def cmd_cost(args) -> int:
    if args.table:
        try:
            print(analytics.rows_to_csv(analytics.cost_table(args.leaves)), end="")
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        return EXIT_OK
    if args.tree is None or (args.model is None and args.bytes is None):
        print("error: cost needs --tree and one of --model/--bytes, or --table", file=sys.stderr)
        return EXIT_CONFIG
    b, h = args.tree
    try:
        m = args.bytes if args.bytes is not None else analytics.model_bytes(args.model)
        _, params = balanced_tree(b, h, m)
    except (KeyError, ValueError, OverflowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(analytics.comm_cost(params).to_json())
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        text = Path(args.path).read_text()
        topo = parse_yaml(text)
    except (OSError, TopologyError) as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    violations = validate(topo)
    for v in violations:
        print(v)
    if violations:
        return EXIT_ILLEGAL
    print(f"ok: {len(topo)} nodes, {len(topo.workers)} workers, height {topo.height}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": cmd_run, "cost": cmd_cost, "validate": cmd_validate}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
