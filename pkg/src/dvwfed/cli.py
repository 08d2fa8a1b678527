"""Command-line entry point.

Subcommands::

    dvwfed run <config.toml> [--output DIR] [--seed N]
    dvwfed sweep <config.toml> --corrupted 1,3,5 [--output DIR] [--seed N]
    dvwfed serve-learner --listen HOST:PORT --config <config.toml> --learner K [--scheme S]
    dvwfed run-distributed <config.toml> --learners HOST:PORT,... [--scheme S] [--timeout SEC]

Exit status is 0 on success and the ``exit_code`` of the error class otherwise.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from dvwfed.errors import ConfigError, FedError
from dvwfed.experiment import (
    ExperimentSpec,
    learner_shard_for,
    load_spec,
    prepare_data,
    run_experiment,
    sweep,
    write_results,
)
from dvwfed.federation import SCHEMES
from dvwfed.transport import DEFAULT_TIMEOUT, LearnerNode, run_distributed, serve_learner

log = logging.getLogger("dvwfed")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _spec(args: argparse.Namespace) -> ExperimentSpec:
    spec = load_spec(args.config)
    if getattr(args, "output", None):
        spec = replace(spec, output=args.output)
    if getattr(args, "seed", None) is not None:
        spec = replace(spec, seed=args.seed)
    return spec


def _cmd_run(args: argparse.Namespace) -> None:
    bundle = run_experiment(_spec(args))
    for name, info in bundle.manifest["runs"].items():
        print(f"{name}\tfinal_test_accuracy={info['final_test_accuracy']:.4f}")
    print(f"results written to {bundle.output_dir}")


def _cmd_sweep(args: argparse.Namespace) -> None:
    bundles = sweep(_spec(args), args.corrupted)
    for count, b in zip(args.corrupted, bundles):
        print(f"corrupted={count}\ttotal_corruption={b.corruption.total_ratio:.4f}\t{b.output_dir}")


def _cmd_serve(args: argparse.Namespace) -> None:
    spec = _spec(args)
    data = prepare_data(spec)
    if not 0 <= args.learner < len(data.attacked_shards):
        raise ConfigError(f"learner id {args.learner} outside [0, {len(data.attacked_shards)})")
    fed = replace(spec.federation, scheme=args.scheme, master_seed=data.seeds["federation"])
    node = LearnerNode(learner_shard_for(data, args.learner, args.scheme), fed)

    def ready(addr: tuple[str, int]) -> None:
        print(f"listening on {addr[0]}:{addr[1]}", flush=True)

    serve_learner(args.listen, node, ready)


def _cmd_distributed(args: argparse.Namespace) -> None:
    spec = _spec(args)
    data = prepare_data(spec)
    fed = replace(spec.federation, scheme=args.scheme, master_seed=data.seeds["federation"])
    endpoints = [e.strip() for e in args.learners.split(",") if e.strip()]
    records = run_distributed(fed, endpoints, data.test_set, args.timeout)
    out = Path(spec.output)
    write_results(out, {args.scheme: records}, data.test_set.num_classes)
    print(f"{args.scheme}\tfinal_test_accuracy={records[-1].community_test_accuracy:.4f}")
    print(f"results written to {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dvwfed", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--output", help="override the output directory")
        p.add_argument("--seed", type=int, help="override the master seed")

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("config")
    common(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="repeat an experiment over corruption levels")
    p.add_argument("config")
    p.add_argument("--corrupted", type=_int_list, required=True, help="e.g. 1,3,5,6,8")
    common(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("serve-learner", help="serve one learner over TCP")
    p.add_argument("--listen", required=True, help="HOST:PORT (port 0 picks a free port)")
    p.add_argument("--config", required=True)
    p.add_argument("--learner", type=int, required=True)
    p.add_argument("--scheme", choices=SCHEMES, default="dvw_gmean")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("run-distributed", help="act as controller for running learner nodes")
    p.add_argument("config")
    p.add_argument("--learners", required=True, help="HOST:PORT list ordered by learner id")
    p.add_argument("--scheme", choices=SCHEMES, default="dvw_gmean")
    p.add_argument("--timeout", type=float, default=DEFAULT_TIMEOUT)
    common(p)
    p.set_defaults(func=_cmd_distributed)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except FedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
