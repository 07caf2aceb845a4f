"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from typing import Sequence

from . import seeding
from .bounds import bound_report, format_bound_report, write_bound_report
from .client import evaluate
from .datasets import PartitionSpec, dirichlet_partition, load_csv, save_csv
from .errors import FedETError
from .orchestrator import (
    RunConfig,
    init_registry,
    load_config,
    prepare_data,
    run_training,
    synthetic_splits,
)
from .zoo import load_checkpoint

log = logging.getLogger("fedet")

DEFAULT_LAMBDAS = "0,0.05,0.5"
SWEEP_HEADER = ["lambda", "final_server_test_acc", "best_server_test_acc", "final_server_test_loss",
                "comm_params_cumulative", "metrics_path"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit(2); usage errors are 1 here
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedet", description="Federated ensemble transfer simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def with_config(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="flat key = value run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("gen-data", help="write train/public/test CSVs (7:1:2 by default)")
    with_config(p)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("partition", help="split a labeled CSV into Dirichlet client shards")
    with_config(p)
    p.add_argument("--data", required=True, help="labeled training CSV")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="run federated training")
    with_config(p)
    p.add_argument("--algorithm", choices=["fed-et", "fedavg"])
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--workers", type=int, help="client-training threads; results do not depend on it")

    p = sub.add_parser("eval", help="evaluate every model in a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="labeled CSV")

    p = sub.add_parser("bound-report", help="generalization-bound diagnostics for a checkpoint")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--nu", type=float, default=0.0, help="constant used for every nu_i")

    p = sub.add_parser("sweep-lambda", help="train once per diversity weight and compare")
    with_config(p)
    p.add_argument("--values", default=DEFAULT_LAMBDAS, help="comma-separated lambda values")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int)
    return parser


def _config(args: argparse.Namespace, **overrides) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        overrides["workers"] = args.workers
    return cfg.replace(**{k: v for k, v in overrides.items() if v is not None})


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    os.makedirs(args.out, exist_ok=True)
    train, public, test = synthetic_splits(cfg)
    for name, part in (("train", train), ("public", public), ("test", test)):
        save_csv(part, os.path.join(args.out, f"{name}.csv"))
    print(f"wrote {len(train)} train, {len(public)} public, {len(test)} test rows to {args.out}")
    return 0


def cmd_partition(args) -> int:
    cfg = _config(args)
    train = load_csv(args.data)
    spec = PartitionSpec(cfg.K, cfg.alpha, seeding.derive_seed(cfg.seed, seeding.PARTITION), min_size=cfg.b)
    shards = dirichlet_partition(train, spec)
    os.makedirs(args.out, exist_ok=True)
    width = len(str(len(shards) - 1))
    for shard in shards:
        save_csv(shard, os.path.join(args.out, f"client_{shard.client_id:0{width}d}.csv"))
    print(f"wrote {len(shards)} shards to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args, algorithm=args.algorithm, out_dir=args.out)
    result = run_training(cfg)
    last = result.reports[-1] if result.reports else None
    if last is not None:
        print(f"{cfg.algorithm}: {len(result.reports)} rounds, server test acc {last.server_test_acc:.4f}, "
              f"communicated {last.comm_params_cumulative} parameters")
    print(f"metrics: {result.metrics_path}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    registry = load_checkpoint(args.checkpoint)
    data = load_csv(args.data)
    rows = [("server", registry.server_model)]
    rows += [(f"small/{i}", m) for i, m in sorted(registry.small_models.items())]
    for name, model in rows:
        res = evaluate(model, data)
        print(f"{name}\taccuracy={res.accuracy:.6f}\tloss={res.mean_loss:.6f}\tparams={model.param_count}")
    return 0


def cmd_bound_report(args) -> int:
    cfg = _config(args)
    data = prepare_data(cfg)
    registry = load_checkpoint(args.checkpoint, like=init_registry(cfg))
    report = bound_report(registry, data.shards, data.test, delta=args.delta, nu=args.nu)
    write_bound_report(report, args.out)
    sys.stdout.write(format_bound_report(report))
    return 0


def _parse_values(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values must be comma-separated numbers, got {text!r}") from None
    if not values:
        raise UsageError("--values is empty")
    return values


def cmd_sweep_lambda(args) -> int:
    values = _parse_values(args.values)
    base = _config(args)
    data = prepare_data(base)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for lam in values:
        cfg = base.replace(lam=lam, algorithm="fed-et", out_dir=os.path.join(args.out, f"lambda_{lam:g}"))
        result = run_training(cfg, data)
        accs = [r.server_test_acc for r in result.reports]
        last = result.reports[-1] if result.reports else None
        rows.append([
            repr(lam),
            repr(last.server_test_acc) if last else "",
            repr(max(accs)) if accs else "",
            repr(last.server_test_loss) if last else "",
            last.comm_params_cumulative if last else 0,
            result.metrics_path,
        ])
        print(f"lambda={lam:g}: final acc {rows[-1][1] or 'n/a'}")
    path = os.path.join(args.out, "lambda_sweep.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        writer.writerows(rows)
    print(f"comparison: {path}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "partition": cmd_partition,
    "train": cmd_train,
    "eval": cmd_eval,
    "bound-report": cmd_bound_report,
    "sweep-lambda": cmd_sweep_lambda,
}


def run_cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(exc, file=sys.stderr)
        return 1
    except (FedETError, OSError) as exc:
        print(f"fedet: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
