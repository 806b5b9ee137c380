"""Command-line entry point: ``cgm train|generate|evaluate|benchmark``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, schema_diff
from .codecs import NUMERICAL, SchemaError
from .data import DataError, fit_schemas, load_csv, write_csv
from .model import TrainConfig, generate, log_likelihood_codes, random_orders, train
from .tensor import ContractError, NumericalError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("cgm")


class UsageError(Exception):
    pass


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("CGM_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"CGM_SEED must be an integer, got {env!r}") from None


def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- subcommands

def cmd_train(args):
    defaults = TrainConfig()
    overrides = {
        "hidden": args.hidden, "n_blocks": args.blocks, "n_heads": args.heads,
        "epochs": args.epochs, "batch_size": args.batch, "lr": args.lr, "beta1": args.beta1,
        "beta2": args.beta2, "bins": args.bins, "seed": _seed(args),
    }
    cfg = {k: (getattr(defaults, k) if v is None else v) for k, v in overrides.items()}
    if args.no_prefix_subsampling:
        cfg["prefix_subsampling"] = False
    try:
        config = TrainConfig(**cfg)
    except ContractError as exc:
        raise UsageError(str(exc)) from None
    table = fit_schemas(load_csv(args.data, args.schema), config.bins)

    def report(epoch, loss):
        print(f"epoch {epoch + 1}/{config.epochs} loss {loss:.6f}", flush=True)

    result = train(table, config, callback=report)
    save_checkpoint(result.params, args.out)
    history = args.history or f"{args.out}.history.json"
    _dump({"config": config.to_json(), "loss": result.history}, history)
    print(f"wrote {args.out} and {history}")
    return EXIT_OK


def _parse_fixed(params, items):
    fixed = {}
    schemas = {s.name: s for s in params.schemas}
    for item in items or []:
        name, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--fixed expects col=value, got {item!r}")
        if name not in schemas:
            raise UsageError(f"--fixed names unknown column {name!r}")
        s = schemas[name]
        if s.kind == NUMERICAL:
            try:
                fixed[name] = float(value)
            except ValueError:
                raise UsageError(f"--fixed {name}: {value!r} is not a number") from None
        else:
            if value not in s.categories:
                raise UsageError(f"--fixed {name}: unknown category {value!r}")
            fixed[name] = value
    return fixed


def cmd_generate(args):
    params = load_checkpoint(args.ckpt)
    fixed = _parse_fixed(params, args.fixed)
    if args.rows < 0:
        raise UsageError("--rows must be non-negative")
    table = generate(params, args.rows, _seed(args), temperature=args.temperature, fixed=fixed,
                     midpoint=args.midpoint, workers=args.workers)
    write_csv(table, args.out)
    print(f"wrote {args.rows} rows to {args.out}")
    return EXIT_OK


def cmd_evaluate(args):
    params = load_checkpoint(args.ckpt)
    hints = {s.name: {"kind": s.kind} for s in params.schemas}
    with open(args.data, newline="") as fh:
        header = next(csv.reader(fh), [])
    diff = schema_diff(params.names, header)
    if diff:
        raise DataError(f"data columns do not match the checkpoint: {diff}")
    table = load_csv(args.data, hints).with_schemas(params.schemas)
    codes = table.codes()
    present = codes >= 0
    skipped = int((~present).sum())
    seed = _seed(args)
    repeats = 1 if args.order == "fixed" else args.repeats
    per_order, lls = [], []
    for r in range(repeats):
        if args.order == "fixed":
            keys = np.where(present, np.arange(codes.shape[1]), np.inf)
            order = np.argsort(keys, axis=1, kind="stable")
            order = np.where(np.take_along_axis(present, order, axis=1), order, -1)
        else:
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(r,)))
            order = random_orders(present, rng)
        ll = log_likelihood_codes(params, codes, order)
        lls.append(ll)
        per_order.append({"repeat": r, "mean": float(ll.mean()) if len(ll) else None,
                          "std": float(ll.std()) if len(ll) else None})
    row_ll = np.mean(lls, axis=0) if len(codes) else np.zeros(0)
    summary = {
        "order": args.order, "repeats": repeats, "seed": seed, "n_rows": int(len(codes)),
        "skipped_missing_cells": skipped,
        "mean": float(row_ll.mean()) if len(row_ll) else None,
        "std": float(row_ll.std()) if len(row_ll) else None,
        "per_order": per_order,
    }
    if len(row_ll):
        print(f"mean log-likelihood {summary['mean']:.6f} ± {summary['std']:.6f} "
              f"over {len(row_ll)} rows ({skipped} missing cells skipped)")
    else:
        print("no rows to evaluate")
    if args.json:
        _dump(summary, args.json)
    return EXIT_OK


def cmd_benchmark(args):
    from .bench.leaderboard import (ConfigError, apply_filters, default_config, dump_report,
                                    render_table, run_leaderboard, validate_config)
    if args.config:
        try:
            with open(args.config) as fh:
                config = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON: {exc}") from None
    else:
        config = default_config()
    try:
        config = apply_filters(validate_config(config), args.filter)
        report = run_leaderboard(config, workers=args.workers)
    except ConfigError as exc:
        raise UsageError(f"invalid config at {exc}") from None
    dump_report(report, args.out)
    print(render_table(report))
    cells = report["cells"]
    if cells and all(c["status"] == "error" for c in cells):
        print("every cell failed", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="cgm", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on a CSV table")
    t.add_argument("--data", required=True)
    t.add_argument("--schema", help="JSON column hints: {col: {kind, bins}}")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--history", help="loss history JSON (default: <out>.history.json)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--beta1", type=float)
    t.add_argument("--beta2", type=float)
    t.add_argument("--hidden", type=int)
    t.add_argument("--blocks", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--bins", type=int)
    t.add_argument("--no-prefix-subsampling", action="store_true")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="sample rows from a checkpoint")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--rows", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--fixed", action="append", metavar="COL=VALUE")
    g.add_argument("--temperature", type=float, default=1.0)
    g.add_argument("--midpoint", action="store_true", help="decode numericals at bin midpoints")
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="per-row log-likelihood of a CSV table")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--order", choices=("fixed", "random"), default="fixed")
    e.add_argument("--repeats", type=int, default=1)
    e.add_argument("--json", help="write per-order results here")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("benchmark", help="run the leaderboard")
    b.add_argument("--config", help="benchmark config JSON (default: shipped config)")
    b.add_argument("--out", required=True, help="report JSON path")
    b.add_argument("--filter", action="append", metavar="KEY=VALUE")
    b.add_argument("--workers", type=int)
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"cgm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"cgm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, SchemaError, CheckpointError, ContractError, OSError) as exc:
        print(f"cgm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
