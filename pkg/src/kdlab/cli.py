"""Command-line entry point.

Exit codes: 0 success, 1 configuration or usage error, 2 data error
(missing or corrupt files), 3 any other failure, including divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, DataError, KDLabError

EXPERIMENT_COMMANDS = ("train-teacher", "distill", "entropy-scan", "missing-class", "transfer-sweep", "project",
                       "sweet-spot")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError("arguments", message)


def build_parser():
    p = _Parser(prog="kdlab", description="Knowledge-distillation experiments on numpy.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment config (JSON)")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--seed", type=int, help="base seed (overrides the config)")
        sp.add_argument("--dry-run", action="store_true", help="validate and print the plan only")

    for name in EXPERIMENT_COMMANDS:
        common(sub.add_parser(name, help=f"run a {name} experiment"))

    f = sub.add_parser("fetch", help="download and verify a dataset")
    f.add_argument("dataset")
    f.add_argument("--dir", help="target directory (default: $KDLAB_DATA_DIR/<dataset>)")
    f.add_argument("--mirror", action="append", help="mirror base URL (repeatable)")
    f.add_argument("--retries", type=int, default=2)
    f.add_argument("--dry-run", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--dataset", default="mnist")
    e.add_argument("--root", help="dataset directory (default: $KDLAB_DATA_DIR/<dataset>)")
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--out", help="write the result as JSON here")

    x = sub.add_parser("export", help="export plot data from metrics records")
    x.add_argument("target")
    x.add_argument("records", nargs="+", help="record.json files or run directories")
    x.add_argument("--out", required=True)
    return p


def _load_config(args):
    path = Path(args.config)
    if not path.exists():
        raise ConfigError("--config", f"{path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    raw.setdefault("experiment", args.command)
    if raw["experiment"] != args.command:
        raise ConfigError("experiment", f"config is for {raw['experiment']!r}, command is {args.command!r}")
    if args.seed is not None:
        raw["seed"] = args.seed
    return raw


def _run(args):
    if args.command in EXPERIMENT_COMMANDS:
        from .experiments import run_experiment

        raw = _load_config(args)
        result = run_experiment(raw, out=args.out, dry_run=args.dry_run)
        if args.dry_run:
            print("\n".join(result))
        else:
            print(json.dumps({"experiment": result.experiment, "config_hash": result.config_hash}))
        return
    if args.command == "fetch":
        from .data import data_root
        from .fetch import DATASET_IDS, FILES, fetch_dataset

        if args.dataset not in DATASET_IDS:
            raise ConfigError("dataset", f"unknown id {args.dataset!r}; valid ids: {', '.join(DATASET_IDS)}")
        target = Path(args.dir) if args.dir else data_root() / args.dataset
        if args.dry_run:
            for rf in FILES[args.dataset]:
                print(f"{target / rf.name}  {rf.algo}:{rf.digest}")
            return
        print(json.dumps(fetch_dataset(args.dataset, target, args.mirror, args.retries)))
        return
    if args.command == "eval":
        from .experiments import load_split
        from .train import evaluate, load_checkpoint

        ckpt = load_checkpoint(args.checkpoint)
        cfg = {"dataset": {"id": args.dataset, "root": args.root, "train_limit": None, "test_limit": None}}
        acc, per_class = evaluate(ckpt, load_split(cfg, args.split))
        doc = {"checkpoint": ckpt.id, "split": args.split, "accuracy": acc,
               "per_class": [None if v != v else float(v) for v in per_class]}
        text = json.dumps(doc, indent=2)
        if args.out:
            Path(args.out).write_text(text)
        print(text)
        return
    if args.command == "export":
        from .experiments import MetricsRecord
        from .export import export_plot_data

        records = []
        for r in args.records:
            path = Path(r)
            if path.is_dir():
                path = path / "record.json"
            if not path.exists():
                raise DataError(f"no record at {path}")
            records.append(MetricsRecord.load(path))
        print(export_plot_data(records, args.target, args.out))


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"usage error: {exc.reason}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except KDLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - anything unexpected is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
