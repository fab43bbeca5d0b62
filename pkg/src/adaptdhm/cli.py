"""Command-line entry point: ``adaptdhm {generate,train,eval,inspect-centers,sweep-k}``.

Settings come from an optional ``--config`` file of ``key = value`` lines
(keys are the ``ExperimentConfig`` field names, ``synth.<name>`` for the
generator); ``--set key=value`` and the dedicated flags override the file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetSchema, parse_dataset
from .errors import AdaptDHMError, NonFiniteLossError
from .experiment import (
    ExperimentConfig,
    apply_overrides,
    check_schema,
    evaluate_model,
    generate_files,
    inspect_centers,
    load_data,
    read_config_file,
    sweep_k,
    train_model,
    write_json,
)

log = logging.getLogger("adaptdhm")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="threads for read-only evaluation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptdhm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic planted-cluster dataset")
    _add_common(p)

    p = sub.add_parser("train", help="train a model, write checkpoint and report")
    _add_common(p)
    p.add_argument("--model", choices=["adaptdhm", "dnn", "shared_bottom", "star_by_domain"])
    p.add_argument("--train", dest="train_path")
    p.add_argument("--test", dest="test_path")
    p.add_argument("--schema", dest="schema_path")
    p.add_argument("--epochs", type=int)
    p.add_argument("-K", type=int, dest="K")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_common(p)
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--schema", dest="schema_path")

    p = sub.add_parser("inspect-centers", help="dump cluster centers and their cosine matrix")
    p.add_argument("checkpoint")
    p.add_argument("--out", help="write JSON here instead of stdout")

    p = sub.add_parser("sweep-k", help="train one adaptdhm per K and tabulate AUC")
    _add_common(p)
    p.add_argument("--k-list", required=True, help="comma-separated K values, e.g. 1,3,9")
    p.add_argument("--train", dest="train_path")
    p.add_argument("--test", dest="test_path")
    p.add_argument("--schema", dest="schema_path")
    p.add_argument("--epochs", type=int)
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    pairs = read_config_file(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", []):
        key, sep, value = item.partition("=")
        if not sep:
            raise AdaptDHMError(f"--set expects KEY=VALUE, got {item!r}")
        pairs[key.strip()] = value
    flag_keys = {"seed": "seed", "out": "out_dir", "threads": "threads", "model": "kind",
                 "train_path": "train_path", "test_path": "test_path", "schema_path": "schema_path",
                 "epochs": "epochs", "K": "K"}
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            pairs[key] = str(value)
    if "seed" in pairs and "synth.seed" not in pairs:
        pairs["synth.seed"] = pairs["seed"]
    return apply_overrides(ExperimentConfig(), pairs)


def _out_dir(cfg: ExperimentConfig, default: str) -> Path:
    out = Path(cfg.out_dir or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    paths = generate_files(cfg.synth, _out_dir(cfg, "data"))
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(cfg, "run")
    train, test = load_data(cfg)
    try:
        model, report = train_model(cfg, train, test)
    except NonFiniteLossError as exc:
        log.error("training diverged: %s %s", exc, json.dumps(exc.diagnostics))
        return 3
    save_checkpoint(model, out / "model.npz")
    write_json(report.to_json(), out / "report.json")
    print(json.dumps(report.epochs[-1]["metrics"], sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    model = load_checkpoint(args.checkpoint)
    schema_path = Path(args.schema_path) if args.schema_path else Path(args.dataset).parent / "schema.json"
    schema = DatasetSchema.load(schema_path)
    data = parse_dataset(args.dataset, schema)
    check_schema(model, data)
    report = evaluate_model(model, data, cfg.threads).to_json()
    if cfg.out_dir:
        write_json(report, _out_dir(cfg, "eval") / "metrics.json")
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_inspect_centers(args) -> int:
    info = inspect_centers(load_checkpoint(args.checkpoint))
    text = json.dumps(info, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_sweep_k(args) -> int:
    cfg = resolve_config(args)
    k_list = [int(k) for k in args.k_list.split(",") if k.strip()]
    train, test = load_data(cfg)
    rows = sweep_k(cfg, k_list, train, test)
    out = _out_dir(cfg, "sweep") / "sweep_k.csv"
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["K", "auc", "gauc", "seconds"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(out)
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "inspect-centers": cmd_inspect_centers,
    "sweep-k": cmd_sweep_k,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (AdaptDHMError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
