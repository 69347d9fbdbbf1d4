"""``vimsvp`` command line.

Verbs: pretrain, adapt, ablate-positions, inspect-gates, count-params, eval.
Exit codes: 0 success, 2 usage or configuration error, 3 runtime error.

CSV schemas (fixed header names):
  metrics.csv    epoch, split, loss, accuracy, lr
  summary.csv    mode, position, trainable_params, train_acc, val_acc, epochs, base_lr, batch_size, config_hash
  ablation.csv   same columns as summary.csv, one row per mode
  gates.csv      layer, token, grid_row, grid_col, is_cls, update_gate
  retention.csv  layer, direction, progress, token, retention
  params.csv     scope, name, count
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from vimsvp.cli import run
from vimsvp.cli.config import ConfigError, load_run_config
from vimsvp.errors import CheckpointError, ContractError, FormatError, VimSvpError
from vimsvp.svp import POSITIONS
from vimsvp.training import MODES

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("vimsvp")


def _parse_set(items) -> dict:
    """``section.key=value`` overrides; values are parsed as JSON when possible."""
    out: dict = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        if len(parts) == 1:
            out[parts[0]] = value
        elif len(parts) == 2:
            out.setdefault(parts[0], {})[parts[1]] = value
        else:
            raise ConfigError(f"--set key {key!r} must be 'key' or 'section.key'")
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--deterministic", action="store_true", help="single-worker, bitwise reproducible run")
    common.add_argument("--out-dir", default="runs/latest", help="directory for every artifact")
    common.add_argument("--precision", choices=("f32", "f64"))
    common.add_argument("--cls-position", choices=("middle", "pre"))
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vimsvp", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("pretrain", parents=[common], help="train the backbone on the pretraining task")

    p = sub.add_parser("adapt", parents=[common], help="adapt a pretrained backbone to the downstream task")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=[m for m in MODES if m != "pretrain-backbone"], default="svp-adapt")
    p.add_argument("--position", choices=POSITIONS, help="prompt position for baseline-append")

    p = sub.add_parser("ablate-positions", parents=[common], help="appended-prompt positions vs SVP")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("inspect-gates", parents=[common], help="export update-gate maps and retention snapshots")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", help=".npy image or CIFAR-format .bin file; default: a downstream val image")
    p.add_argument("--index", type=int, default=0, help="record or sample index")
    p.add_argument("--layers", help="layer j or half-open range a:b")
    p.add_argument("--normalize", choices=("layer", "global"), default="layer")

    sub.add_parser("count-params", parents=[common], help="per-tag and per-mode parameter counts")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stage", choices=("pretrain", "adapt"), default="adapt")
    return parser


def _resolve(args):
    overrides = _parse_set(args.set)
    for key in ("seed", "precision"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    if args.deterministic:
        overrides["deterministic"] = True
    if args.cls_position:
        overrides.setdefault("model", {})["cls_position"] = args.cls_position
    return load_run_config(args.config, overrides)


def _dispatch(args) -> None:
    cfg = _resolve(args)
    if args.command == "pretrain":
        _, result, _ = run.run_pretrain(cfg, args.out_dir)
        print(f"pretrain: steps={result.step} val_acc={result.val.get('accuracy', float('nan')):.4f}")
    elif args.command == "adapt":
        row = run.run_adapt(cfg, args.checkpoint, args.out_dir, args.mode, args.position)
        print(",".join(str(row[k]) for k in ("mode", "position", "trainable_params", "val_acc")))
    elif args.command == "ablate-positions":
        rows = run.run_ablation(cfg, args.checkpoint, args.out_dir)
        for row in rows:
            print(f"{row['mode']},{row['val_acc']:.4f}")
    elif args.command == "inspect-gates":
        res = run.run_inspect_gates(cfg, args.checkpoint, args.out_dir, args.image, args.index, args.layers,
                                    args.normalize)
        print(f"inspect-gates: layers={res['layers'][0]}..{res['layers'][-1]} written to {args.out_dir}")
    elif args.command == "count-params":
        for row in run.run_count_params(cfg, args.out_dir):
            print(f"{row['scope']},{row['name']},{row['count']}")
    elif args.command == "eval":
        row = run.run_eval(cfg, args.checkpoint, args.out_dir, args.stage)
        print(",".join(f"{k}={v:.4f}" for k, v in row.items()))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, FormatError, ContractError, VimSvpError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
