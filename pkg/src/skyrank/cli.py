"""``skyrank`` command line: one pipeline stage per invocation.

Exit status is 0 on success, 2 for config or validation errors, 3 for data
errors and 4 for numeric failures. Errors are also printed to stderr as a
single JSON object.
"""
from __future__ import annotations

import argparse
import json
import sys

from . import pipeline
from .errors import NumericError, SkyrankError, ValidationError

# named flags: (flag, dotted config key, type)
_FLAGS = [
    ("--seed", "seed", int),
    ("--world-dir", "paths.world_dir", str),
    ("--manifest", "paths.manifest", str),
    ("--checkpoint", "paths.checkpoint", str),
    ("--results", "paths.rerank_results", str),
    ("--out-dir", "paths.out_dir", str),
    ("--m", "curate.m", int),
    ("--T", "train.T", float),
    ("--k-train", "train.k", int),
    ("--lr", "train.learning_rate", float),
    ("--epochs", "train.epochs", int),
    ("--label-mode", "train.label_mode", str),
    ("--m-retrieve", "rerank.m_retrieve", int),
    ("--k-rerank", "rerank.k_rerank", int),
]


def _parse_set(item: str):
    key, sep, text = item.partition("=")
    if not sep or not key:
        raise ValidationError(f"--set expects key=value, got {item!r}")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    return key, value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (flags override it)")
    common.add_argument("--serial-deterministic", action="store_true", help="single thread, deterministic kernels")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any dotted config key")
    for flag, key, typ in _FLAGS:
        common.add_argument(flag, dest=key.replace(".", "__"), type=typ, default=None, help=f"sets {key}")

    parser = argparse.ArgumentParser(prog="skyrank", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate a synthetic world")
    sub.add_parser("curate", parents=[common], help="build the training manifest")
    sub.add_parser("train", parents=[common], help="train the scorer")
    sub.add_parser("rerank", parents=[common], help="retrieve and re-rank queries")
    sub.add_parser("eval", parents=[common], help="compare retrieval and re-ranked runs")
    sw = sub.add_parser("sweep", parents=[common], help="train/rerank/eval across one axis")
    sw.add_argument("--axis", choices=pipeline.SWEEP_AXES)
    sw.add_argument("--values", type=float, nargs="+")
    return parser


def resolve_config(args: argparse.Namespace) -> pipeline.RunConfig:
    overrides = {}
    for _, key, _ in _FLAGS:
        val = getattr(args, key.replace(".", "__"))
        if val is not None:
            overrides[key] = val
    for item in args.set:
        k, v = _parse_set(item)
        overrides[k] = v
    return pipeline.RunConfig.load(args.config, overrides)


def run(args: argparse.Namespace) -> object:
    if args.serial_deterministic:
        pipeline.set_serial_deterministic()
    cfg = resolve_config(args)
    cmd = args.command
    if cmd == "gen":
        return {k: str(v) for k, v in pipeline.cmd_gen(cfg).items()}
    if cmd == "curate":
        return {"manifest": str(pipeline.cmd_curate(cfg))}
    if cmd == "train":
        ckpt, report = pipeline.cmd_train(cfg)
        return {"checkpoint": str(ckpt), "steps": len(report["step_losses"])}
    if cmd == "rerank":
        return {"results": str(pipeline.cmd_rerank(cfg))}
    if cmd == "eval":
        summary = pipeline.cmd_eval(cfg)
        return {name: {"recall_at": s["recall_at"], "ap": s["ap"]} for name, s in summary.items()}
    values = args.values
    if values is not None and args.axis in ("k_rerank", "k_train"):
        values = [int(v) for v in values]
    return {"sweep_csv": str(pipeline.cmd_sweep(cfg, args.axis, values))}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        out = run(args)
    except SkyrankError as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
        print(json.dumps(err), file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(json.dumps({"error": "NumericError", "message": str(exc), "exit_code": NumericError.exit_code}), file=sys.stderr)
        return NumericError.exit_code
    print(json.dumps(out))
    return 0


if __name__ == "__main__":
    sys.exit(main())
