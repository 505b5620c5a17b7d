"""``sgacnet`` command line.

Exit codes: 0 success, 1 acceptance threshold missed, 2 usage or config
error, 3 I/O or data error.
"""
from __future__ import annotations

import argparse
import sys

from . import harness
from .config import FULL_RUN, TOY_RUN, TOY_TRAIN_RUN, parse_config
from .errors import ConfigError, DataError, ImageFormatError
from .scenes import generate_scenes

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

# Commands that default to a toy-width model; the rest default to full size.
_TOY_COMMANDS = {"gradcheck", "eval", "infer", "scenes"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file")
    common.add_argument("--seed", type=int, help="seed for init, data and sampling")
    common.add_argument("--out", metavar="DIR", help="report and artifact directory")
    for flag in ("backbone", "decoder", "context", "afm", "upsample"):
        common.add_argument(f"--{flag}", help=f"override model {flag}")

    p = _Parser(prog="sgacnet", description="RGB-D segmentation construction kit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gradcheck", parents=[common], help="full-model gradient check")
    sub.add_parser("params", parents=[common], help="parameter counts")
    sub.add_parser("flops", parents=[common], help="multiply-accumulate counts")
    sub.add_parser("bench", parents=[common], help="forward-pass timing")
    sub.add_parser("train-toy", parents=[common], help="overfit synthetic scenes")
    for name in ("eval", "infer"):
        s = sub.add_parser(name, parents=[common], help=f"{name} a checkpoint")
        s.add_argument("--checkpoint", required=True, metavar="PATH")
        s.add_argument("--data", metavar="DIR", help="triplet dataset; synthetic scenes when omitted")
    sub.choices["infer"].add_argument("--export-gates", action="store_true",
                                      help="also write attention gate maps")
    s = sub.add_parser("scenes", parents=[common], help="write a synthetic dataset")
    s.add_argument("--count", type=int, default=16)
    return p


def resolve_config(args):
    if args.command == "train-toy":
        base = TOY_TRAIN_RUN
    else:
        base = TOY_RUN if args.command in _TOY_COMMANDS else FULL_RUN
    cfg = parse_config(args.config, base) if args.config else base
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    if args.out is not None:
        cfg = cfg.with_(out_dir=args.out)
    overrides = {k: getattr(args, k) for k in ("backbone", "decoder", "context", "afm", "upsample")
                 if getattr(args, k) is not None}
    if "afm" in overrides and "," in overrides["afm"]:
        overrides["afm"] = tuple(p.strip() for p in overrides["afm"].split(","))
    return cfg.with_model(**overrides) if overrides else cfg


def run(args) -> int:
    cfg = resolve_config(args)
    cmd = args.command
    if cmd == "scenes":
        root = generate_scenes(cfg.scene_spec(), args.count, cfg.seed, cfg.out_dir)
        print(f"wrote {args.count} scenes to {root}")
        return EXIT_OK
    if cmd == "eval":
        report = harness.eval_(cfg, args.checkpoint, args.data)
    elif cmd == "infer":
        report = harness.infer(cfg, args.checkpoint, args.data, args.export_gates)
    else:
        report = {"gradcheck": harness.gradcheck, "params": harness.params, "flops": harness.flops,
                  "bench": harness.bench, "train-toy": harness.train_toy}[cmd](cfg)
    path = harness.emit(cfg, cmd.replace("-", "_"), report)
    for k, v in report.items():
        if not isinstance(v, (dict, list)):
            print(f"{k}: {v}")
    print(f"report: {path}")
    return EXIT_OK if report.get("passed", True) else EXIT_FAIL


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DataError, ImageFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
