"""Command-line front end for the exporter.

Exit codes match the main tool: 0 on success, 1 for usage errors, 2
when the export itself fails. Status goes to stderr; the only stdout
output is the summary line, so scripts can capture it.
"""

from __future__ import annotations

import argparse
import sys

from .sources import SOURCE_KINDS, SourceError, SourceSpec, default_input, \
    export


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags, which we reserve for runtime
    # failures; route usage problems to 1 instead.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="gdt-bridge",
                     description="Export offline RL corpora into the gdt "
                                 "trajectory file format.")
    sub = parser.add_subparsers(dest="verb", metavar="verb")

    exp = sub.add_parser("export", help="convert one task's data")
    exp.add_argument("--source", required=True, choices=SOURCE_KINDS,
                     help="corpus layout to read")
    exp.add_argument("--task", required=True,
                     help="task name, e.g. hopper-medium or breakout-1")
    exp.add_argument("--out", required=True,
                     help="output dataset path")
    exp.add_argument("--data-dir", default="datasets",
                     help="where source files live (default: datasets)")
    exp.add_argument("--input", default=None,
                     help="explicit source file, overriding --data-dir")
    exp.add_argument("--fraction", type=float, default=1.0,
                     help="fraction of episodes to keep (default: all)")
    exp.add_argument("--seed", type=int, default=0,
                     help="seed for the episode subsample (default: 0)")
    return parser


def _cmd_export(args) -> int:
    spec = SourceSpec(kind=args.source, task=args.task,
                      fraction=args.fraction, seed=args.seed)
    input_path = args.input or default_input(spec, args.data_dir)
    summary = export(spec, input_path, args.out)
    print(f"wrote {summary['out']}: {summary['episodes_exported']} episodes, "
          f"{summary['steps_exported']} steps "
          f"({summary['episodes_in_source']} episodes in source)")
    print(f"manifest at {summary['out']}.manifest.json", file=sys.stderr)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    if not argv:
        parser.print_help(sys.stderr)
        return 1
    args = parser.parse_args(argv)
    if args.verb is None:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: a verb is required", file=sys.stderr)
        return 1
    try:
        return _cmd_export(args)
    except Exception as e:
        msg = str(e) or type(e).__name__
        print(f"gdt-bridge: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
