"""sheafplots render --kind <k> --in <paths...> --out <file>"""

from __future__ import annotations

import argparse
import sys

from .plots import KINDS, PlotDataError, PlotJob, render


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sheafplots")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("render", help="render one figure from artifact files")
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--in", dest="inputs", nargs="+", required=True,
                   help="input trace CSVs or summary JSON files")
    p.add_argument("--clouds", nargs="*", default=[],
                   help="cloud CSVs to overlay on trajectory2d")
    p.add_argument("--out", required=True, help="output image path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        out = render(PlotJob(kind=args.kind, inputs=args.inputs,
                             output=args.out, clouds=args.clouds))
    except (PlotDataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
