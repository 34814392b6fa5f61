"""Standalone plotting entry point:

    plot error_curve --in tableA.csv tableB.csv --out figure.png
    plot heatmap --in grid1.csv grid2.csv grid3.csv --out figure.png

Inputs are the densprop CLI's documented text formats and are never
modified. Any malformed input aborts with a nonzero exit before the output
file is created."""

from __future__ import annotations

import argparse
import sys

from .io import InputFormatError, read_error_table, read_grid
from .render import render_error_curves, render_heatmaps


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plot", description="Render densprop output tables into figures.")
    parser.add_argument("kind", choices=["error_curve", "heatmap"])
    parser.add_argument("--in", dest="inputs", nargs="+", required=True,
                        metavar="FILE", help="input tables or grid files")
    parser.add_argument("--out", required=True, help="output image path")
    parser.add_argument("--labels", default=None,
                        help="comma-separated curve labels (error_curve only)")
    args = parser.parse_args(argv)

    labels = None
    if args.labels:
        labels = [s.strip() for s in args.labels.split(",")]
        if len(labels) != len(args.inputs):
            print(f"plot: got {len(labels)} labels for {len(args.inputs)} inputs",
                  file=sys.stderr)
            return 2

    try:
        # parse everything first so a bad input never leaves a partial image
        if args.kind == "error_curve":
            curves = [read_error_table(path,
                                       labels[i] if labels else None)
                      for i, path in enumerate(args.inputs)]
            render_error_curves(curves, args.out)
        else:
            panels = [read_grid(path) for path in args.inputs]
            render_heatmaps(panels, args.out)
    except (InputFormatError, FileNotFoundError) as exc:
        print(f"plot: {exc}", file=sys.stderr)
        return 1
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
