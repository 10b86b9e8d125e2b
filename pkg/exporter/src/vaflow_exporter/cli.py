"""Command line for the feature exporter."""

from __future__ import annotations

import argparse
import sys

from .backbones import REGISTRY
from .export import ExportJob, export


def build_parser():
    parser = argparse.ArgumentParser(prog="vaflow-export",
                                     description="export frozen backbone patch features as VFFT")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="run a backbone over images and write a feature file")
    p.add_argument("--backbone", required=True, choices=sorted(REGISTRY))
    p.add_argument("--images", required=True, help="image folder or .vimg dataset file")
    p.add_argument("--grid", required=True, metavar="HxW", help="target feature grid, e.g. 16x16")
    p.add_argument("--out", required=True, help="output .vfft path")
    p.add_argument("--no-pretrained", dest="pretrained", action="store_false",
                   help="seeded random weights (offline/deterministic mode)")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--device", default="cpu")
    p.set_defaults(fn=cmd_export)
    return parser


def cmd_export(args):
    try:
        h, w = (int(v) for v in args.grid.lower().split("x"))
    except ValueError:
        raise ValueError(f"--grid expects HxW, got {args.grid!r}")
    job = ExportJob(backbone=args.backbone, images=args.images, grid_h=h, grid_w=w,
                    out=args.out, pretrained=args.pretrained,
                    batch_size=args.batch_size, device=args.device)
    out, sidecar = export(job)
    print(f"wrote {out} (+ {sidecar})")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"vaflow-export-error type={type(exc).__name__} msg={exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
