"""CLI for the two-pass exporter."""

from __future__ import annotations

import argparse
import sys

from .export import ExportConfig, export_predictions, export_representations


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viewsift-export")
    sub = parser.add_subparsers(dest="command", required=True)

    reps = sub.add_parser("reps", help="pass 1: dump per-layer features and Q/K")
    _common(reps)
    reps.add_argument("--layers", type=int, nargs="*", default=None)
    reps.add_argument("--layer-of-interest", type=int, default=None)
    reps.add_argument("--feature-slice-start", type=int, default=None)
    reps.add_argument("--rows", choices=["none", "anchor", "all"], default="anchor")

    preds = sub.add_parser("preds", help="pass 2: run kept views, dump poses and depths")
    _common(preds)
    preds.add_argument("--work-order", required=True)
    return parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", default="tiny")
    p.add_argument("--images", nargs="*", default=None, help=".npy files of shape (3, H, W)")
    p.add_argument("--synthetic", type=int, default=0, help="generate N random views instead")
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def _config(args: argparse.Namespace) -> ExportConfig:
    return ExportConfig(
        model_id=args.model,
        layers=getattr(args, "layers", None) or [],
        layer_of_interest=getattr(args, "layer_of_interest", None),
        feature_slice_start=getattr(args, "feature_slice_start", None),
        rows=getattr(args, "rows", "anchor"),
        images=args.images or [],
        synthetic=args.synthetic,
        image_size=args.image_size,
        seed=args.seed,
        out_dir=args.out,
    )


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "reps":
            path = export_representations(_config(args))
        else:
            path = export_predictions(args.work_order, _config(args))
    except (ValueError, RuntimeError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
