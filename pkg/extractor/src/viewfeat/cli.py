"""Command line: extract per-view features for a render manifest."""

from __future__ import annotations

import argparse
import sys

from .extract import ExtractionError, ExtractorJob, run
from .models import REGISTRY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viewfeat", description=__doc__)
    parser.add_argument("manifest", help="view manifest produced by the renderer")
    parser.add_argument("--model", required=True, choices=sorted(REGISTRY), dest="model_id")
    parser.add_argument("--out", required=True, help="output directory for .b23d files")
    parser.add_argument("--image-dir", help="image directory (default: manifest's directory)")
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--device", default="cpu")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        job = ExtractorJob(
            manifest=args.manifest,
            model_id=args.model_id,
            output_dir=args.out,
            image_dir=args.image_dir,
            batch_size=args.batch_size,
            device=args.device,
        )
        result = run(job)
    except (ExtractionError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(
        f"wrote {len(result.files)} feature files "
        f"(grid {result.grid[0]}x{result.grid[1]}, dim {result.dim}, "
        f"class_token {int(result.has_class_token)}) to {job.output_dir}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
