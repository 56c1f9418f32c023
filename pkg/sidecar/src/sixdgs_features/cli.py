"""CLI: ``sixdgs-extract extract --images DIR --out DIR`` plus a selfcheck."""

import argparse
import logging
import sys
from pathlib import Path

from .extract import ExtractJob, extract, selfcheck

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tiff", ".webp"}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sixdgs-extract",
        description="export dense ViT patch descriptors as 6DFEAT files",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="extract features for a directory of images")
    p.add_argument("--images", required=True, help="image file or directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--variant", default="small", choices=["small", "base", "large"])
    p.add_argument("--short-side", type=int, default=448,
                   help="resize target, multiple of the 14px patch stride")
    p.add_argument("--seed", type=int, default=0,
                   help="init seed for the offline-fallback backbone")

    p = sub.add_parser("selfcheck", help="verify the export layout end to end")
    p.add_argument("--variant", default="small", choices=["small", "base", "large"])
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "selfcheck":
        ok = selfcheck(variant=args.variant)
        print("selfcheck:", "ok" if ok else "FAILED")
        return 0 if ok else 1

    root = Path(args.images)
    if root.is_dir():
        images = sorted(
            p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
        )
    else:
        images = [root]
    if not images:
        print(f"no images under {root}", file=sys.stderr)
        return 1
    job = ExtractJob(
        images=images, out_dir=args.out, variant=args.variant,
        short_side=args.short_side, seed=args.seed,
    )
    failures = extract(job)
    if failures:
        print(f"{failures} image(s) failed", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
