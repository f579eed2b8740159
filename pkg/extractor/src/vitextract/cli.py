"""Command-line feature-pack extraction from pretrained ViT backbones."""

import argparse
import logging
import sys

from .extract import BACKBONES, ExtractionSpec, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="extract",
        description="Extract last-attention-layer Key descriptors from an "
                    "image folder into a feature pack.")
    parser.add_argument("--images", required=True, help="image directory")
    parser.add_argument("--backbone", required=True,
                        choices=sorted(BACKBONES),
                        help="dino-s8 (patch 8, affinity) or imagenet-s16 "
                             "(patch 16, class relevance)")
    parser.add_argument("--out", required=True, help="output pack directory")
    parser.add_argument("--resize", type=int, default=256)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--weights", default=None,
                        help="local checkpoint directory or hub id override")
    parser.add_argument("--class-id", default=None)
    parser.add_argument("--batch-size", type=int, default=8)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    spec = ExtractionSpec(
        image_dir=args.images,
        backbone=args.backbone,
        out_path=args.out,
        resize=args.resize,
        device=args.device,
        weights=args.weights,
        class_id=args.class_id,
        batch_size=args.batch_size,
    )
    try:
        manifest = extract(spec)
    except Exception as exc:
        logging.error("%s", exc)
        return 1
    print(f"wrote {manifest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
