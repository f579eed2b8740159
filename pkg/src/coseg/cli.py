"""Command-line entry points for segmentation runs, evaluation, the
source-ablation matrix, edge-map masking, and synthetic fixture generation.

Exit codes: 0 on full success, 2 when some images failed but the run
completed, 1 on fatal errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
from PIL import Image

from . import packio, pipeline
from .grabcut import PixelMask

logger = logging.getLogger(__name__)


def _add_segment(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("segment", help="run the co-segmentation pipeline for one class")
    p.add_argument("--relevance-pack", required=True)
    p.add_argument("--affinity-pack", required=True)
    p.add_argument("--images", default=None, help="RGB image directory (optional)")
    p.add_argument("--gt", default=None, help="ground-truth directory (optional)")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--mode", default=pipeline.MODE_STANDARD,
                   choices=[pipeline.MODE_STANDARD, pipeline.MODE_OUTLIERS,
                            pipeline.MODE_LEAVE_ONE_OUT])
    p.add_argument("--outliers", type=int, default=0)
    p.add_argument("--donor-pack", action="append", default=[])
    p.add_argument("--loo", action="store_true",
                   help="shorthand for --mode loo")
    p.add_argument("--class-id", default=None)
    p.add_argument("--workers", type=int, default=1)


def _add_eval(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mode", default="coseg", choices=["coseg", "cosal"])
    p.add_argument("--report", default="table", choices=["json", "table"])


def _add_ablate(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("ablate", help="run the feature-source ablation matrix")
    p.add_argument("--pack-a", required=True)
    p.add_argument("--pack-b", required=True)
    p.add_argument("--images", default=None)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--class-id", default=None)


def _add_mask_edges(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("mask-edges", help="zero out edge responses outside a mask")
    p.add_argument("--edgemap", required=True, help="grayscale PNG in [0, 255]")
    p.add_argument("--mask", required=True, help="binary mask PNG")
    p.add_argument("--out", required=True)


def _add_synth(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("synth", help="generate synthetic fixture packs")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=8)
    p.add_argument("--grid", default="16,16", help="patch grid rows,cols")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--separation", type=float, default=10.0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--class-id", default="synthetic")
    p.add_argument("--rect", default=None,
                   help="foreground rectangle row0,col0,height,width")
    p.add_argument("--render-images", action="store_true",
                   help="also write two-color RGB renderings")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coseg",
        description="Co-segmentation of image sets from patch-feature packs.")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_segment(sub)
    _add_eval(sub)
    _add_ablate(sub)
    _add_mask_edges(sub)
    _add_synth(sub)
    return parser


def _load_config(path: str | None) -> pipeline.PipelineConfig:
    if path is None:
        return pipeline.PipelineConfig()
    return pipeline.PipelineConfig.from_file(path)


def _cmd_segment(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    mode = pipeline.MODE_LEAVE_ONE_OUT if args.loo else args.mode
    class_id = args.class_id
    if class_id is None:
        class_id = packio.read_feature_pack(args.relevance_pack).class_id
    job = pipeline.ClassJob(
        class_id=class_id,
        relevance_pack=args.relevance_pack,
        affinity_pack=args.affinity_pack,
        image_dir=args.images,
        gt_dir=args.gt,
        out_dir=args.out,
        mode=mode,
        n_outliers=args.outliers,
        donor_packs=tuple(args.donor_pack),
    )
    results = pipeline.run_class(job, cfg, workers=args.workers)
    with open(os.path.join(args.out, "run_manifest.json"), encoding="utf-8") as f:
        failures = json.load(f)["failures"]
    print(f"{class_id}: {len(results)} images segmented, {len(failures)} failures")
    return 2 if failures else 0


def _cmd_eval(args: argparse.Namespace) -> int:
    report = pipeline.evaluate(args.pred, args.gt, mode=args.mode)
    if args.report == "json":
        print(report.to_json())
    else:
        print(report.to_table(mode="cosal" if args.mode == "cosal" else "coseg"))
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    class_id = args.class_id
    if class_id is None:
        class_id = packio.read_feature_pack(args.pack_a).class_id
    job = pipeline.ClassJob(
        class_id=class_id,
        relevance_pack=args.pack_a,
        affinity_pack=args.pack_b,
        image_dir=args.images,
        gt_dir=args.gt,
        out_dir=args.out,
    )
    rows = pipeline.run_ablation_matrix(job, cfg)
    for row in rows:
        vals = "  ".join(f"{k}={v:.4f}" for k, v in row["metrics"].items())
        print(f"relevance={row['relevance_tag']:<24} "
              f"affinity={row['affinity_tag']:<24} {vals}")
    return 0


def _cmd_mask_edges(args: argparse.Namespace) -> int:
    with Image.open(args.edgemap) as im:
        edges = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    mask = packio.load_mask(args.mask)
    masked = pipeline.mask_edgemap(edges, PixelMask(image_id="edges",
                                                    mask=mask.mask))
    Image.fromarray(np.round(masked * 255).astype(np.uint8), mode="L").save(args.out)
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    h, w = (int(x) for x in args.grid.split(","))
    if args.rect is not None:
        rect = tuple(int(x) for x in args.rect.split(","))
    else:
        rect = (h // 4, w // 4, h // 2, w // 2)
    feature_set, gt_masks = packio.make_synthetic_class(
        n_images=args.images, grid=(h, w), d=args.dim, fg_rect=rect,
        separation=args.separation, noise=args.noise, seed=args.seed,
        class_id=args.class_id, patch_size_px=args.patch_size)
    pack_dir = os.path.join(args.out, "pack")
    gt_dir = os.path.join(args.out, "gt")
    packio.write_feature_pack(feature_set, pack_dir)
    os.makedirs(gt_dir, exist_ok=True)
    for gt in gt_masks:
        upscaled = np.repeat(np.repeat(gt.mask, args.patch_size, axis=0),
                             args.patch_size, axis=1)
        packio.save_mask_png(upscaled, os.path.join(gt_dir, f"{gt.image_id}.png"))
    if args.render_images:
        image_dir = os.path.join(args.out, "images")
        os.makedirs(image_dir, exist_ok=True)
        for img in packio.render_synthetic_images(gt_masks, args.patch_size,
                                                  seed=args.seed):
            Image.fromarray(img.pixels).save(
                os.path.join(image_dir, f"{img.image_id}.png"))
    print(f"wrote pack to {pack_dir} ({args.images} images, grid {h}x{w})")
    return 0


_COMMANDS = {
    "segment": _cmd_segment,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "mask-edges": _cmd_mask_edges,
    "synth": _cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
