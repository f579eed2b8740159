"""Orchestration: full per-class segmentation runs, experiment protocols,
evaluation, and the edge-map masking utility.

A class job names two feature packs (one driving class relevance, one
driving the intra-image affinity graph), an optional image directory for
color refinement, and an output directory.  Runs are deterministic for a
fixed configuration and seed; per-image failures are recorded in the run
manifest and do not abort the class.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import grabcut, metrics, packio, relevance, spectral

logger = logging.getLogger(__name__)

PACK_A = "pack-A"
PACK_B = "pack-B"

# Default hyperparameters, frozen so configuration drift is caught at import.
APPENDIX_DEFAULTS = {
    "tau": 0.2,
    "epsilon": 1e-5,
    "gamma": 1e-4,
    "k_eigenvectors": 16,
    "beta": 0.5,
    "max_images_for_relevance": 90,
    "working_resolution": 256,
}


@dataclass(frozen=True)
class PipelineConfig:
    """All knobs of the segmentation pipeline; defaults are the frozen block."""

    tau: float = 0.2
    epsilon: float = 1e-5
    gamma: float = 1e-4
    k_eigenvectors: int = 16
    beta: float = 0.5
    max_images_for_relevance: int = 90
    grabcut_iterations: int = 5
    grabcut_components: int = 5
    grabcut_gamma: float = 50.0
    grabcut_connectivity: int = 8
    working_resolution: int = 256
    relevance_source: str = PACK_A
    affinity_source: str = PACK_B
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()

    @classmethod
    def from_file(cls, path: str) -> "PipelineConfig":
        """Parse a flat key-value text file; keys must match field names."""
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        overrides = {}
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key = value")
                key, value = (part.strip() for part in line.split("=", 1))
                if key not in fields:
                    raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
                overrides[key] = _coerce(value, fields[key])
        return cls(**overrides)


def _coerce(value: str, type_name: str):
    if type_name == "int":
        return int(value)
    if type_name == "float":
        return float(value)
    return value


def _check_frozen_defaults() -> None:
    defaults = PipelineConfig()
    for key, expected in APPENDIX_DEFAULTS.items():
        actual = getattr(defaults, key)
        if actual != expected:
            raise AssertionError(
                f"config default {key}={actual} drifted from frozen value {expected}")


_check_frozen_defaults()

MODE_STANDARD = "standard"
MODE_OUTLIERS = "outliers"
MODE_LEAVE_ONE_OUT = "loo"


@dataclass(frozen=True)
class ClassJob:
    """One class's inputs, outputs, and experiment mode."""

    class_id: str
    relevance_pack: str
    affinity_pack: str
    out_dir: str
    image_dir: str | None = None
    gt_dir: str | None = None
    mode: str = MODE_STANDARD
    n_outliers: int = 0
    donor_packs: tuple[str, ...] = ()
    segment_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.mode not in (MODE_STANDARD, MODE_OUTLIERS, MODE_LEAVE_ONE_OUT):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == MODE_OUTLIERS and self.n_outliers < 0:
            raise ValueError("n_outliers must be >= 0")


@dataclass
class SegmentationResult:
    """Per-image output: coarse patch mask, pixel mask, optional soft map."""

    image_id: str
    coarse: spectral.CoarseMask
    pixel_mask: grabcut.PixelMask
    soft_map: np.ndarray | None = None
    flags: dict = field(default_factory=dict)


def _resolve_sources(job: ClassJob, cfg: PipelineConfig) -> tuple[str, str]:
    packs = {PACK_A: job.relevance_pack, PACK_B: job.affinity_pack}
    try:
        return packs[cfg.relevance_source], packs[cfg.affinity_source]
    except KeyError as exc:
        raise ValueError(f"unknown feature source {exc.args[0]!r}") from exc


def _outlier_grids(donor_packs: tuple[str, ...], n: int,
                   exclude_class: str) -> list[packio.PatchFeatureGrid]:
    grids = []
    for pack_path in donor_packs:
        donor = packio.read_feature_pack(pack_path)
        if donor.class_id == exclude_class:
            continue
        for grid in donor.grids:
            if len(grids) >= n:
                return grids
            grids.append(dataclasses.replace(
                grid, image_id=f"outlier_{len(grids):03d}_{grid.image_id}"))
    if len(grids) < n:
        raise ValueError(f"requested {n} outlier images, found {len(grids)}")
    return grids


def _fit_with_outliers(rel_set: packio.ClassFeatureSet, job: ClassJob,
                       cfg: PipelineConfig) -> relevance.RelevanceModel:
    inliers = rel_set.grids[:cfg.max_images_for_relevance]
    extra = _outlier_grids(job.donor_packs, job.n_outliers, rel_set.class_id)
    contaminated = packio.ClassFeatureSet(
        class_id=rel_set.class_id, grids=tuple(inliers) + tuple(extra),
        source_model_tag=rel_set.source_model_tag)
    return relevance.fit_relevance_model(
        contaminated, max_images=len(contaminated.grids))


def _fit_excluding(rel_set: packio.ClassFeatureSet, holdout_id: str,
                   cfg: PipelineConfig) -> relevance.RelevanceModel:
    kept = tuple(g for g in rel_set.grids if g.image_id != holdout_id)
    subset = packio.ClassFeatureSet(class_id=rel_set.class_id, grids=kept,
                                    source_model_tag=rel_set.source_model_tag)
    return relevance.fit_relevance_model(
        subset, max_images=cfg.max_images_for_relevance)


def _segment_image(rel_grid: packio.PatchFeatureGrid,
                   aff_grid: packio.PatchFeatureGrid,
                   model: relevance.RelevanceModel,
                   image: packio.RgbImage | None,
                   cfg: PipelineConfig) -> SegmentationResult:
    flags: dict = {}
    rmap = relevance.relevance_map(model, rel_grid)
    target = (aff_grid.grid_rows, aff_grid.grid_cols)
    seed_vec = relevance.seed_from_relevance(rmap, beta=cfg.beta, target_grid=target)

    graph = spectral.build_affinity(aff_grid, tau=cfg.tau, epsilon=cfg.epsilon)
    k_eff = min(cfg.k_eigenvectors, graph.n - 2)
    if k_eff < cfg.k_eigenvectors:
        flags["reduced_k"] = k_eff
    basis = spectral.solve_generalized(graph, k=k_eff)

    if seed_vec.is_empty:
        flags["fallback"] = "empty_seed"
        coarse = spectral.ncut_mask(basis, graph, rmap)
    else:
        # The bias weights need gamma below the smallest retained eigenvalue;
        # sharply clustered graphs can push lambda_2 under the default, so
        # shrink gamma rather than failing the image.
        gamma = cfg.gamma
        if gamma >= basis.eigenvalues[0]:
            gamma = 0.5 * basis.eigenvalues[0]
            flags["reduced_gamma"] = gamma
        coarse = spectral.biased_ncut_mask(basis, graph, seed_vec, gamma=gamma)
        if coarse.degenerate:
            flags["fallback"] = "degenerate_bias"

    trimap = grabcut.upscale_mask(coarse, aff_grid.patch_size_px)
    if trimap.degenerate:
        flags["degenerate_trimap"] = True

    if image is not None and not trimap.degenerate:
        if (image.height_px, image.width_px) != (trimap.height_px, trimap.width_px):
            resized = np.asarray(
                Image.fromarray(image.pixels).resize(
                    (trimap.width_px, trimap.height_px), Image.BILINEAR))
            image = packio.RgbImage(image_id=image.image_id, pixels=resized)
        pixel_mask, trace = grabcut.refine(
            image, trimap, iterations=cfg.grabcut_iterations,
            gmm_components=cfg.grabcut_components,
            pairwise_gamma=cfg.grabcut_gamma,
            connectivity=cfg.grabcut_connectivity, seed=cfg.seed)
        flags["energy_trace"] = trace
    else:
        if image is None:
            flags["refinement"] = "skipped_no_image"
        pixel_mask = grabcut.PixelMask(image_id=rel_grid.image_id,
                                       mask=trimap.fg.copy())

    soft = None
    if coarse.biased_vector is not None:
        bv = coarse.biased_vector
        span = bv.max() - bv.min()
        soft = (bv - bv.min()) / span if span > 0 else np.zeros_like(bv)
    return SegmentationResult(image_id=rel_grid.image_id, coarse=coarse,
                              pixel_mask=pixel_mask, soft_map=soft, flags=flags)


def _find_image(image_dir: str | None, image_id: str) -> packio.RgbImage | None:
    if image_dir is None:
        return None
    for ext in (".png", ".jpg", ".jpeg"):
        path = os.path.join(image_dir, image_id + ext)
        if os.path.isfile(path):
            return packio.load_rgb_image(path, image_id)
    return None


def run_class(job: ClassJob, cfg: PipelineConfig,
              workers: int = 1) -> list[SegmentationResult]:
    """Run the full pipeline for one class and write masks plus a manifest.

    Fits the class-relevance model (subject to the experiment mode), then
    segments each image independently: relevance map, eroded softmax seed,
    affinity graph, seed-biased cut with plain-cut fallback, upscaling, and
    color refinement when images are available.  Per-image work may fan out
    to ``workers`` threads; results and outputs are identical for any count.
    """
    rel_path, aff_path = _resolve_sources(job, cfg)
    rel_set = packio.read_feature_pack(rel_path)
    aff_set = packio.read_feature_pack(aff_path)
    if set(rel_set.image_ids) != set(aff_set.image_ids):
        raise ValueError(
            f"packs cover different image sets: {sorted(rel_set.image_ids)[:3]}... "
            f"vs {sorted(aff_set.image_ids)[:3]}...")

    if job.mode == MODE_OUTLIERS:
        model = _fit_with_outliers(rel_set, job, cfg)
    elif job.mode == MODE_STANDARD:
        model = relevance.fit_relevance_model(
            rel_set, max_images=cfg.max_images_for_relevance)
    else:
        model = None  # fitted per image below

    ids = list(job.segment_ids) if job.segment_ids is not None else rel_set.image_ids
    mask_dir = os.path.join(job.out_dir, "masks")
    coarse_dir = os.path.join(job.out_dir, "coarse")
    os.makedirs(mask_dir, exist_ok=True)
    os.makedirs(coarse_dir, exist_ok=True)

    def _one(image_id: str) -> SegmentationResult:
        image_model = model
        if job.mode == MODE_LEAVE_ONE_OUT:
            image_model = _fit_excluding(rel_set, image_id, cfg)
        return _segment_image(
            rel_set.grid_for(image_id), aff_set.grid_for(image_id),
            image_model, _find_image(job.image_dir, image_id), cfg)

    outcomes: dict[str, SegmentationResult | Exception] = {}
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {image_id: pool.submit(_one, image_id) for image_id in ids}
        for image_id, future in futures.items():
            outcomes[image_id] = future.exception() or future.result()
    else:
        for image_id in ids:
            try:
                outcomes[image_id] = _one(image_id)
            except Exception as exc:
                outcomes[image_id] = exc

    results: list[SegmentationResult] = []
    failures: dict[str, str] = {}
    per_image_flags: dict[str, dict] = {}
    for image_id in ids:  # deterministic output order regardless of workers
        outcome = outcomes[image_id]
        if isinstance(outcome, Exception):
            logger.warning("%s/%s failed: %s", job.class_id, image_id, outcome)
            failures[image_id] = str(outcome)
            continue
        results.append(outcome)
        per_image_flags[image_id] = {
            k: v for k, v in outcome.flags.items() if k != "energy_trace"}
        packio.save_mask_png(outcome.pixel_mask.mask,
                             os.path.join(mask_dir, f"{image_id}.png"))
        packio.save_mask_png(outcome.coarse.mask,
                             os.path.join(coarse_dir, f"{image_id}.png"))
        trace = outcome.flags.get("energy_trace")
        if trace:
            trace_dir = os.path.join(job.out_dir, "traces")
            os.makedirs(trace_dir, exist_ok=True)
            grabcut.save_energy_trace(
                trace, os.path.join(trace_dir, f"{image_id}.json"))

    manifest = {
        "class_id": job.class_id,
        "mode": job.mode,
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "relevance_pack_digest": packio.pack_digest(rel_path),
        "affinity_pack_digest": packio.pack_digest(aff_path),
        "per_image_flags": per_image_flags,
        "failures": failures,
    }
    with open(os.path.join(job.out_dir, "run_manifest.json"), "w",
              encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return results


def run_ablation_matrix(job: ClassJob, cfg: PipelineConfig,
                        combos: list[tuple[str, str]] | None = None) -> list[dict]:
    """Run every {relevance source} x {affinity source} combination.

    Returns one row per combination with the source tags and the coarse-mask
    metric report against the job's ground truth.
    """
    if job.gt_dir is None:
        raise ValueError("ablation requires a ground-truth directory")
    if combos is None:
        combos = [(PACK_A, PACK_A), (PACK_A, PACK_B), (PACK_B, PACK_A),
                  (PACK_B, PACK_B)]
    tags = {
        PACK_A: packio.read_feature_pack(job.relevance_pack).source_model_tag,
        PACK_B: packio.read_feature_pack(job.affinity_pack).source_model_tag,
    }
    rows = []
    for rel_source, aff_source in combos:
        combo_cfg = dataclasses.replace(cfg, relevance_source=rel_source,
                                        affinity_source=aff_source)
        out_dir = os.path.join(job.out_dir, f"{rel_source}__{aff_source}")
        combo_job = dataclasses.replace(job, out_dir=out_dir)
        run_class(combo_job, combo_cfg)
        report = evaluate(os.path.join(out_dir, "masks"), job.gt_dir, mode="coseg")
        rows.append({
            "relevance_source": rel_source,
            "affinity_source": aff_source,
            "relevance_tag": tags[rel_source],
            "affinity_tag": tags[aff_source],
            "metrics": report.overall,
        })
    return rows


def _collect_pngs(root: str) -> dict[str, tuple[str, str]]:
    """Map image_id -> (class_id, path) for flat or per-class layouts."""
    found = {}
    subdirs = sorted(d for d in os.listdir(root)
                     if os.path.isdir(os.path.join(root, d)))
    if subdirs and not any(f.endswith(".png") for f in os.listdir(root)):
        for sub in subdirs:
            for name in sorted(os.listdir(os.path.join(root, sub))):
                if name.endswith(".png"):
                    image_id = name[:-4]
                    found[image_id] = (sub, os.path.join(root, sub, name))
    else:
        for name in sorted(os.listdir(root)):
            if name.endswith(".png"):
                found[name[:-4]] = ("all", os.path.join(root, name))
    return found


def evaluate(pred_dir: str, gt_dir: str, mode: str = "coseg") -> metrics.MetricReport:
    """Score every predicted mask in ``pred_dir`` against its ground truth.

    coseg mode reports the Jaccard index and labeling accuracy of binarized
    predictions; cosal mode reports MAE, max F-measure, and the structure
    measure of the grayscale maps.  A prediction without a ground-truth
    counterpart is an error.
    """
    if mode not in ("coseg", "cosal"):
        raise ValueError(f"unknown mode {mode!r}")
    preds = _collect_pngs(pred_dir)
    if not preds:
        raise ValueError(f"no predictions found under {pred_dir}")
    missing = []
    per_image = {}
    classes = {}
    for image_id, (class_id, pred_path) in preds.items():
        candidates = [os.path.join(gt_dir, class_id, f"{image_id}.png"),
                      os.path.join(gt_dir, f"{image_id}.png")]
        gt_path = next((p for p in candidates if os.path.isfile(p)), None)
        if gt_path is None:
            missing.append(image_id)
            continue
        gt = packio.load_mask(gt_path).mask
        with Image.open(pred_path) as im:
            raw = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        classes[image_id] = class_id
        if mode == "coseg":
            pred_mask = packio.resize_map(raw >= 0.5, gt.shape, "nearest")
            per_image[image_id] = {
                "jaccard": metrics.jaccard(pred_mask, gt),
                "precision": metrics.precision(pred_mask, gt),
            }
        else:
            pred = metrics.SaliencyPrediction(image_id=image_id, map=raw)
            per_image[image_id] = {
                "mae": metrics.mae(pred, gt),
                "f_beta_max": metrics.f_beta_max(pred, gt),
                "s_measure": metrics.s_measure(pred, gt),
            }
    if missing:
        raise FileNotFoundError(
            f"missing ground truth for: {', '.join(sorted(missing))}")
    return metrics.aggregate(per_image, classes)


def mask_edgemap(edgemap: np.ndarray, mask: grabcut.PixelMask) -> np.ndarray:
    """Drop edge responses outside the mask: pointwise product with {0, 1}."""
    edges = np.asarray(edgemap, dtype=np.float64)
    if edges.ndim != 2:
        raise ValueError("edgemap must be 2-D")
    m = mask.mask
    if m.shape != edges.shape:
        m = packio.resize_map(m, edges.shape, "nearest")
    return edges * m
