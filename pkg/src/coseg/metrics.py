"""Evaluation measures for binary and soft segmentation predictions.

Binary-mode reporting uses the Jaccard index and per-pixel labeling
accuracy; soft-map reporting uses mean absolute error, the maximum
F-measure over 256 thresholds (beta^2 = 0.3), and the structure measure
(alpha = 0.5).  Predictions are resized to ground-truth resolution inside
this layer so the pipeline can stay at its working resolution.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .packio import resize_map

logger = logging.getLogger(__name__)

F_MEASURE_BETA_SQ = 0.3
F_MEASURE_THRESHOLDS = 256
S_MEASURE_ALPHA = 0.5

_EPS = np.spacing(1.0)


@dataclass(frozen=True)
class SaliencyPrediction:
    """Real-valued prediction in [0, 1]; binary masks are the {0, 1} case."""

    image_id: str
    map: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.map, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError("prediction map must be 2-D")
        if m.min() < 0 or m.max() > 1:
            raise ValueError("prediction values must lie in [0, 1]")
        object.__setattr__(self, "map", m)

    @property
    def is_binary(self) -> bool:
        return bool(np.isin(self.map, (0.0, 1.0)).all())


@dataclass
class MetricReport:
    """Per-image, per-class, and overall unweighted means of all measures."""

    per_image: dict[str, dict[str, float]] = field(default_factory=dict)
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)
    overall: dict[str, float] = field(default_factory=dict)
    n_images: int = 0
    n_classes: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "overall": self.overall,
            "per_class": self.per_class,
            "per_image": self.per_image,
            "n_images": self.n_images,
            "n_classes": self.n_classes,
        }, indent=2, sort_keys=True)

    def to_table(self, mode: str = "cosal") -> str:
        """Aligned-column text table; one row per class plus the overall row."""
        if mode == "cosal":
            columns = [("MAE", "mae", "v"), ("Fmax", "f_beta_max", "^"),
                       ("S", "s_measure", "^")]
        elif mode == "coseg":
            columns = [("J_m", "jaccard", "^"), ("P_m", "precision", "^")]
        else:
            raise ValueError(f"unknown mode {mode!r}")
        header = ["class"] + [f"{name}{'↓' if d == 'v' else '↑'}"
                              for name, _, d in columns]
        rows = []
        for class_id in sorted(self.per_class):
            vals = self.per_class[class_id]
            rows.append([class_id] + [f"{vals[key]:.4f}" for _, key, _ in columns])
        rows.append(["overall"] + [f"{self.overall[key]:.4f}"
                                   for _, key, _ in columns])
        widths = [max(len(str(r[i])) for r in [header] + rows)
                  for i in range(len(header))]
        lines = ["  ".join(str(cell).ljust(widths[i])
                           for i, cell in enumerate(row))
                 for row in [header] + rows]
        return "\n".join(lines)


def _check_dims(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"dimension mismatch: pred {pred.shape} vs gt {gt.shape}")


def jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two boolean masks; 1 when both are empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    _check_dims(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def precision(pred: np.ndarray, gt: np.ndarray) -> float:
    """Fraction of pixels whose predicted label matches the ground truth."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    _check_dims(pred, gt)
    return float(np.count_nonzero(pred == gt) / gt.size)


def _pred_at_gt_resolution(pred: SaliencyPrediction, gt: np.ndarray) -> np.ndarray:
    gt = np.asarray(gt, dtype=bool)
    if pred.map.shape == gt.shape:
        return pred.map
    method = "nearest" if pred.is_binary else "bilinear"
    resized = resize_map(pred.map, gt.shape, method)
    return np.clip(resized, 0.0, 1.0)


def mae(pred: SaliencyPrediction, gt: np.ndarray) -> float:
    """Mean absolute error between the prediction and the binary truth."""
    gt = np.asarray(gt, dtype=bool)
    p = _pred_at_gt_resolution(pred, gt)
    return float(np.abs(p - gt.astype(np.float64)).mean())


def f_beta_max(pred: SaliencyPrediction, gt: np.ndarray,
               beta_sq: float = F_MEASURE_BETA_SQ,
               n_thresholds: int = F_MEASURE_THRESHOLDS) -> float:
    """Maximum F-measure over binarization thresholds k/255, k = 0..255.

    F = (1 + beta^2) p r / (beta^2 p + r), zero where the denominator
    vanishes.  Zero-response pixels never count as positive, so an empty
    prediction scores 0 at every threshold including t = 0.  An
    all-background ground truth has undefined recall; the score is 0 and a
    warning is logged.
    """
    gt = np.asarray(gt, dtype=bool)
    p = _pred_at_gt_resolution(pred, gt)
    n_fg = np.count_nonzero(gt)
    if n_fg == 0:
        logger.warning("%s: ground truth has no foreground; F-measure set to 0",
                       pred.image_id)
        return 0.0
    best = 0.0
    for k in range(n_thresholds):
        t = k / (n_thresholds - 1)
        binary = (p >= t) if t > 0 else (p > 0)
        tp = np.count_nonzero(binary & gt)
        n_pred = np.count_nonzero(binary)
        prec = tp / n_pred if n_pred else 0.0
        rec = tp / n_fg
        denom = beta_sq * prec + rec
        f = (1 + beta_sq) * prec * rec / denom if denom > 0 else 0.0
        best = max(best, f)
    return best


def s_measure(pred: SaliencyPrediction, gt: np.ndarray,
              alpha: float = S_MEASURE_ALPHA) -> float:
    """Structure measure: alpha * object term + (1 - alpha) * region term.

    All-background truth scores 1 - mean(pred); all-foreground scores
    mean(pred).  The result is clamped to [0, 1].
    """
    gt = np.asarray(gt, dtype=bool)
    p = _pred_at_gt_resolution(pred, gt)
    y = gt.mean()
    if y == 0:
        return float(1.0 - p.mean())
    if y == 1:
        return float(p.mean())
    score = alpha * _s_object(p, gt) + (1 - alpha) * _s_region(p, gt)
    return float(min(1.0, max(0.0, score)))


def _s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    fg = pred * gt
    bg = (1.0 - pred) * (~gt)
    u = gt.mean()
    return u * _object_score(fg, gt) + (1 - u) * _object_score(bg, ~gt)


def _object_score(values: np.ndarray, region: np.ndarray) -> float:
    sel = values[region]
    x = sel.mean()
    sigma = sel.std(ddof=1) if sel.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + _EPS)


def _s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    # Centroid with the one-based convention of the reference definition, so
    # the split indices can be used directly as slice bounds.
    rows, cols = np.nonzero(gt)
    cy = int(np.round(rows.mean())) + 1
    cx = int(np.round(cols.mean())) + 1
    area = h * w
    quads = [
        (slice(0, cy), slice(0, cx)),
        (slice(0, cy), slice(cx, w)),
        (slice(cy, h), slice(0, cx)),
        (slice(cy, h), slice(cx, w)),
    ]
    w1 = cx * cy / area
    w2 = cy * (w - cx) / area
    w3 = (h - cy) * cx / area
    weights = [w1, w2, w3, 1.0 - w1 - w2 - w3]
    score = 0.0
    for (rs, cs), wt in zip(quads, weights):
        if wt <= 0:
            continue
        score += wt * _ssim(pred[rs, cs], gt[rs, cs].astype(np.float64))
    return score


def _ssim(x: np.ndarray, y: np.ndarray) -> float:
    n = x.size
    if n <= 1:
        return 1.0 if np.allclose(x, y) else 0.0
    mx, my = x.mean(), y.mean()
    var_x = ((x - mx) ** 2).sum() / (n - 1)
    var_y = ((y - my) ** 2).sum() / (n - 1)
    cov = ((x - mx) * (y - my)).sum() / (n - 1)
    num = 4.0 * mx * my * cov
    den = (mx * mx + my * my) * (var_x + var_y)
    if num != 0:
        return num / (den + _EPS)
    return 1.0 if den == 0 else 0.0


METRIC_NAMES = ("jaccard", "precision", "mae", "f_beta_max", "s_measure")


def evaluate_pair(pred: SaliencyPrediction, gt: np.ndarray) -> dict[str, float]:
    """All five measures for one prediction; binary masks use map >= 0.5."""
    gt = np.asarray(gt, dtype=bool)
    p = _pred_at_gt_resolution(pred, gt)
    binary = p >= 0.5
    return {
        "jaccard": jaccard(binary, gt),
        "precision": precision(binary, gt),
        "mae": mae(pred, gt),
        "f_beta_max": f_beta_max(pred, gt),
        "s_measure": s_measure(pred, gt),
    }


def aggregate(per_image: dict[str, dict[str, float]],
              classes: dict[str, str] | None = None) -> MetricReport:
    """Unweighted means over images, grouped by class and overall.

    ``classes`` maps image_id to class_id; a missing map puts every image in
    one class named "all".
    """
    if not per_image:
        raise ValueError("cannot aggregate an empty result set")
    classes = classes or {}
    by_class: dict[str, list[dict[str, float]]] = {}
    for image_id, values in per_image.items():
        by_class.setdefault(classes.get(image_id, "all"), []).append(values)

    def _mean(rows: list[dict[str, float]]) -> dict[str, float]:
        keys = rows[0].keys()
        return {k: float(np.mean([r[k] for r in rows])) for k in keys}

    per_class = {cid: _mean(rows) for cid, rows in by_class.items()}
    overall = _mean(list(per_image.values()))
    return MetricReport(per_image=dict(per_image), per_class=per_class,
                        overall=overall, n_images=len(per_image),
                        n_classes=len(per_class))
