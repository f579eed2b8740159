"""Class-relevance model, per-image relevance maps, and seed vectors.

The class model is the dominant eigenvector of the scatter matrix of all
centered patch descriptors in the class, with an orientation sign chosen so
image-border patches mostly project negative.  Per-image relevance is the
positive part of the signed projection, normalized to [0, 1].  Seeds are
obtained by eroding the relevance support with a 2x2 mask and applying a
temperature softmax over the survivors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .packio import ClassFeatureSet, PatchFeatureGrid, save_gray_png

DEFAULT_SOFTMAX_TEMPERATURE = 0.5
DEFAULT_MAX_IMAGES = 90

_DEGENERATE_TOL = 1e-12


class DegenerateModelError(ValueError):
    """All descriptors are identical; no principal direction exists."""


@dataclass(frozen=True)
class RelevanceModel:
    """Class-level mean, unit principal direction, and orientation sign."""

    mu: np.ndarray
    xi: np.ndarray
    sigma: int
    n_descriptors: int

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        xi = np.asarray(self.xi, dtype=np.float64)
        if mu.ndim != 1 or xi.shape != mu.shape:
            raise ValueError("mu and xi must be 1-D vectors of equal length")
        if abs(np.linalg.norm(xi) - 1.0) > 1e-9:
            raise ValueError("xi must be unit norm")
        if self.sigma not in (-1, 1):
            raise ValueError(f"sigma must be -1 or +1, got {self.sigma}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "xi", xi)

    @property
    def feature_dim(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class RelevanceMap:
    """Signed projections and normalized relevance on one image's grid."""

    image_id: str
    grid_rows: int
    grid_cols: int
    projections: np.ndarray
    relevance: np.ndarray

    def __post_init__(self):
        shape = (self.grid_rows, self.grid_cols)
        proj = np.asarray(self.projections, dtype=np.float64)
        rel = np.asarray(self.relevance, dtype=np.float64)
        if proj.shape != shape or rel.shape != shape:
            raise ValueError(f"grids must have shape {shape}")
        if rel.min() < 0 or rel.max() > 1:
            raise ValueError("relevance values must lie in [0, 1]")
        if proj.max() > 0:
            if abs(rel.max() - 1.0) > 1e-9:
                raise ValueError("relevance must peak at 1 when any projection is positive")
        elif rel.max() != 0:
            raise ValueError("relevance must be identically 0 without positive projections")
        object.__setattr__(self, "projections", proj)
        object.__setattr__(self, "relevance", rel)

    @property
    def has_support(self) -> bool:
        """True when at least one patch has positive relevance."""
        return bool(self.relevance.max() > 0)


@dataclass(frozen=True)
class SeedVector:
    """Nonnegative per-patch bias weights on the segmentation grid.

    Weights sum to 1 unless ``is_empty``, in which case they are all zero.
    """

    image_id: str
    grid_rows: int
    grid_cols: int
    weights: np.ndarray
    is_empty: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (self.grid_rows, self.grid_cols):
            raise ValueError(f"weights must have shape {(self.grid_rows, self.grid_cols)}")
        if w.min() < 0:
            raise ValueError("seed weights must be nonnegative")
        total = w.sum()
        if self.is_empty:
            if total != 0:
                raise ValueError("empty seed must have all-zero weights")
        elif abs(total - 1.0) > 1e-9:
            raise ValueError(f"seed weights must sum to 1, got {total}")
        object.__setattr__(self, "weights", w)


def _stack_descriptors(feature_set: ClassFeatureSet, max_images: int) -> np.ndarray:
    grids = feature_set.grids[:max_images]
    return np.concatenate([g.features.astype(np.float64) for g in grids], axis=0)


def fit_relevance_model(feature_set: ClassFeatureSet,
                        max_images: int = DEFAULT_MAX_IMAGES) -> RelevanceModel:
    """Fit the class-relevance model from up to ``max_images`` grids.

    The principal direction is the dominant eigenvector of the d x d scatter
    matrix of centered descriptors, computed by dense symmetric
    eigendecomposition.  The eigenvector is canonicalized (largest-magnitude
    component positive) before the border-based orientation sign is chosen,
    so the result does not depend on the eigensolver's sign convention.
    """
    if max_images < 1:
        raise ValueError("max_images must be >= 1")
    descriptors = _stack_descriptors(feature_set, max_images)
    mu = descriptors.mean(axis=0)
    centered = descriptors - mu
    if np.max(np.abs(centered)) <= _DEGENERATE_TOL:
        raise DegenerateModelError(
            f"class {feature_set.class_id!r}: all descriptors identical within "
            f"{_DEGENERATE_TOL}")
    scatter = centered.T @ centered
    eigvals, eigvecs = np.linalg.eigh(scatter)
    xi = eigvecs[:, -1]
    xi = canonicalize_direction(xi)
    sigma = sign_fix(mu, xi, feature_set, max_images=max_images)
    return RelevanceModel(mu=mu, xi=xi, sigma=sigma,
                          n_descriptors=descriptors.shape[0])


def canonicalize_direction(xi: np.ndarray) -> np.ndarray:
    """Flip ``xi`` so its largest-magnitude component is positive.

    The pivot is the first component within a relative tolerance of the
    maximum magnitude, so exact ties (symmetric eigenvectors) resolve the
    same way regardless of rounding in the last bits.
    """
    xi = np.asarray(xi, dtype=np.float64)
    magnitude = np.abs(xi)
    pivot = int(np.argmax(magnitude >= (1.0 - 1e-9) * magnitude.max()))
    if xi[pivot] < 0:
        return -xi
    return xi.copy()


def _border_mask(rows: int, cols: int) -> np.ndarray:
    border = np.zeros((rows, cols), dtype=bool)
    border[0, :] = True
    border[-1, :] = True
    border[:, 0] = True
    border[:, -1] = True
    return border


def sign_fix(mu: np.ndarray, xi: np.ndarray, feature_set: ClassFeatureSet,
             max_images: int = DEFAULT_MAX_IMAGES) -> int:
    """Orientation sign making the majority of border patches project negative.

    Projections are evaluated with sign +1 over the border patches (first and
    last grid row and column) of every image.  If the nonnegative projections
    strictly outnumber the negative ones the sign is -1, otherwise +1; ties
    keep +1.
    """
    mu = np.asarray(mu, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    n_nonneg = 0
    n_neg = 0
    for grid in feature_set.grids[:max_images]:
        proj = (grid.features.astype(np.float64) - mu) @ xi
        border = _border_mask(grid.grid_rows, grid.grid_cols).reshape(-1)
        border_proj = proj[border]
        n_nonneg += int(np.count_nonzero(border_proj >= 0))
        n_neg += int(np.count_nonzero(border_proj < 0))
    return -1 if n_nonneg > n_neg else 1


def relevance_map(model: RelevanceModel, grid: PatchFeatureGrid) -> RelevanceMap:
    """Signed projections and [0, 1] relevance for one image.

    Negative projections map to zero; positive ones are divided by the
    per-image maximum.  When no projection is positive the relevance is
    identically zero (``has_support`` is False on the result).
    """
    if grid.feature_dim != model.feature_dim:
        raise ValueError(
            f"feature_dim mismatch: grid {grid.feature_dim} vs model {model.feature_dim}")
    proj = model.sigma * ((grid.features.astype(np.float64) - model.mu) @ model.xi)
    proj = proj.reshape(grid.grid_rows, grid.grid_cols)
    peak = proj.max()
    if peak > 0:
        rel = np.maximum(proj, 0.0) / peak
    else:
        rel = np.zeros_like(proj)
    return RelevanceMap(image_id=grid.image_id, grid_rows=grid.grid_rows,
                        grid_cols=grid.grid_cols, projections=proj, relevance=rel)


def erode_support(rel_map: RelevanceMap) -> np.ndarray:
    """Binary 2x2 erosion of the positive-relevance support.

    The structuring element is anchored at the top-left: cell (r, c) survives
    iff (r, c), (r, c+1), (r+1, c), (r+1, c+1) all carry positive relevance
    and are in bounds, so the last row and column never survive.
    """
    support = rel_map.relevance > 0
    out = np.zeros_like(support)
    out[:-1, :-1] = (support[:-1, :-1] & support[:-1, 1:]
                     & support[1:, :-1] & support[1:, 1:])
    return out


def build_seed(rel_map: RelevanceMap, eroded: np.ndarray,
               beta: float = DEFAULT_SOFTMAX_TEMPERATURE,
               target_grid: tuple[int, int] | None = None) -> SeedVector:
    """Softmax seed weights over the eroded support, optionally upsampled.

    Over the surviving cells, weights are exp(R/beta) normalized to sum 1;
    non-survivors get zero.  If ``target_grid`` is a finer grid (dimensions
    integer multiples of the map's), each cell is replicated nearest-neighbor
    and the result renormalized.  An empty surviving set yields is_empty.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    rows, cols = rel_map.grid_rows, rel_map.grid_cols
    if target_grid is None:
        target_grid = (rows, cols)
    t_rows, t_cols = target_grid
    if t_rows % rows or t_cols % cols:
        raise ValueError(
            f"target grid {target_grid} is not an integer multiple of ({rows}, {cols})")
    eroded = np.asarray(eroded, dtype=bool)
    if eroded.shape != (rows, cols):
        raise ValueError(f"eroded grid must have shape {(rows, cols)}")

    if not eroded.any():
        return SeedVector(image_id=rel_map.image_id, grid_rows=t_rows,
                          grid_cols=t_cols,
                          weights=np.zeros((t_rows, t_cols)), is_empty=True)

    weights = np.zeros((rows, cols), dtype=np.float64)
    scores = rel_map.relevance[eroded] / beta
    scores = np.exp(scores - scores.max())
    weights[eroded] = scores / scores.sum()

    if (t_rows, t_cols) != (rows, cols):
        weights = np.repeat(np.repeat(weights, t_rows // rows, axis=0),
                            t_cols // cols, axis=1)
        weights = weights / weights.sum()
    return SeedVector(image_id=rel_map.image_id, grid_rows=t_rows,
                      grid_cols=t_cols, weights=weights, is_empty=False)


def seed_from_relevance(rel_map: RelevanceMap,
                        beta: float = DEFAULT_SOFTMAX_TEMPERATURE,
                        target_grid: tuple[int, int] | None = None) -> SeedVector:
    """Erode, then build the seed; fall back to the un-eroded support.

    When erosion removes every cell the raw positive support is used instead;
    if that is also empty the seed is marked empty and the caller should fall
    back to the unbiased cut.
    """
    eroded = erode_support(rel_map)
    if not eroded.any():
        eroded = rel_map.relevance > 0
    return build_seed(rel_map, eroded, beta=beta, target_grid=target_grid)


def save_relevance_png(rel_map: RelevanceMap, path: str) -> None:
    """Export the relevance grid as 8-bit grayscale (0-255)."""
    save_gray_png(rel_map.relevance, path)


def seed_to_json(seed: SeedVector) -> str:
    return json.dumps({
        "image_id": seed.image_id,
        "grid_rows": seed.grid_rows,
        "grid_cols": seed.grid_cols,
        "is_empty": seed.is_empty,
        "weights": seed.weights.tolist(),
    })
