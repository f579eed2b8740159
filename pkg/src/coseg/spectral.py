"""Patch affinity graphs and (biased) normalized-cut segmentation.

The affinity matrix is two-valued: 1 where patch cosine similarity clears a
threshold, a small epsilon elsewhere so the graph stays connected.  The
partition comes from the generalized eigensystem (D - E) y = lambda D y,
solved through the symmetric reduction z = D^{1/2} y.  The biased variant
combines the K smallest non-zero eigenvectors with weights proportional to
their correlation with a seed vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .packio import PatchFeatureGrid, save_gray_png, save_mask_png
from .relevance import RelevanceMap, SeedVector, canonicalize_direction

DEFAULT_TAU = 0.2
DEFAULT_EPSILON = 1e-5
DEFAULT_GAMMA = 1e-4
DEFAULT_N_EIGENVECTORS = 16
DEFAULT_ZERO_TOLERANCE = 1e-8


class ZeroNormFeatureError(ValueError):
    """A patch descriptor has zero norm; cosine similarity is undefined."""


class EigenDeficitError(RuntimeError):
    """Fewer positive generalized eigenvalues than requested."""


@dataclass(frozen=True)
class AffinityGraph:
    """Symmetric two-valued patch affinity with its degree vector."""

    image_id: str
    grid_rows: int
    grid_cols: int
    affinity: np.ndarray
    degree: np.ndarray
    tau: float
    epsilon: float

    def __post_init__(self):
        a = np.asarray(self.affinity, dtype=np.float64)
        d = np.asarray(self.degree, dtype=np.float64)
        n = self.grid_rows * self.grid_cols
        if a.shape != (n, n):
            raise ValueError(f"affinity must be {n}x{n}, got {a.shape}")
        if d.shape != (n,):
            raise ValueError(f"degree must have length {n}")
        if (d <= 0).any():
            raise ValueError("degrees must be strictly positive")
        object.__setattr__(self, "affinity", a)
        object.__setattr__(self, "degree", d)

    @property
    def n(self) -> int:
        return self.grid_rows * self.grid_cols


@dataclass(frozen=True)
class EigenBasis:
    """Retained generalized eigenpairs, zero modes excluded.

    ``eigenvalues`` is ascending; ``eigenvectors`` holds one vector per
    column, D-orthonormal and sign-canonicalized.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    zero_tolerance: float

    def __post_init__(self):
        vals = np.asarray(self.eigenvalues, dtype=np.float64)
        vecs = np.asarray(self.eigenvectors, dtype=np.float64)
        if vals.ndim != 1 or vecs.ndim != 2 or vecs.shape[1] != vals.shape[0]:
            raise ValueError("eigenvectors must have one column per eigenvalue")
        object.__setattr__(self, "eigenvalues", vals)
        object.__setattr__(self, "eigenvectors", vecs)

    @property
    def k(self) -> int:
        return self.eigenvalues.shape[0]


@dataclass(frozen=True)
class CoarseMask:
    """Patch-resolution binary mask, optionally with the biased cut vector."""

    image_id: str
    grid_rows: int
    grid_cols: int
    mask: np.ndarray
    biased_vector: np.ndarray | None = None
    degenerate: bool = False

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.shape != (self.grid_rows, self.grid_cols):
            raise ValueError(f"mask must have shape {(self.grid_rows, self.grid_cols)}")
        if not self.degenerate and (m.all() or not m.any()):
            raise ValueError("non-degenerate mask must have both sides populated")
        object.__setattr__(self, "mask", m)
        if self.biased_vector is not None:
            bv = np.asarray(self.biased_vector, dtype=np.float64)
            if bv.shape != m.shape:
                raise ValueError("biased_vector must match the mask shape")
            object.__setattr__(self, "biased_vector", bv)


def build_affinity(grid: PatchFeatureGrid, tau: float = DEFAULT_TAU,
                   epsilon: float = DEFAULT_EPSILON) -> AffinityGraph:
    """Two-valued cosine affinity over one image's patches.

    Entries are 1 where the pairwise cosine is at least ``tau`` and
    ``epsilon`` otherwise; the diagonal is always 1.  Rejects zero-norm
    descriptors.
    """
    feats = grid.features.astype(np.float64)
    norms = np.linalg.norm(feats, axis=1)
    if (norms == 0).any():
        bad = int(np.flatnonzero(norms == 0)[0])
        raise ZeroNormFeatureError(f"{grid.image_id}: patch {bad} has zero norm")
    unit = feats / norms[:, None]
    cosine = unit @ unit.T
    cosine = 0.5 * (cosine + cosine.T)
    affinity = np.where(cosine >= tau, 1.0, epsilon)
    np.fill_diagonal(affinity, 1.0)
    degree = affinity.sum(axis=1)
    return AffinityGraph(image_id=grid.image_id, grid_rows=grid.grid_rows,
                         grid_cols=grid.grid_cols, affinity=affinity,
                         degree=degree, tau=tau, epsilon=epsilon)


def solve_generalized(graph: AffinityGraph, k: int = DEFAULT_N_EIGENVECTORS,
                      zero_tolerance: float = DEFAULT_ZERO_TOLERANCE) -> EigenBasis:
    """K smallest non-zero generalized eigenpairs of (D - E) y = lambda D y.

    Solved via the symmetric normalized reduction
    D^{-1/2} (D - E) D^{-1/2} z = lambda z with y = D^{-1/2} z, which makes
    the returned vectors D-orthonormal by construction.  Eigenvalues below
    ``zero_tolerance`` (relative to the largest eigenvalue) are discarded as
    constant modes; each retained vector is flipped so its largest-magnitude
    component is positive.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n = graph.n
    if n < k + 1:
        raise ValueError(f"need at least k+1 nodes (n={n}, k={k})")
    inv_sqrt_d = 1.0 / np.sqrt(graph.degree)
    lap = np.diag(graph.degree) - graph.affinity
    lap_sym = inv_sqrt_d[:, None] * lap * inv_sqrt_d[None, :]
    lap_sym = 0.5 * (lap_sym + lap_sym.T)

    vals, vecs = np.linalg.eigh(lap_sym)
    threshold = zero_tolerance * max(abs(vals[-1]), 1.0)
    keep = vals > threshold
    if np.count_nonzero(keep) < k:
        raise EigenDeficitError(
            f"only {int(np.count_nonzero(keep))} positive eigenvalues available, "
            f"requested {k}")
    idx = np.flatnonzero(keep)[:k]
    eigenvalues = vals[idx]
    z = vecs[:, idx]
    y = inv_sqrt_d[:, None] * z
    for j in range(y.shape[1]):
        y[:, j] = canonicalize_direction(y[:, j])
    return EigenBasis(eigenvalues=eigenvalues, eigenvectors=y,
                      zero_tolerance=zero_tolerance)


def count_zero_modes(graph: AffinityGraph,
                     zero_tolerance: float = DEFAULT_ZERO_TOLERANCE) -> int:
    """Number of (near-)zero generalized eigenvalues; 1 for a connected graph."""
    inv_sqrt_d = 1.0 / np.sqrt(graph.degree)
    lap = np.diag(graph.degree) - graph.affinity
    lap_sym = inv_sqrt_d[:, None] * lap * inv_sqrt_d[None, :]
    lap_sym = 0.5 * (lap_sym + lap_sym.T)
    vals = np.linalg.eigvalsh(lap_sym)
    threshold = zero_tolerance * max(abs(vals[-1]), 1.0)
    return int(np.count_nonzero(vals <= threshold))


def _relevance_on_grid(rel_map: RelevanceMap, rows: int, cols: int) -> np.ndarray:
    rel = rel_map.relevance
    if rel.shape == (rows, cols):
        return rel
    if rows % rel_map.grid_rows or cols % rel_map.grid_cols:
        raise ValueError(
            f"cut grid {(rows, cols)} is not an integer multiple of the "
            f"relevance grid {(rel_map.grid_rows, rel_map.grid_cols)}")
    return np.repeat(np.repeat(rel, rows // rel_map.grid_rows, axis=0),
                     cols // rel_map.grid_cols, axis=1)


def ncut_mask(basis: EigenBasis, graph: AffinityGraph,
              rel_map: RelevanceMap | None = None) -> CoarseMask:
    """Plain cut: threshold the smallest non-zero eigenvector at its mean.

    The foreground side is the one containing the maximum-relevance patch
    when a usable relevance map is supplied; otherwise the side with smaller
    average degree, which is the less background-like one.
    """
    if basis.k < 1:
        raise ValueError("basis must contain at least one eigenvector")
    rows, cols = graph.grid_rows, graph.grid_cols
    u2 = basis.eigenvectors[:, 0]
    side = u2 > u2.mean()

    fg_side = None
    if rel_map is not None and rel_map.has_support:
        rel = _relevance_on_grid(rel_map, rows, cols).reshape(-1)
        fg_side = bool(side[int(np.argmax(rel))])
    if fg_side is None:
        deg_true = graph.degree[side].mean()
        deg_false = graph.degree[~side].mean()
        fg_side = deg_true <= deg_false
    mask = side if fg_side else ~side
    return CoarseMask(image_id=graph.image_id, grid_rows=rows, grid_cols=cols,
                      mask=mask.reshape(rows, cols))


def _seed_weights(seed: SeedVector | np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Flat nonnegative weights from a SeedVector or a raw grid.

    Raw grids may carry any positive total mass; the cut is invariant to
    that scale.
    """
    if isinstance(seed, SeedVector):
        if seed.is_empty:
            raise ValueError("seed is empty; use ncut_mask instead")
        if (seed.grid_rows, seed.grid_cols) != (rows, cols):
            raise ValueError(
                f"seed grid {(seed.grid_rows, seed.grid_cols)} does not match "
                f"cut grid {(rows, cols)}")
        return seed.weights.reshape(-1)
    weights = np.asarray(seed, dtype=np.float64).reshape(-1)
    if weights.shape[0] != rows * cols:
        raise ValueError(f"seed weights must have {rows * cols} entries")
    if weights.min() < 0 or weights.sum() <= 0:
        raise ValueError("raw seed weights must be nonnegative with positive sum")
    return weights


def biased_ncut_mask(basis: EigenBasis, graph: AffinityGraph,
                     seed: SeedVector | np.ndarray,
                     gamma: float = DEFAULT_GAMMA) -> CoarseMask:
    """Seed-biased cut: threshold the weighted eigenvector combination.

    The combination vector is sum_k w_k u_k with w_k = u_k' (D s) / (lambda_k
    - gamma), thresholded at its mean; the foreground side is the one with
    larger total seed mass.  Falls back to the plain cut (with the degenerate
    flag set) if the combination is constant, which happens exactly when the
    seed is uninformative, e.g. uniform.
    """
    rows, cols = graph.grid_rows, graph.grid_cols
    s = _seed_weights(seed, rows, cols)
    lam2 = basis.eigenvalues[0]
    if gamma >= lam2:
        raise ValueError(f"gamma={gamma} must be below the smallest retained "
                         f"eigenvalue {lam2}")
    ds = graph.degree * s
    weights = (basis.eigenvectors.T @ ds) / (basis.eigenvalues - gamma)
    combined = basis.eigenvectors @ weights

    # An uninformative seed (uniform, hence D-orthogonal to every retained
    # mode) makes the combination exactly zero in exact arithmetic; compare
    # the observed spread against the magnitude a correlated seed would
    # produce, not against the rounding noise itself.
    informative_scale = np.linalg.norm(ds) / max(lam2 - gamma, 1e-300)
    spread = combined.max() - combined.min()
    if spread <= 1e-9 * max(informative_scale, 1e-300):
        fallback = ncut_mask(basis, graph)
        return CoarseMask(image_id=graph.image_id, grid_rows=rows, grid_cols=cols,
                          mask=fallback.mask,
                          biased_vector=combined.reshape(rows, cols),
                          degenerate=True)

    side = combined > combined.mean()
    fg_side = s[side].sum() >= s[~side].sum()
    mask = side if fg_side else ~side
    if mask.all() or not mask.any():
        fallback = ncut_mask(basis, graph)
        return CoarseMask(image_id=graph.image_id, grid_rows=rows, grid_cols=cols,
                          mask=fallback.mask,
                          biased_vector=combined.reshape(rows, cols),
                          degenerate=True)
    return CoarseMask(image_id=graph.image_id, grid_rows=rows, grid_cols=cols,
                      mask=mask.reshape(rows, cols),
                      biased_vector=combined.reshape(rows, cols))


def biased_weights(basis: EigenBasis, graph: AffinityGraph,
                   seed: SeedVector | np.ndarray,
                   gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Per-eigenvector combination weights u_k' (D s) / (lambda_k - gamma)."""
    s = _seed_weights(seed, graph.grid_rows, graph.grid_cols)
    return (basis.eigenvectors.T @ (graph.degree * s)) / (basis.eigenvalues - gamma)


def save_coarse_mask_png(mask: CoarseMask, path: str) -> None:
    save_mask_png(mask.mask, path)


def save_biased_vector_png(mask: CoarseMask, path: str) -> None:
    if mask.biased_vector is None:
        raise ValueError("coarse mask carries no biased vector")
    save_gray_png(mask.biased_vector, path)
