"""Feature-pack interchange format, image/mask loading, and synthetic fixtures.

A feature pack is a directory holding ``manifest.json`` plus one raw tensor
file per image.  Tensor files are 32-bit little-endian floats in (row, col,
channel) order, so a pack round-trips bit-exactly between writers and
readers regardless of language.  All in-memory computation downstream is
done in float64; float32 is a storage format only.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"

# 8-bit threshold used to binarize ground-truth PNGs.
MASK_BINARIZE_THRESHOLD = 128


class PackFormatError(ValueError):
    """Raised when a feature pack on disk violates the format contract."""


@dataclass(frozen=True)
class PatchFeatureGrid:
    """One image's grid of patch descriptors plus its pixel geometry.

    ``features`` has shape (grid_rows * grid_cols, feature_dim), row-major
    over the grid: the patch at (row r, col c) is row ``r * grid_cols + c``.
    """

    image_id: str
    grid_rows: int
    grid_cols: int
    feature_dim: int
    patch_size_px: int
    image_height_px: int
    image_width_px: int
    features: np.ndarray

    def __post_init__(self):
        for name in ("grid_rows", "grid_cols", "feature_dim", "patch_size_px",
                     "image_height_px", "image_width_px"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.grid_rows * self.patch_size_px != self.image_height_px:
            raise PackFormatError(
                f"{self.image_id}: grid_rows * patch_size_px = "
                f"{self.grid_rows * self.patch_size_px} != image_height_px "
                f"{self.image_height_px}")
        if self.grid_cols * self.patch_size_px != self.image_width_px:
            raise PackFormatError(
                f"{self.image_id}: grid_cols * patch_size_px = "
                f"{self.grid_cols * self.patch_size_px} != image_width_px "
                f"{self.image_width_px}")
        feats = np.asarray(self.features)
        if feats.shape != (self.grid_rows * self.grid_cols, self.feature_dim):
            raise PackFormatError(
                f"{self.image_id}: features shape {feats.shape} does not match "
                f"({self.grid_rows * self.grid_cols}, {self.feature_dim})")
        if not np.all(np.isfinite(feats)):
            raise PackFormatError(f"{self.image_id}: features contain non-finite values")
        object.__setattr__(self, "features", feats)

    @property
    def n_patches(self) -> int:
        return self.grid_rows * self.grid_cols

    def feature_image(self) -> np.ndarray:
        """Features reshaped to (grid_rows, grid_cols, feature_dim)."""
        return self.features.reshape(self.grid_rows, self.grid_cols, self.feature_dim)


@dataclass(frozen=True)
class ClassFeatureSet:
    """Ordered collection of feature grids for one object class."""

    class_id: str
    grids: tuple[PatchFeatureGrid, ...]
    source_model_tag: str = "unknown"

    def __post_init__(self):
        grids = tuple(self.grids)
        if not grids:
            raise ValueError("ClassFeatureSet must contain at least one grid")
        dims = {g.feature_dim for g in grids}
        if len(dims) > 1:
            raise PackFormatError(f"grids disagree on feature_dim: {sorted(dims)}")
        ids = [g.image_id for g in grids]
        if len(set(ids)) != len(ids):
            raise PackFormatError("duplicate image_id within class feature set")
        object.__setattr__(self, "grids", grids)

    @property
    def feature_dim(self) -> int:
        return self.grids[0].feature_dim

    @property
    def image_ids(self) -> list[str]:
        return [g.image_id for g in self.grids]

    def grid_for(self, image_id: str) -> PatchFeatureGrid:
        for g in self.grids:
            if g.image_id == image_id:
                return g
        raise KeyError(image_id)


@dataclass(frozen=True)
class RgbImage:
    """8-bit RGB image with shape (height, width, 3)."""

    image_id: str
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] <= 0 or px.shape[1] <= 0:
            raise ValueError(f"{self.image_id}: expected (H, W, 3) pixels, got {px.shape}")
        object.__setattr__(self, "pixels", px.astype(np.uint8, copy=False))

    @property
    def height_px(self) -> int:
        return self.pixels.shape[0]

    @property
    def width_px(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class GroundTruthMask:
    """Binary reference mask at any resolution."""

    image_id: str
    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise ValueError(f"{self.image_id}: mask must be 2-D, got shape {m.shape}")
        object.__setattr__(self, "mask", m.astype(bool, copy=False))


def _tensor_filename(index: int) -> str:
    return f"tensor_{index:04d}.f32"


def write_feature_pack(feature_set: ClassFeatureSet, path: str) -> None:
    """Write a class feature set to ``path`` as manifest plus raw tensors.

    Rewriting the same set produces identical bytes; tensor files are named
    by manifest position so the layout is deterministic.
    """
    os.makedirs(path, exist_ok=True)
    entries = []
    for i, grid in enumerate(feature_set.grids):
        tensor_file = _tensor_filename(i)
        data = np.ascontiguousarray(
            grid.features.reshape(grid.grid_rows, grid.grid_cols, grid.feature_dim),
            dtype="<f4")
        with open(os.path.join(path, tensor_file), "wb") as f:
            f.write(data.tobytes())
        entries.append({
            "image_id": grid.image_id,
            "grid_rows": grid.grid_rows,
            "grid_cols": grid.grid_cols,
            "feature_dim": grid.feature_dim,
            "patch_size_px": grid.patch_size_px,
            "image_height_px": grid.image_height_px,
            "image_width_px": grid.image_width_px,
            "tensor_file": tensor_file,
        })
    manifest = {
        "format_version": FORMAT_VERSION,
        "class_id": feature_set.class_id,
        "source_model_tag": feature_set.source_model_tag,
        "images": entries,
    }
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def read_feature_pack(path: str) -> ClassFeatureSet:
    """Load and validate a feature pack directory.

    Raises PackFormatError on missing manifest, size mismatches, geometry
    inconsistencies, or non-finite tensor values.
    """
    manifest_path = os.path.join(path, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise PackFormatError(f"missing {MANIFEST_NAME} in {path}")
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise PackFormatError(f"unsupported format_version {version!r}")

    grids = []
    for entry in manifest.get("images", []):
        rows, cols, dim = entry["grid_rows"], entry["grid_cols"], entry["feature_dim"]
        tensor_path = os.path.join(path, entry["tensor_file"])
        if not os.path.isfile(tensor_path):
            raise PackFormatError(f"missing tensor file {entry['tensor_file']}")
        expected_bytes = rows * cols * dim * 4
        with open(tensor_path, "rb") as f:
            raw = f.read()
        if len(raw) != expected_bytes:
            raise PackFormatError(
                f"{entry['tensor_file']}: expected {expected_bytes} bytes, "
                f"found {len(raw)}")
        feats = np.frombuffer(raw, dtype="<f4").reshape(rows * cols, dim)
        grids.append(PatchFeatureGrid(
            image_id=entry["image_id"],
            grid_rows=rows,
            grid_cols=cols,
            feature_dim=dim,
            patch_size_px=entry["patch_size_px"],
            image_height_px=entry["image_height_px"],
            image_width_px=entry["image_width_px"],
            features=feats,
        ))
    return ClassFeatureSet(
        class_id=manifest["class_id"],
        grids=tuple(grids),
        source_model_tag=manifest.get("source_model_tag", "unknown"),
    )


def pack_digest(path: str) -> str:
    """SHA-256 over the manifest and tensors, for reproducibility manifests."""
    h = hashlib.sha256()
    manifest_path = os.path.join(path, MANIFEST_NAME)
    with open(manifest_path, "rb") as f:
        h.update(f.read())
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    for entry in manifest.get("images", []):
        with open(os.path.join(path, entry["tensor_file"]), "rb") as f:
            h.update(f.read())
    return h.hexdigest()


def make_synthetic_class(
    n_images: int,
    grid: tuple[int, int],
    d: int,
    fg_rect,
    separation: float,
    noise: float,
    seed: int,
    class_id: str = "synthetic",
    patch_size_px: int = 8,
) -> tuple[ClassFeatureSet, list[GroundTruthMask]]:
    """Generate a planted-foreground feature set with patch-level ground truth.

    Foreground patches are drawn from N(m_f, noise^2 I) and background from
    N(m_b, noise^2 I) with ||m_f - m_b|| = separation.  The two means are
    placed symmetrically about the origin along a random unit direction so
    that cosine affinities separate the groups as well as projections do.

    ``fg_rect`` is (row0, col0, height, width) on the patch grid, either one
    rectangle shared by all images or a sequence of per-image rectangles.
    Deterministic for a fixed seed.
    """
    h, w = grid
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    if separation <= 0:
        raise ValueError("separation must be positive")
    rects = list(fg_rect) if _is_rect_sequence(fg_rect) else [tuple(fg_rect)] * n_images
    if len(rects) != n_images:
        raise ValueError(f"got {len(rects)} rectangles for {n_images} images")
    for r0, c0, rh, rw in rects:
        if rh <= 0 or rw <= 0:
            raise ValueError("foreground rectangle is empty")
        if r0 < 0 or c0 < 0 or r0 + rh > h or c0 + rw > w:
            raise ValueError(f"rectangle {(r0, c0, rh, rw)} exceeds grid {grid}")

    rng = np.random.default_rng(seed)
    direction = rng.normal(size=d)
    direction /= np.linalg.norm(direction)
    m_fg = 0.5 * separation * direction
    m_bg = -0.5 * separation * direction

    grids = []
    gt_masks = []
    for i in range(n_images):
        r0, c0, rh, rw = rects[i]
        fg = np.zeros((h, w), dtype=bool)
        fg[r0:r0 + rh, c0:c0 + rw] = True
        feats = np.where(fg.reshape(-1, 1), m_fg, m_bg)
        if noise > 0:
            feats = feats + noise * rng.normal(size=(h * w, d))
        image_id = f"{class_id}_{i:03d}"
        grids.append(PatchFeatureGrid(
            image_id=image_id,
            grid_rows=h,
            grid_cols=w,
            feature_dim=d,
            patch_size_px=patch_size_px,
            image_height_px=h * patch_size_px,
            image_width_px=w * patch_size_px,
            features=feats.astype(np.float32),
        ))
        gt_masks.append(GroundTruthMask(image_id=image_id, mask=fg))
    feature_set = ClassFeatureSet(
        class_id=class_id, grids=tuple(grids),
        source_model_tag=f"synthetic-seed{seed}")
    return feature_set, gt_masks


def _is_rect_sequence(fg_rect) -> bool:
    try:
        first = fg_rect[0]
    except (TypeError, IndexError):
        return False
    return hasattr(first, "__len__")


def render_synthetic_images(
    gt_masks: list[GroundTruthMask],
    patch_size_px: int,
    seed: int,
    fg_color=(200, 60, 40),
    bg_color=(40, 120, 200),
    noise_level: int = 10,
) -> list[RgbImage]:
    """Two-color RGB renderings of patch-level masks, for refinement tests.

    Foreground/background pixels get the respective base color plus uniform
    noise in [-noise_level, noise_level], clipped to 8 bits.
    """
    rng = np.random.default_rng(seed)
    images = []
    for gt in gt_masks:
        fg = np.repeat(np.repeat(gt.mask, patch_size_px, axis=0),
                       patch_size_px, axis=1)
        base = np.where(fg[:, :, None], np.array(fg_color, dtype=np.int16),
                        np.array(bg_color, dtype=np.int16))
        if noise_level > 0:
            base = base + rng.integers(-noise_level, noise_level + 1,
                                       size=base.shape, dtype=np.int16)
        pixels = np.clip(base, 0, 255).astype(np.uint8)
        images.append(RgbImage(image_id=gt.image_id, pixels=pixels))
    return images


def load_rgb_image(path: str, image_id: str | None = None) -> RgbImage:
    with Image.open(path) as im:
        pixels = np.asarray(im.convert("RGB"))
    if image_id is None:
        image_id = os.path.splitext(os.path.basename(path))[0]
    return RgbImage(image_id=image_id, pixels=pixels)


def load_mask(path: str, image_id: str | None = None) -> GroundTruthMask:
    """Read a ground-truth PNG, binarizing at 128 on the 8-bit scale."""
    with Image.open(path) as im:
        gray = np.asarray(im.convert("L"))
    if image_id is None:
        image_id = os.path.splitext(os.path.basename(path))[0]
    return GroundTruthMask(image_id=image_id, mask=gray >= MASK_BINARIZE_THRESHOLD)


def save_mask_png(mask: np.ndarray, path: str) -> None:
    """Write a boolean mask as an 8-bit PNG with values {0, 255}."""
    arr = (np.asarray(mask, dtype=bool).astype(np.uint8)) * 255
    Image.fromarray(arr, mode="L").save(path)


def save_gray_png(values: np.ndarray, path: str) -> None:
    """Write a real grid as 8-bit grayscale, min-max scaled to 0-255.

    A constant grid maps to 0.
    """
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi > lo:
        scaled = (v - lo) / (hi - lo)
    else:
        scaled = np.zeros_like(v)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(path)


def resize_map(values: np.ndarray, shape: tuple[int, int], method: str) -> np.ndarray:
    """Resize a 2-D real or boolean grid to (rows, cols).

    method: "nearest" for binary data, "bilinear" for soft maps.
    """
    rows, cols = shape
    v = np.asarray(values)
    if v.shape == (rows, cols):
        return v
    resample = {"nearest": Image.NEAREST, "bilinear": Image.BILINEAR}[method]
    if v.dtype == bool:
        out = Image.fromarray(v.astype(np.float32), mode="F").resize(
            (cols, rows), resample)
        return np.asarray(out) >= 0.5
    out = Image.fromarray(v.astype(np.float32), mode="F").resize((cols, rows), resample)
    return np.asarray(out, dtype=np.float64)
