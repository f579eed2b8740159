"""Writer for the feature-pack interchange format.

One directory per class: ``manifest.json`` plus one raw tensor file per
image, 32-bit little-endian floats in (row, col, channel) order.  This
mirrors the consumer's documented layout; the two sides share only the
format, not code.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

FORMAT_VERSION = 1


@dataclass
class GridEntry:
    image_id: str
    grid_rows: int
    grid_cols: int
    feature_dim: int
    patch_size_px: int
    image_height_px: int
    image_width_px: int
    features: np.ndarray  # (grid_rows, grid_cols, feature_dim)


class PackWriter:
    def __init__(self, path: str, class_id: str, source_model_tag: str):
        self.path = path
        self.class_id = class_id
        self.source_model_tag = source_model_tag
        self.entries: list[dict] = []
        os.makedirs(path, exist_ok=True)

    def add(self, entry: GridEntry) -> None:
        expected = (entry.grid_rows, entry.grid_cols, entry.feature_dim)
        if entry.features.shape != expected:
            raise ValueError(f"features shape {entry.features.shape} != {expected}")
        if entry.grid_rows * entry.patch_size_px != entry.image_height_px:
            raise ValueError(f"{entry.image_id}: grid does not tile the image height")
        if entry.grid_cols * entry.patch_size_px != entry.image_width_px:
            raise ValueError(f"{entry.image_id}: grid does not tile the image width")
        if not np.all(np.isfinite(entry.features)):
            raise ValueError(f"{entry.image_id}: non-finite features")
        tensor_file = f"tensor_{len(self.entries):04d}.f32"
        data = np.ascontiguousarray(entry.features, dtype="<f4")
        with open(os.path.join(self.path, tensor_file), "wb") as f:
            f.write(data.tobytes())
        self.entries.append({
            "image_id": entry.image_id,
            "grid_rows": entry.grid_rows,
            "grid_cols": entry.grid_cols,
            "feature_dim": entry.feature_dim,
            "patch_size_px": entry.patch_size_px,
            "image_height_px": entry.image_height_px,
            "image_width_px": entry.image_width_px,
            "tensor_file": tensor_file,
        })

    def finish(self) -> str:
        manifest = {
            "format_version": FORMAT_VERSION,
            "class_id": self.class_id,
            "source_model_tag": self.source_model_tag,
            "images": self.entries,
        }
        manifest_path = os.path.join(self.path, "manifest.json")
        with open(manifest_path, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
        return manifest_path
