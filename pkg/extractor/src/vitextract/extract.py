"""Patch-descriptor extraction from pretrained Vision Transformers.

Images are resized to the working resolution, run through the backbone, and
the Keys of the last self-attention layer are captured per patch token (the
class token is dropped).  The token grid is written out as a feature pack.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from .packwriter import GridEntry, PackWriter

logger = logging.getLogger(__name__)

# Known backbones: self-supervised ViT-S/8 for intra-image affinity features,
# supervised-classification ViT-S/16 for inter-image class relevance.
BACKBONES = {
    "dino-s8": "facebook/dino-vits8",
    "imagenet-s16": "WinKawaks/vit-small-patch16-224",
}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


class WeightLoadError(RuntimeError):
    """Pretrained weights could not be obtained."""


@dataclass
class ExtractionSpec:
    image_dir: str
    backbone: str
    out_path: str
    resize: int = 256
    device: str = "cpu"
    weights: str | None = None  # local path or hub id overriding the registry
    class_id: str | None = None
    batch_size: int = 8

    def weights_source(self) -> str:
        if self.weights is not None:
            return self.weights
        if self.backbone not in BACKBONES:
            raise ValueError(
                f"unknown backbone {self.backbone!r}; expected one of "
                f"{sorted(BACKBONES)} or an explicit --weights source")
        return BACKBONES[self.backbone]


def load_backbone(source: str, device: str = "cpu"):
    """ViT backbone in deterministic eval mode, or WeightLoadError."""
    from transformers import ViTModel

    try:
        model = ViTModel.from_pretrained(source, add_pooling_layer=False)
    except Exception as exc:
        raise WeightLoadError(f"could not load weights from {source!r}: {exc}") from exc
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model.to(device)


def key_projection(model) -> torch.nn.Module:
    """The last attention block's Key projection, across transformers layouts."""
    if hasattr(model, "layers"):
        attention = model.layers[-1].attention
    else:
        attention = model.encoder.layer[-1].attention
    if hasattr(attention, "k_proj"):
        return attention.k_proj
    return attention.attention.key


def preprocess(image: Image.Image, resize: int) -> torch.Tensor:
    """Bilinear resize to (resize, resize), scale to [0,1], normalize."""
    rgb = image.convert("RGB").resize((resize, resize), Image.BILINEAR)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - np.array(IMAGENET_MEAN, dtype=np.float32)) / np.array(
        IMAGENET_STD, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1))


class KeyExtractor:
    """Captures last-layer Keys for batches of preprocessed images."""

    def __init__(self, model, device: str = "cpu"):
        self.model = model
        self.device = device
        self.patch_size = int(model.config.patch_size)
        self.feature_dim = int(model.config.hidden_size)
        self._captured: list[torch.Tensor] = []
        key_projection(model).register_forward_hook(self._hook)

    def _hook(self, module, inputs, output):
        self._captured.append(output.detach())

    def extract_batch(self, pixel_batch: torch.Tensor) -> np.ndarray:
        """(B, 3, H, W) -> (B, h, w, d) Keys with the class token dropped."""
        height, width = pixel_batch.shape[-2:]
        if height % self.patch_size or width % self.patch_size:
            raise ValueError(
                f"input {height}x{width} not divisible by patch size "
                f"{self.patch_size}")
        rows, cols = height // self.patch_size, width // self.patch_size
        self._captured.clear()
        with torch.no_grad():
            self.model(pixel_batch.to(self.device),
                       interpolate_pos_encoding=True)
        keys = self._captured[-1]
        if keys.shape[1] != rows * cols + 1:
            raise RuntimeError(
                f"expected {rows * cols + 1} tokens, captured {keys.shape[1]}")
        patch_keys = keys[:, 1:, :]  # drop the class token
        return (patch_keys.reshape(-1, rows, cols, self.feature_dim)
                .cpu().numpy().astype(np.float32))


def list_images(image_dir: str) -> list[str]:
    names = [n for n in sorted(os.listdir(image_dir))
             if n.lower().endswith(IMAGE_EXTENSIONS)]
    return [os.path.join(image_dir, n) for n in names]


def extract(spec: ExtractionSpec) -> str:
    """Run the backbone over an image folder and write the feature pack.

    Returns the manifest path.  Undecodable images are skipped with a log
    message; unloadable weights raise WeightLoadError.
    """
    if spec.resize <= 0:
        raise ValueError("resize must be positive")
    source = spec.weights_source()
    model = load_backbone(source, spec.device)
    extractor = KeyExtractor(model, spec.device)
    if spec.resize % extractor.patch_size:
        raise ValueError(
            f"resize {spec.resize} not divisible by the backbone's patch size "
            f"{extractor.patch_size}")

    paths = list_images(spec.image_dir)
    if not paths:
        raise ValueError(f"no images found in {spec.image_dir}")
    class_id = spec.class_id or os.path.basename(os.path.normpath(spec.image_dir))
    tag = f"{spec.backbone}:{source}"
    writer = PackWriter(spec.out_path, class_id=class_id, source_model_tag=tag)

    batch_paths: list[str] = []
    batch_tensors: list[torch.Tensor] = []

    def flush():
        if not batch_tensors:
            return
        features = extractor.extract_batch(torch.stack(batch_tensors))
        for path, grid in zip(batch_paths, features):
            image_id = os.path.splitext(os.path.basename(path))[0]
            writer.add(GridEntry(
                image_id=image_id,
                grid_rows=grid.shape[0],
                grid_cols=grid.shape[1],
                feature_dim=grid.shape[2],
                patch_size_px=extractor.patch_size,
                image_height_px=spec.resize,
                image_width_px=spec.resize,
                features=grid,
            ))
        batch_paths.clear()
        batch_tensors.clear()

    for path in paths:
        try:
            with Image.open(path) as im:
                tensor = preprocess(im, spec.resize)
        except Exception as exc:
            logger.warning("skipping undecodable image %s: %s", path, exc)
            continue
        batch_paths.append(path)
        batch_tensors.append(tensor)
        if len(batch_tensors) >= spec.batch_size:
            flush()
    flush()
    if not writer.entries:
        raise ValueError("no image could be decoded")
    return writer.finish()
