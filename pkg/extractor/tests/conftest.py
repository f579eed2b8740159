import os

import numpy as np
import pytest
import torch
from PIL import Image

os.environ.setdefault("HF_HUB_OFFLINE", "1")
os.environ.setdefault("TRANSFORMERS_OFFLINE", "1")


def _make_tiny_vit(path, patch_size):
    from transformers import ViTConfig, ViTModel

    config = ViTConfig(hidden_size=32, num_hidden_layers=2,
                       num_attention_heads=4, intermediate_size=64,
                       image_size=64, patch_size=patch_size)
    torch.manual_seed(1234 + patch_size)
    model = ViTModel(config, add_pooling_layer=False)
    model.save_pretrained(path)
    return str(path)


@pytest.fixture(scope="session")
def tiny_vit_p8(tmp_path_factory):
    return _make_tiny_vit(tmp_path_factory.mktemp("vit_p8"), patch_size=8)


@pytest.fixture(scope="session")
def tiny_vit_p16(tmp_path_factory):
    return _make_tiny_vit(tmp_path_factory.mktemp("vit_p16"), patch_size=16)


@pytest.fixture(scope="session")
def sample_images(tmp_path_factory):
    """Ten images with a bright block on a dark textured background."""
    image_dir = tmp_path_factory.mktemp("images")
    rng = np.random.default_rng(42)
    for i in range(10):
        arr = rng.integers(10, 60, size=(96, 80, 3), dtype=np.int16)
        top = 8 + 6 * (i % 5)
        left = 6 + 5 * (i % 6)
        arr[top:top + 40, left:left + 36] = rng.integers(
            170, 250, size=(40, 36, 3), dtype=np.int16)
        Image.fromarray(arr.astype(np.uint8)).save(
            str(image_dir / f"sample_{i:02d}.png"))
    return str(image_dir)
