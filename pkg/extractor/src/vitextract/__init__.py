"""Feature-pack extraction from pretrained Vision Transformers."""

from .extract import BACKBONES, ExtractionSpec, KeyExtractor, extract, load_backbone
from .packwriter import GridEntry, PackWriter

__version__ = "0.1.0"
