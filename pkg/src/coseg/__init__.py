"""Co-segmentation of image sets sharing a common object class.

Combines an inter-image class-relevance model over patch descriptors with a
relevance-seeded normalized-cut segmentation per image, refined to pixel
masks by iterative color-model graph cuts, plus the standard co-saliency
evaluation measures.
"""

from .packio import (
    ClassFeatureSet,
    GroundTruthMask,
    PatchFeatureGrid,
    RgbImage,
    make_synthetic_class,
    read_feature_pack,
    write_feature_pack,
)
from .relevance import (
    RelevanceMap,
    RelevanceModel,
    SeedVector,
    build_seed,
    erode_support,
    fit_relevance_model,
    relevance_map,
    seed_from_relevance,
)
from .spectral import (
    AffinityGraph,
    CoarseMask,
    EigenBasis,
    biased_ncut_mask,
    build_affinity,
    ncut_mask,
    solve_generalized,
)
from .grabcut import PixelMask, Trimap, refine, upscale_mask
from .metrics import (
    MetricReport,
    SaliencyPrediction,
    aggregate,
    f_beta_max,
    jaccard,
    mae,
    precision,
    s_measure,
)
from .pipeline import ClassJob, PipelineConfig, evaluate, mask_edgemap, run_class

__version__ = "0.1.0"
