"""Open-vocabulary detection toolkit.

A desk-scale, fully deterministic implementation of the mechanisms behind
prompt-based object detection: text-embedding vocabularies, vision-language
feature fusion, a contrastive detection head, task-aligned training losses,
deployment-time re-parameterization with machine-checkable equivalence, and
a pseudo-labeling pipeline for caption datasets.
"""

from .assign import Assignment, GroundTruth, RegionTextAnnotation, task_aligned_assign
from .autolabel import (
    CaptionSample,
    FixtureDetector,
    FixtureScorer,
    PipelineConfig,
    RegionProposal,
    ToyCosineScorer,
    extract_nouns,
    image_filter,
    propose_regions,
    region_filter,
    relabel_choice,
    rescore,
    run_pipeline,
)
from .errors import (
    DegenerateInputError,
    DimensionError,
    InputError,
    LoadError,
    NonFiniteError,
    OvdetError,
    PipelineError,
)
from .fusion import (
    FeaturePyramid,
    FusionParams,
    image_pooling_attention,
    max_sigmoid_attention,
    pool_image_tokens,
    repvlpan_forward,
    t_csplayer,
    toy_backbone,
)
from .gradcheck import grad_check, run_grad_checks, sample_inputs
from .head import (
    HeadOutput,
    HeadParams,
    SimilarityMatrix,
    box_iou,
    contrastive_similarity,
    decode_boxes,
    detect,
    head_forward,
    nms,
)
from .losses import LossBreakdown, contrastive_loss, dfl_loss, iou_loss, total_loss
from .reparam import (
    EquivalenceReport,
    ReparamBundle,
    build_bundle,
    fold_tcsp,
    pool_tokens,
    reparam_tcsp_forward,
    reparam_text_update,
    unfold_tcsp,
    verify_equivalence,
)
from .textembed import (
    TextEmbeddings,
    Vocabulary,
    bake_offline_vocabulary,
    build_online_vocabulary,
    load_embeddings,
    toy_encode,
)

__version__ = "0.1.0"

__all__ = [
    "Assignment",
    "CaptionSample",
    "DegenerateInputError",
    "DimensionError",
    "EquivalenceReport",
    "FeaturePyramid",
    "FixtureDetector",
    "FixtureScorer",
    "FusionParams",
    "GroundTruth",
    "HeadOutput",
    "HeadParams",
    "InputError",
    "LoadError",
    "LossBreakdown",
    "NonFiniteError",
    "OvdetError",
    "PipelineConfig",
    "PipelineError",
    "RegionProposal",
    "RegionTextAnnotation",
    "ReparamBundle",
    "SimilarityMatrix",
    "TextEmbeddings",
    "ToyCosineScorer",
    "Vocabulary",
    "bake_offline_vocabulary",
    "box_iou",
    "build_bundle",
    "build_online_vocabulary",
    "contrastive_loss",
    "contrastive_similarity",
    "decode_boxes",
    "detect",
    "dfl_loss",
    "extract_nouns",
    "fold_tcsp",
    "grad_check",
    "head_forward",
    "image_filter",
    "image_pooling_attention",
    "iou_loss",
    "load_embeddings",
    "max_sigmoid_attention",
    "nms",
    "pool_image_tokens",
    "pool_tokens",
    "propose_regions",
    "region_filter",
    "relabel_choice",
    "reparam_tcsp_forward",
    "reparam_text_update",
    "rescore",
    "run_grad_checks",
    "run_pipeline",
    "sample_inputs",
    "t_csplayer",
    "task_aligned_assign",
    "total_loss",
    "toy_backbone",
    "toy_encode",
    "unfold_tcsp",
    "verify_equivalence",
]
