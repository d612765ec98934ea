"""Style identifiers for text-to-image diffusion.

Learns a multi-token style identifier from a handful of reference images:
keywords from a vision-language model seed the identifier embeddings, an
embedding-only stage refines them, and a joint stage fine-tunes the
attention blocks while a content-preservation term keeps object rendering
anchored to the frozen base model.
"""

from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .data import StyleCategoryManifest, load_manifest, make_toy_corpus, save_manifest
from .embedding import (
    EmbeddingInitRecord,
    FreezeMask,
    StyleIdentifierSpan,
    allocate_span,
    compute_keyword_embeddings,
    expand_identifier,
    register_and_initialize,
    stage1_freeze_mask,
    stage2_freeze_mask,
)
from .metrics import (
    ColorHistogram,
    MetricReport,
    MockEmbedder,
    build_report,
    clip_iqa_score,
    clip_r_precision,
    color_histogram,
    pixel_hist_score,
)
from .schedule import (
    LatentSample,
    NoiseSchedule,
    add_noise,
    build_schedule,
    content_loss,
    total_loss,
    weighted_reconstruction_loss,
)
from .style_reasoning import (
    MockVlmClient,
    StyleKeywords,
    extract_style_keywords,
    parse_keywords,
)
from .toy_ldm import ToyBackbone, ToyModelConfig, build_toy_backbone, sample
from .trainer import (
    TrainingConfig,
    TrainStepRecord,
    generate_content_references,
    run_full_pipeline,
    run_stage1,
    run_stage2,
)

__version__ = "0.1.0"
