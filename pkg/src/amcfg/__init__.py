"""Anchored multi-modal clustering and feature generation (AMCFG).

A library and CLI for popularity regression under temporal drift:
per-modality clustering, leakage-safe statistical anchors, LLM-backed
semantic anchors, feature fusion, L1 gradient boosting, and a group-aware
evaluation harness with a synthetic drift generator.
"""

__version__ = "0.1.0"

from .dataset_io import (  # noqa: F401
    Dataset,
    EmbeddingMatrix,
    Manifest,
    MetadataSchema,
    PostRecord,
    encode_metadata,
    load_dataset,
    read_embedding_matrix,
    read_metadata,
    write_embedding_matrix,
)
from .evaluate import (  # noqa: F401
    FoldPlan,
    MetricReport,
    PipelineConfig,
    evaluate_holdout,
    group_kfold,
    mae,
    mape,
    r2,
    run_ablation,
    run_pipeline,
    sweep_k,
)
from .synth import SynthSpec, generate_synthetic  # noqa: F401
