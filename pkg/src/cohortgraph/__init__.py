"""Admission-similarity graphs and GraphSAGE for 30-day readmission
prediction, runnable end to end on synthetic MIMIC-shaped data."""

__version__ = "0.1.0"

from .datagen import GenConfig, RawTables, generate, read_tables, write_tables
from .evalstat import (
    FoldPlan,
    SplitSpec,
    auroc,
    balanced_accuracy,
    compare_models,
    make_folds,
    make_splits,
    shapiro_wilk,
    t_test,
)
from .featurize import (
    Embedder,
    FeatureBlock,
    HashEmbedder,
    NodeFeatureMatrix,
    ScalerSet,
    apply_scalers,
    assemble,
    embed_code_set,
    embed_note,
    encode_admissions,
    encode_labevents,
    fit_scalers,
    select_codes,
)
from .ingest import (
    AdmissionRecord,
    Cohort,
    build_cohort,
    derive_temporal,
    label_readmissions,
    prepare_cohort,
)
from .models import (
    SageConfig,
    SageModel,
    TrainResult,
    build_sage,
    grid_search,
    train,
    train_logreg,
    train_mlp,
)
from .neuro import Parameter, Tensor, adam_step, aggregate, backward, weighted_bce
from .simgraph import (
    GraphStats,
    SimilarityGraph,
    graph_stats,
    load_graph,
    range_search,
    save_graph,
)

__all__ = [
    "GenConfig",
    "RawTables",
    "generate",
    "read_tables",
    "write_tables",
    "AdmissionRecord",
    "Cohort",
    "build_cohort",
    "derive_temporal",
    "label_readmissions",
    "prepare_cohort",
    "Embedder",
    "HashEmbedder",
    "FeatureBlock",
    "NodeFeatureMatrix",
    "ScalerSet",
    "encode_admissions",
    "encode_labevents",
    "select_codes",
    "embed_code_set",
    "embed_note",
    "assemble",
    "fit_scalers",
    "apply_scalers",
    "SimilarityGraph",
    "GraphStats",
    "range_search",
    "graph_stats",
    "save_graph",
    "load_graph",
    "Tensor",
    "Parameter",
    "aggregate",
    "weighted_bce",
    "backward",
    "adam_step",
    "SageConfig",
    "SageModel",
    "TrainResult",
    "build_sage",
    "train",
    "train_logreg",
    "train_mlp",
    "grid_search",
    "auroc",
    "balanced_accuracy",
    "SplitSpec",
    "FoldPlan",
    "make_splits",
    "make_folds",
    "shapiro_wilk",
    "t_test",
    "compare_models",
]
