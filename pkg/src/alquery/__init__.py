"""alquery: detector-agnostic active-learning query selection.

Two-stage batch selection over object-detection dumps: difficulty-
calibrated uncertainty scoring picks an expanded candidate pool, then
k-center-seeded medoid kmeans on a category-conditioned matching
similarity picks the queries. Ships baselines, a synthetic closed-loop
benchmark, and brute-force oracles for verification.
"""

from ._kernels import backend as kernel_backend
from .config import EngineConfig
from .difficulty import (
    DifficultyCoefficients,
    DifficultyState,
    difficulty_coefficients,
    iou,
    object_difficulty,
    update_difficulties,
)
from .records import (
    DetectedObject,
    DetectionRecord,
    IngestError,
    MatchEvent,
    RoundState,
    advance_round,
    ingest_detections,
    load_round_state,
    read_match_events,
    save_round_state,
    write_detections,
    write_match_events,
)
from .sampler import (
    Provenance,
    QuerySet,
    baseline_select,
    k_center_greedy,
    kmeans_pp_similarity,
    ppal_select,
    two_stage_select,
)
from .similarity import (
    SimilarityMatrix,
    ccms,
    ccms_directed,
    global_similarity,
    kl_similarity,
    similarity_matrix,
)
from .simharness import (
    BenchConfig,
    BenchReport,
    SyntheticWorld,
    WorldConfig,
    brute_force_min_max_subset,
    build_world,
    jaccard,
    retrieval_correlation,
    run_al_benchmark,
    simulate_detector,
)
from .uncertainty import (
    UncertaintyReport,
    image_uncertainty,
    object_uncertainty,
    score_images,
    select_candidate_pool,
)

__version__ = "0.1.0"

__all__ = [
    "BenchConfig",
    "BenchReport",
    "DetectedObject",
    "DetectionRecord",
    "DifficultyCoefficients",
    "DifficultyState",
    "EngineConfig",
    "IngestError",
    "MatchEvent",
    "Provenance",
    "QuerySet",
    "RoundState",
    "SimilarityMatrix",
    "SyntheticWorld",
    "UncertaintyReport",
    "WorldConfig",
    "advance_round",
    "baseline_select",
    "brute_force_min_max_subset",
    "build_world",
    "ccms",
    "ccms_directed",
    "difficulty_coefficients",
    "global_similarity",
    "image_uncertainty",
    "ingest_detections",
    "iou",
    "jaccard",
    "k_center_greedy",
    "kernel_backend",
    "kl_similarity",
    "kmeans_pp_similarity",
    "load_round_state",
    "object_difficulty",
    "object_uncertainty",
    "ppal_select",
    "read_match_events",
    "retrieval_correlation",
    "run_al_benchmark",
    "save_round_state",
    "score_images",
    "select_candidate_pool",
    "similarity_matrix",
    "simulate_detector",
    "two_stage_select",
    "update_difficulties",
    "write_detections",
    "write_match_events",
]
