"""Consensus ground truth, curation scores and mAP evaluation for crowd-annotated bounding boxes."""

__version__ = "0.1.0"

from .core import (
    Action,
    Annotation,
    AnnotationEvent,
    AnnotatorProfile,
    BBox,
    BoxCluster,
    ClassTaxonomy,
    ClusterOrigin,
    ConsensusBox,
    ImageRecord,
    ReliabilityModel,
    ScoreCard,
    ScoringConfig,
)
from .ingest import Dataset, FormatError, parse_coco, parse_event_log, validate_dataset, write_coco, write_event_log
from .correspondence import average_geometry, group_events, resolve_retention
from .consensus import build_consensus_dataset, estimate_reliability, majority_vote, staple_consensus
from .curation import (
    difficulty_score,
    disagreement_score,
    mean_pairwise_iou,
    normalize_disagreement,
    select_images,
    stratified_split,
)
from .evaluation import average_precision, consolidate_to_coco, iou, map_metrics, match_detections
from .simulator import SimConfig, generate_truth, simulate_campaign

__all__ = [
    "Action",
    "Annotation",
    "AnnotationEvent",
    "AnnotatorProfile",
    "BBox",
    "BoxCluster",
    "ClassTaxonomy",
    "ClusterOrigin",
    "ConsensusBox",
    "ImageRecord",
    "ReliabilityModel",
    "ScoreCard",
    "ScoringConfig",
    "Dataset",
    "FormatError",
    "parse_coco",
    "parse_event_log",
    "validate_dataset",
    "write_coco",
    "write_event_log",
    "average_geometry",
    "group_events",
    "resolve_retention",
    "build_consensus_dataset",
    "estimate_reliability",
    "majority_vote",
    "staple_consensus",
    "difficulty_score",
    "disagreement_score",
    "mean_pairwise_iou",
    "normalize_disagreement",
    "select_images",
    "stratified_split",
    "average_precision",
    "consolidate_to_coco",
    "iou",
    "map_metrics",
    "match_detections",
    "SimConfig",
    "generate_truth",
    "simulate_campaign",
]
