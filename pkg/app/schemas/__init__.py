from .attack import AttackConfig, AttackMethod, AttackResult, EnsembleMode, EvasionMode, PerturbationBudget
from .base import ErrorResponseDto, HealthDto
from .defense import (
    AugmentationKind,
    AugmentationSpec,
    ConsistencyScore,
    DetectionResult,
    JpegConfig,
    RocCurve,
)
from .encode import EncodeRequestDto, EncodeResponseDto, ServiceStatsDto
from .encoder import EncoderCheckpoint, Layer, TrainingMetadata
from .manifest import RunManifest
from .report import EvalReport, GroupAggregate, ReportAggregates, ReportRow
from .sample import Modality, PairedDataset, Provenance, Sample

__all__ = [
    # Attack
    "AttackConfig",
    "AttackMethod",
    "AttackResult",
    "EnsembleMode",
    "EvasionMode",
    "PerturbationBudget",
    # Base
    "ErrorResponseDto",
    "HealthDto",
    # Defense
    "AugmentationKind",
    "AugmentationSpec",
    "ConsistencyScore",
    "DetectionResult",
    "JpegConfig",
    "RocCurve",
    # Service
    "EncodeRequestDto",
    "EncodeResponseDto",
    "ServiceStatsDto",
    # Encoder
    "EncoderCheckpoint",
    "Layer",
    "TrainingMetadata",
    # Manifest
    "RunManifest",
    # Report
    "EvalReport",
    "GroupAggregate",
    "ReportAggregates",
    "ReportRow",
    # Sample
    "Modality",
    "PairedDataset",
    "Provenance",
    "Sample",
]
