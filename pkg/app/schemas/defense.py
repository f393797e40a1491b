from enum import Enum
from typing import Dict, List

from pydantic import BaseModel, ConfigDict, Field

DEFAULT_JPEG_QUALITY = 75


class JpegConfig(BaseModel):
    """``differentiable`` swaps rounding for round(x) + (x - round(x))**3."""
    model_config = ConfigDict(frozen=True)

    quality: int = Field(DEFAULT_JPEG_QUALITY, ge=1, le=100)
    differentiable: bool = True
    rounding_sharpness: str = "cubic"


class AugmentationKind(str, Enum):
    JPEG = "JPEG"
    GAUSSIAN_BLUR = "GAUSSIAN_BLUR"
    RANDOM_AFFINE = "RANDOM_AFFINE"
    COLOR_JITTER = "COLOR_JITTER"
    HORIZONTAL_FLIP = "HORIZONTAL_FLIP"
    RANDOM_PERSPECTIVE = "RANDOM_PERSPECTIVE"


class AugmentationSpec(BaseModel):
    """
    One image augmentation. ``params`` overrides the documented defaults:

    - GAUSSIAN_BLUR: sigma_min 0.5, sigma_max 1.0 (or a fixed ``sigma``)
    - RANDOM_AFFINE: degrees 10, translate 0.1 (fraction of the side)
    - COLOR_JITTER: brightness 0.2, contrast 0.2
    - RANDOM_PERSPECTIVE: distortion 0.3
    - JPEG: quality_min 60, quality_max 90 (or a fixed ``quality``)
    - HORIZONTAL_FLIP: no parameters

    The concrete transform is drawn from ``seed``.
    """
    model_config = ConfigDict(frozen=True)

    kind: AugmentationKind
    params: Dict[str, float] = Field(default_factory=dict)
    seed: int = 0


class ConsistencyScore(BaseModel):
    kinds: List[AugmentationKind]
    per_augmentation: List[float]
    mean: float


class DetectionResult(BaseModel):
    flagged: bool
    score: float
    threshold: float


class RocCurve(BaseModel):
    fpr: List[float]
    tpr: List[float]
    thresholds: List[float]
    auc: float
