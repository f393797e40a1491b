from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.schemas.sample import MODALITY_RANGES, Modality, Sample

IMAGE_EPSILON = 16.0 / 255.0
AUDIO_EPSILON = 0.05

DEFAULT_ITERATIONS = {
    "WHITEBOX": 7500,
    "TRANSFER": 300,
    "HYBRID": 300,
    "RESISTANT": 200,
    "EVASION": 200,
}
DEFAULT_QUERY_LIMIT = 100_000
DEFAULT_CHECK_EVERY = 100
DEFAULT_EOT_SAMPLES = 4


class AttackMethod(str, Enum):
    WHITEBOX = "WHITEBOX"
    TRANSFER = "TRANSFER"
    QUERY = "QUERY"
    HYBRID = "HYBRID"
    RESISTANT = "RESISTANT"
    EVASION = "EVASION"


class EnsembleMode(str, Enum):
    CYCLE = "cycle"
    SUM = "sum"


class EvasionMode(str, Enum):
    EOT = "eot"
    JPEG = "jpeg"


class PerturbationBudget(BaseModel):
    """L-infinity ball of radius epsilon, intersected with the value range."""
    model_config = ConfigDict(frozen=True)

    epsilon: float = Field(..., gt=0)
    clamp_lo: float = 0.0
    clamp_hi: float = 1.0
    norm: str = "linf"

    @model_validator(mode="after")
    def _check_range(self):
        if not self.clamp_lo < self.clamp_hi:
            raise ValueError(f"clamp_lo {self.clamp_lo} must be below clamp_hi {self.clamp_hi}")
        if self.norm != "linf":
            raise ValueError("only the linf norm is supported")
        return self

    @classmethod
    def for_modality(cls, modality: Modality, epsilon: Optional[float] = None) -> "PerturbationBudget":
        if modality not in MODALITY_RANGES:
            raise ValueError(f"{modality.value} samples cannot be perturbed")
        lo, hi = MODALITY_RANGES[modality]
        if epsilon is None:
            epsilon = IMAGE_EPSILON if modality == Modality.IMAGE else AUDIO_EPSILON
        return cls(epsilon=epsilon, clamp_lo=lo, clamp_hi=hi)


class AttackConfig(BaseModel):
    """
    Every knob of one attack run.

    ``iterations`` and ``step_size`` left unset resolve to the method
    default and epsilon/100. ``success_threshold`` stops gradient attacks
    once the alignment exceeds it (needs ``early_stop``).
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    method: AttackMethod = AttackMethod.WHITEBOX
    iterations: Optional[int] = Field(None, ge=0)
    step_size: Optional[float] = Field(None, gt=0)
    ensemble_weights: Optional[List[float]] = None
    ensemble_mode: EnsembleMode = EnsembleMode.CYCLE
    non_targets: List[Sample] = Field(default_factory=list)
    query_limit: int = Field(DEFAULT_QUERY_LIMIT, ge=0)
    early_stop: bool = True
    success_threshold: Optional[float] = None
    check_every: int = Field(DEFAULT_CHECK_EVERY, ge=1)
    seed: int = 0
    literal_objective: bool = False
    random_start: bool = False
    exclude_true_label: bool = False
    eot_samples: int = Field(DEFAULT_EOT_SAMPLES, ge=1)
    evasion_mode: EvasionMode = EvasionMode.EOT

    @field_validator("ensemble_weights")
    @classmethod
    def _check_weights(cls, value):
        if value is not None and any(w < 0 for w in value):
            raise ValueError("ensemble weights must be nonnegative")
        return value

    def resolved_iterations(self, method: Optional[AttackMethod] = None) -> int:
        if self.iterations is not None:
            return self.iterations
        return DEFAULT_ITERATIONS[(method or self.method).value]

    def resolved_step(self, budget: PerturbationBudget) -> float:
        return self.step_size if self.step_size is not None else budget.epsilon / 100.0


class AttackResult(BaseModel):
    """
    What an attack produced. ``delta`` and ``adversarial`` have the source
    payload's shape; ``trace`` holds one loss (gradient attacks) or the
    current best objective (query attacks) per iteration.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    method: AttackMethod
    modality: Modality
    epsilon: float
    seed: int
    delta: np.ndarray
    adversarial: np.ndarray
    final_alignment: Optional[float] = None
    trace: List[float] = Field(default_factory=list)
    surrogate_trace: List[Tuple[int, float]] = Field(default_factory=list)
    queries_used: int = 0
    setup_queries: int = 0
    accepted_moves: int = 0
    stopped_early: bool = False
    aborted: bool = False
    transfer_success: Optional[bool] = None
    success: Dict[str, bool] = Field(default_factory=dict)
    wall_time: float = 0.0

    def adversarial_sample(self, class_id: Optional[int] = None) -> Sample:
        return Sample(modality=self.modality, payload=self.adversarial, class_id=class_id)

    def persisted(self) -> dict:
        """Fields written to disk; wall time stays in memory and in the logs."""
        return self.model_dump(exclude={"delta", "adversarial", "wall_time"}, mode="json")
