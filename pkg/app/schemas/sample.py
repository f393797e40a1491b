from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.grad import Tensor

IMAGE_SHAPE = (3, 16, 16)
AUDIO_LENGTH = 256
TEXT_MAX_LENGTH = 8
VOCAB_SIZE = 64


class Modality(str, Enum):
    IMAGE = "IMAGE"
    AUDIO = "AUDIO"
    TEXT = "TEXT"


# Value range of continuous modalities; TEXT carries token ids.
MODALITY_RANGES = {
    Modality.IMAGE: (0.0, 1.0),
    Modality.AUDIO: (-1.0, 1.0),
}


class Provenance(str, Enum):
    NATURAL = "natural"
    PERMUTED = "permuted"


class Sample(BaseModel):
    """One datum in one modality. Payload is a read-only float64 array."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    modality: Modality
    payload: np.ndarray
    class_id: Optional[int] = Field(None, ge=0)

    @field_validator("payload", mode="before")
    @classmethod
    def _as_array(cls, value):
        if isinstance(value, Tensor):
            value = value.data
        arr = np.array(value, dtype=np.float64)
        arr.setflags(write=False)
        return arr

    @model_validator(mode="after")
    def _check_payload(self):
        arr = self.payload
        if arr.size == 0:
            raise ValueError("payload is empty")
        if not np.all(np.isfinite(arr)):
            raise ValueError("payload contains non-finite values")
        if self.modality == Modality.TEXT:
            if arr.ndim != 1 or arr.size > TEXT_MAX_LENGTH:
                raise ValueError(f"TEXT payload must be 1..{TEXT_MAX_LENGTH} token ids")
            if np.any(arr != np.round(arr)) or np.any(arr < 0) or np.any(arr >= VOCAB_SIZE):
                raise ValueError(f"TEXT token ids must be integers in [0, {VOCAB_SIZE})")
        else:
            lo, hi = MODALITY_RANGES[self.modality]
            if arr.min() < lo or arr.max() > hi:
                raise ValueError(f"{self.modality.value} payload outside [{lo}, {hi}]")
        return self

    @property
    def tokens(self) -> np.ndarray:
        return self.payload.astype(np.int64)

    def tensor(self, requires_grad: bool = False) -> Tensor:
        return Tensor(self.payload, requires_grad=requires_grad)

    def with_payload(self, payload: np.ndarray) -> "Sample":
        return Sample(modality=self.modality, payload=payload, class_id=self.class_id)


class PairedDataset(BaseModel):
    """Cross-modal (x, y) pairs with their provenance."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    pairs: List[Tuple[Sample, Sample]] = Field(default_factory=list)
    provenance: Provenance = Provenance.NATURAL

    @model_validator(mode="after")
    def _check_pairs(self):
        if self.provenance == Provenance.NATURAL:
            for x, y in self.pairs:
                if x.class_id is None or y.class_id is None:
                    raise ValueError("natural pairs must carry class ids on both sides")
        return self

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def modalities(self) -> Tuple[Modality, Modality]:
        if not self.pairs:
            raise ValueError("empty dataset has no modalities")
        x, y = self.pairs[0]
        return x.modality, y.modality
