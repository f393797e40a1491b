from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.schemas.sample import Modality

CHECKPOINT_FORMAT_VERSION = 1

Activation = Literal["none", "tanh", "relu"]
LayerKind = Literal["dense", "embedding"]


def _frozen(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    arr.setflags(write=False)
    return arr


class Layer(BaseModel):
    """
    One affine stage ``act(x @ weight + bias)``.

    ``embedding`` layers have no bias and read a bag-of-tokens matrix, so the
    product is the mean token embedding of the sequence.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: LayerKind = "dense"
    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    activation: Activation = "none"

    @field_validator("weight", "bias", mode="before")
    @classmethod
    def _as_array(cls, value):
        return None if value is None else _frozen(value)

    @model_validator(mode="after")
    def _check_shapes(self):
        if self.weight.ndim != 2:
            raise ValueError(f"layer weight must be 2-D, got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[1],):
            raise ValueError(f"bias shape {self.bias.shape} does not match weight {self.weight.shape}")
        return self

    @property
    def in_dim(self) -> int:
        return int(self.weight.shape[0])

    @property
    def out_dim(self) -> int:
        return int(self.weight.shape[1])


class TrainingMetadata(BaseModel):
    seed: int = 0
    epochs: int = 0
    temperature: float = 0.07
    learning_rate: float = 0.0
    batch_size: int = 0
    final_loss: Optional[float] = None


class EncoderCheckpoint(BaseModel):
    """Per-modality layer stacks into one shared embed_dim-dimensional space."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    embed_dim: int = Field(32, gt=0)
    layers: Dict[Modality, List[Layer]]
    normalize_output: bool = True
    metadata: TrainingMetadata = Field(default_factory=TrainingMetadata)
    format_version: int = CHECKPOINT_FORMAT_VERSION

    @model_validator(mode="after")
    def _check_stacks(self):
        for modality, stack in self.layers.items():
            if not stack:
                raise ValueError(f"{modality.value} has an empty layer stack")
            for prev, nxt in zip(stack, stack[1:]):
                if prev.out_dim != nxt.in_dim:
                    raise ValueError(f"{modality.value}: layer widths {prev.out_dim} -> {nxt.in_dim} do not chain")
            if stack[-1].out_dim != self.embed_dim:
                raise ValueError(f"{modality.value} maps to {stack[-1].out_dim} dims, expected {self.embed_dim}")
        return self

    @property
    def modalities(self) -> List[Modality]:
        return list(self.layers)

    def input_dim(self, modality: Modality) -> int:
        return self.layers[modality][0].in_dim
