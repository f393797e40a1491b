"""
Global test configuration and fixtures for the Illusion Toolkit tests.

This module provides:
- The toy dataset and contrastively trained toy encoders (trained once per session)
- Hand-built linear checkpoints with known optima
- A TestClient around the embedding service with an in-memory ledger
"""

from typing import Dict, List, Optional

import numpy as np
import pytest
from fastapi.testclient import TestClient

from app.main import create_app
from app.schemas.encoder import EncoderCheckpoint, Layer
from app.schemas.sample import Modality, Sample
from app.services.dataset_service import ToyDataset, gen_dataset, natural_pairs, split_indices
from app.services.encoder_service import train_contrastive


# =============================================================================
# TEST CONSTANTS
# =============================================================================

TOY_CLASSES = 10
TOY_PER_CLASS = 50
DATA_SEED = 1
TRAIN_EPOCHS = 200

MEMORY_DB = "sqlite+aiosqlite:///:memory:"
QUERY_PRICE = 0.00006

_TRAINED: Dict[int, EncoderCheckpoint] = {}


# =============================================================================
# HELPERS
# =============================================================================

def linear_checkpoint(weights: Dict[Modality, np.ndarray], biases: Optional[Dict[Modality, np.ndarray]] = None,
                      normalize_output: bool = True) -> EncoderCheckpoint:
    """One affine layer per modality, ``x @ W + b``."""
    biases = biases or {}
    layers = {m: [Layer(weight=w, bias=biases.get(m))] for m, w in weights.items()}
    embed_dim = next(iter(weights.values())).shape[1]
    return EncoderCheckpoint(embed_dim=embed_dim, layers=layers, normalize_output=normalize_output)


def identity_checkpoint(dim: int, modalities=(Modality.IMAGE, Modality.AUDIO)) -> EncoderCheckpoint:
    return linear_checkpoint({m: np.eye(dim) for m in modalities})


def trained_encoder(ds: ToyDataset, seed: int) -> EncoderCheckpoint:
    """Train on (IMAGE, TEXT) and (AUDIO, TEXT) of the training split; cached per seed."""
    if seed not in _TRAINED:
        train, _ = split_indices(len(ds))
        pairs = [natural_pairs(ds, Modality.IMAGE, Modality.TEXT, train),
                 natural_pairs(ds, Modality.AUDIO, Modality.TEXT, train)]
        _TRAINED[seed] = train_contrastive(pairs, epochs=TRAIN_EPOCHS, seed=seed)
    return _TRAINED[seed]


def image_sample(value: float = 0.5, shape=(3, 16, 16), class_id: Optional[int] = None) -> Sample:
    return Sample(modality=Modality.IMAGE, payload=np.full(shape, value), class_id=class_id)


# =============================================================================
# SESSION FIXTURES
# =============================================================================

@pytest.fixture(scope="session")
def toy_dataset() -> ToyDataset:
    """K = 10 classes, 50 samples per class."""
    return gen_dataset(TOY_CLASSES, TOY_PER_CLASS, seed=DATA_SEED)


@pytest.fixture(scope="session")
def trained_ckpt(toy_dataset) -> EncoderCheckpoint:
    return trained_encoder(toy_dataset, 0)


@pytest.fixture(scope="session")
def surrogate_ckpts(toy_dataset) -> List[EncoderCheckpoint]:
    """Same architecture and data as ``trained_ckpt``, different seeds."""
    return [trained_encoder(toy_dataset, 1), trained_encoder(toy_dataset, 2)]


@pytest.fixture(scope="session")
def held_out(toy_dataset) -> np.ndarray:
    return split_indices(len(toy_dataset))[1]


# =============================================================================
# SERVICE FIXTURES
# =============================================================================

@pytest.fixture
def service_app(trained_ckpt):
    """Fresh app and ledger per test."""
    return create_app(trained_ckpt, price_per_query=QUERY_PRICE, database_url=MEMORY_DB, model_version="toy-test")


@pytest.fixture
def client(service_app):
    """
    FastAPI TestClient for making HTTP requests.

    Entering the client runs the lifespan, which creates the ledger tables.
    """
    with TestClient(service_app) as test_client:
        yield test_client
