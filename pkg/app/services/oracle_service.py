"""
Encode-only query oracles.

An oracle answers (modality, payload) with an embedding and counts every
answered call. It never exposes gradients or parameters.
"""
import logging
import threading
import uuid
from abc import ABC, abstractmethod
from typing import Optional

import httpx
import numpy as np

from app.core.codec import encode_floats
from app.core.config import settings
from app.core.exceptions import IllusionError, OracleError
from app.schemas.encode import EncodeResponseDto
from app.schemas.encoder import EncoderCheckpoint
from app.schemas.sample import Modality, Sample
from app.services.encoder_service import encode

logger = logging.getLogger(__name__)


class QueryOracle(ABC):
    """Thread-safe query counter around an abstract ``_query``."""

    def __init__(self):
        self._lock = threading.Lock()
        self._queries = 0

    @property
    def queries_used(self) -> int:
        with self._lock:
            return self._queries

    def encode(self, modality: Modality, payload) -> np.ndarray:
        embedding = self._query(modality, np.asarray(payload, dtype=np.float64))
        with self._lock:
            self._queries += 1
        return embedding

    def encode_sample(self, sample: Sample) -> np.ndarray:
        return self.encode(sample.modality, sample.payload)

    @abstractmethod
    def _query(self, modality: Modality, payload: np.ndarray) -> np.ndarray:
        """Return the embedding; raise OracleError on failure."""


class LocalOracle(QueryOracle):
    """In-process oracle over a checkpoint."""

    def __init__(self, ckpt: EncoderCheckpoint):
        super().__init__()
        self._ckpt = ckpt

    def _query(self, modality: Modality, payload: np.ndarray) -> np.ndarray:
        try:
            return encode(self._ckpt, Sample(modality=modality, payload=payload)).numpy()
        except (IllusionError, ValueError) as exc:
            raise OracleError(f"local encode failed: {exc}") from exc


class RemoteOracle(QueryOracle):
    """
    Oracle that forwards every query to an embedding service.

    ``client`` may be any ``httpx.Client`` (a FastAPI TestClient works), in
    which case ``endpoint`` is resolved against the client's base URL.
    """

    def __init__(self, endpoint: str, api_key: Optional[str] = None, client: Optional[httpx.Client] = None,
                 timeout: float = settings.REQUEST_TIMEOUT):
        super().__init__()
        self.endpoint = endpoint.rstrip("/")
        self._headers = {settings.API_KEY_HEADER: api_key} if api_key else {}
        self._client = client
        self._owns_client = client is None
        self._timeout = timeout

    def _http(self) -> httpx.Client:
        if self._client is None:
            self._client = httpx.Client(timeout=self._timeout)
        return self._client

    def _query(self, modality: Modality, payload: np.ndarray) -> np.ndarray:
        body = {
            "requestId": uuid.uuid4().hex,
            "modality": modality.value,
            "payload": encode_floats(payload),
        }
        try:
            response = self._http().post(f"{self.endpoint}/v1/encode", json=body, headers=self._headers)
        except httpx.HTTPError as exc:
            logger.error("transport failure talking to %s: %s", self.endpoint, exc)
            raise OracleError(f"transport failure: {exc}") from exc
        if response.status_code != 200:
            logger.error("encode request rejected by %s with %d: %s", self.endpoint, response.status_code,
                         response.text)
            raise OracleError(f"service answered {response.status_code}: {response.text}")
        dto = EncodeResponseDto.model_validate(response.json())
        return np.asarray(dto.embedding, dtype=np.float64)

    def close(self) -> None:
        if self._owns_client and self._client is not None:
            self._client.close()
            self._client = None

    def __enter__(self) -> "RemoteOracle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def remote_oracle(endpoint: str, api_key: Optional[str] = None, client: Optional[httpx.Client] = None) -> RemoteOracle:
    """No connection is made until the first query."""
    return RemoteOracle(endpoint, api_key=api_key, client=client)
