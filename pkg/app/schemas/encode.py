from decimal import Decimal
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field


class EncodeRequestDto(BaseModel):
    """``payload`` is base64 of the row-major little-endian float64 values."""
    model_config = ConfigDict(populate_by_name=True)

    request_id: str = Field(..., alias="requestId", min_length=1)
    modality: str = Field(..., alias="modality")
    payload: str = Field(..., alias="payload")


class EncodeResponseDto(BaseModel):
    model_config = ConfigDict(populate_by_name=True, protected_namespaces=())

    request_id: str = Field(..., alias="requestId")
    embedding: List[float] = Field(..., alias="embedding")
    model_version: str = Field(..., alias="modelVersion")


class ServiceStatsDto(BaseModel):
    """Query ledger totals; ``cost_accrued`` = total_queries x price_per_query."""
    model_config = ConfigDict(populate_by_name=True, protected_namespaces=())

    total_queries: int = Field(0, alias="totalQueries")
    per_client: Dict[str, int] = Field(default_factory=dict, alias="perClient")
    price_per_query: Decimal = Field(..., alias="pricePerQuery")
    cost_accrued: Decimal = Field(..., alias="costAccrued")
    model_version: Optional[str] = Field(None, alias="modelVersion")
