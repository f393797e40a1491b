from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field


class ErrorResponseDto(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    error: str = Field(..., alias="error")
    detail: Optional[Any] = Field(None, alias="detail")


class HealthDto(BaseModel):
    model_config = ConfigDict(populate_by_name=True, protected_namespaces=())

    status: str = Field(..., alias="status")
    app: str = Field(..., alias="app")
    version: str = Field(..., alias="version")
    model_version: str = Field(..., alias="modelVersion")
