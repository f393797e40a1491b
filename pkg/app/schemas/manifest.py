from typing import Any, Dict, List

from pydantic import BaseModel, Field


class RunManifest(BaseModel):
    """
    Everything needed to re-run one CLI invocation. The manifest file is
    itself a valid ``--config`` file; it carries no timestamps.
    """
    subcommand: str
    config: Dict[str, Any]
    seed: int
    inputs: List[str] = Field(default_factory=list)
    outputs: List[str] = Field(default_factory=list)
    toolkit_version: str
