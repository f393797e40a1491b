from typing import Dict, List, Optional

from pydantic import BaseModel, Field

REPORT_COLUMNS = (
    "sample_id",
    "method",
    "modality",
    "epsilon",
    "organic_align",
    "adv_align",
    "top1",
    "top5",
    "queries",
    "defense",
    "seed",
)
# columns averaged in the aggregate block
METRIC_COLUMNS = ("organic_align", "adv_align", "top1", "top5", "queries")
QUERY_METHODS = ("QUERY", "HYBRID")


class ReportRow(BaseModel):
    sample_id: int
    method: str
    modality: str
    epsilon: float
    organic_align: float
    adv_align: float
    top1: bool
    top5: bool
    queries: int = 0
    defense: str = "none"
    seed: int = 0


class GroupAggregate(BaseModel):
    """Means and sample standard deviations of one (method, modality, epsilon, defense) group."""
    method: str
    modality: str
    epsilon: float
    defense: str
    count: int
    means: Dict[str, float]
    stds: Dict[str, float]
    cost_per_100: Optional[float] = None


class ReportAggregates(BaseModel):
    count: int = 0
    means: Dict[str, float] = Field(default_factory=dict)
    stds: Dict[str, float] = Field(default_factory=dict)
    cost_per_100: Optional[float] = None
    groups: List[GroupAggregate] = Field(default_factory=list)


class EvalReport(BaseModel):
    rows: List[ReportRow] = Field(default_factory=list)
    price_per_query: float = 0.00006
