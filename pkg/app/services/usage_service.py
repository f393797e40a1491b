"""Query ledger: per-client counters and the derived service statistics."""
from decimal import Decimal
from typing import Optional

from sqlalchemy import func, select
from sqlalchemy.ext.asyncio import AsyncSession

from app.models.usage import ClientUsage, QueryLog
from app.schemas.encode import ServiceStatsDto
from app.schemas.sample import Modality


async def record_query(db: AsyncSession, client_key: str, request_id: str, modality: Modality) -> int:
    """Count one answered query for ``client_key``; returns the client's new total."""
    usage = await db.get(ClientUsage, client_key)
    if usage is None:
        usage = ClientUsage(client_key=client_key, queries=0)
        db.add(usage)
    usage.queries += 1
    db.add(QueryLog(request_id=request_id, client_key=client_key, modality=modality.value))
    await db.commit()
    return usage.queries


async def get_stats(db: AsyncSession, price_per_query: Decimal, model_version: Optional[str] = None) -> ServiceStatsDto:
    result = await db.execute(select(ClientUsage.client_key, ClientUsage.queries).order_by(ClientUsage.client_key))
    per_client = {key: int(count) for key, count in result.all()}
    total = sum(per_client.values())
    return ServiceStatsDto(
        total_queries=total,
        per_client=per_client,
        price_per_query=price_per_query,
        cost_accrued=price_per_query * total,
        model_version=model_version,
    )


async def count_logged(db: AsyncSession, client_key: Optional[str] = None) -> int:
    """Rows in the append-only query log, optionally for one client."""
    query = select(func.count(QueryLog.id))
    if client_key is not None:
        query = query.where(QueryLog.client_key == client_key)
    result = await db.execute(query)
    return result.scalar() or 0
