"""Query ledger statistics."""
from fastapi import APIRouter, Depends, Request
from sqlalchemy.ext.asyncio import AsyncSession

from app.db.session import get_db
from app.schemas.encode import ServiceStatsDto
from app.services import usage_service

router = APIRouter()


@router.get("/stats", response_model=ServiceStatsDto, response_model_by_alias=True)
async def get_stats(request: Request, db: AsyncSession = Depends(get_db)):
    return await usage_service.get_stats(db, request.app.state.price_per_query, request.app.state.model_version)
