"""FastAPI application serving one encoder as a metered, encode-only oracle."""
import asyncio
import logging
from contextlib import asynccontextmanager
from decimal import Decimal
from typing import Optional

import uvicorn
from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from app.api.routes import encode, stats
from app.core.config import settings
from app.db.session import Base, make_engine, make_sessionmaker
from app.schemas.base import ErrorResponseDto, HealthDto
from app.schemas.encoder import EncoderCheckpoint

logger = logging.getLogger(__name__)


def create_app(ckpt: EncoderCheckpoint, price_per_query: Optional[float] = None,
               database_url: Optional[str] = None, model_version: Optional[str] = None) -> FastAPI:
    """
    Build the service around an immutable checkpoint.

    The ledger lives in ``database_url`` (settings.DATABASE_URL by default);
    ``sqlite+aiosqlite:///:memory:`` keeps it in process.
    """
    engine = make_engine(database_url or settings.DATABASE_URL)
    price = settings.PRICE_PER_QUERY if price_per_query is None else price_per_query

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        # Startup: create the ledger tables
        async with engine.begin() as conn:
            await conn.run_sync(Base.metadata.create_all)
        app.state.ledger_lock = asyncio.Lock()

        yield

        await engine.dispose()

    app = FastAPI(
        title=settings.APP_NAME,
        version=settings.APP_VERSION,
        debug=settings.DEBUG,
        lifespan=lifespan,
    )
    app.state.checkpoint = ckpt
    app.state.sessionmaker = make_sessionmaker(engine)
    app.state.price_per_query = Decimal(str(price))
    app.state.model_version = model_version or settings.MODEL_VERSION

    @app.exception_handler(RequestValidationError)
    async def validation_exception_handler(request: Request, exc: RequestValidationError):
        """400 instead of 422, with the same error body as every other failure."""
        return JSONResponse(
            status_code=400,
            content=ErrorResponseDto(error="VALIDATION_ERROR", detail=exc.errors()).model_dump(exclude_none=True),
        )

    @app.exception_handler(HTTPException)
    async def http_exception_handler(request: Request, exc: HTTPException):
        return JSONResponse(
            status_code=exc.status_code,
            content=ErrorResponseDto(error=exc.detail).model_dump(exclude_none=True),
        )

    app.include_router(encode.router, prefix="/v1", tags=["Encode"])
    app.include_router(stats.router, prefix="/v1", tags=["Statistics"])

    @app.get("/v1/health", response_model=HealthDto, response_model_by_alias=True)
    async def health_check():
        return HealthDto(status="healthy", app=settings.APP_NAME, version=settings.APP_VERSION,
                         model_version=app.state.model_version)

    return app


def serve(ckpt: EncoderCheckpoint, host: str = settings.HOST, port: int = settings.PORT,
          price_per_query: Optional[float] = None, database_url: Optional[str] = None) -> None:
    """Block serving ``ckpt`` until interrupted."""
    app = create_app(ckpt, price_per_query=price_per_query, database_url=database_url)
    logger.info("serving %s on %s:%d (price %s per query)", app.state.model_version, host, port,
                app.state.price_per_query)
    uvicorn.run(app, host=host, port=port, log_level=settings.LOG_LEVEL.lower())
