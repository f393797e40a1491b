"""Database engine and session management for the query ledger."""
from fastapi import Request
from sqlalchemy.ext.asyncio import AsyncEngine, AsyncSession, async_sessionmaker, create_async_engine
from sqlalchemy.orm import declarative_base
from sqlalchemy.pool import StaticPool

from app.core.config import settings

Base = declarative_base()


def make_engine(database_url: str = settings.DATABASE_URL) -> AsyncEngine:
    """In-memory SQLite shares one connection so every session sees the same ledger."""
    if ":memory:" in database_url or database_url.endswith("://"):
        return create_async_engine(
            database_url,
            echo=settings.DEBUG,
            poolclass=StaticPool,
            connect_args={"check_same_thread": False},
        )
    return create_async_engine(database_url, echo=settings.DEBUG)


def make_sessionmaker(engine: AsyncEngine) -> async_sessionmaker:
    return async_sessionmaker(engine, class_=AsyncSession, expire_on_commit=False)


async def get_db(request: Request) -> AsyncSession:
    """Dependency to get a session bound to the app's ledger database."""
    async with request.app.state.sessionmaker() as session:
        try:
            yield session
        finally:
            await session.close()
