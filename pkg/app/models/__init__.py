"""Database models package."""
from app.models.usage import ClientUsage, QueryLog

__all__ = [
    "ClientUsage",
    "QueryLog",
]
