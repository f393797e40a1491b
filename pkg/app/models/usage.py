"""Query ledger models."""
from datetime import datetime

from sqlalchemy import Column, DateTime, Integer, String

from app.db.session import Base


class ClientUsage(Base):
    """Answered encode queries per client key."""
    __tablename__ = "client_usage"

    client_key = Column(String, primary_key=True)
    queries = Column(Integer, nullable=False, default=0)


class QueryLog(Base):
    """One row per answered encode query."""
    __tablename__ = "query_log"

    id = Column(Integer, primary_key=True, autoincrement=True)
    request_id = Column(String, nullable=False)
    client_key = Column(String, nullable=False, index=True)
    modality = Column(String, nullable=False)
    created_at = Column(DateTime, default=datetime.utcnow, nullable=False)
