"""Request dependencies for the embedding service."""
from fastapi import Request

from app.core.config import settings
from app.schemas.encoder import EncoderCheckpoint


async def get_client_key(request: Request) -> str:
    """Client attribution from the API-key header; no key means the anonymous bucket."""
    key = request.headers.get(settings.API_KEY_HEADER)
    return key if key else settings.ANONYMOUS_CLIENT


async def get_checkpoint(request: Request) -> EncoderCheckpoint:
    return request.app.state.checkpoint
