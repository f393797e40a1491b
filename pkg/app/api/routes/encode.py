"""Encode route: the only way to reach the served encoder."""
import logging

from fastapi import APIRouter, Depends, HTTPException, Request, status
from sqlalchemy.ext.asyncio import AsyncSession

from app.api.deps import get_checkpoint, get_client_key
from app.core.exceptions import InvalidConfigError, ShapeMismatchError, UnsupportedModalityError
from app.db.session import get_db
from app.schemas.base import ErrorResponseDto
from app.schemas.encode import EncodeRequestDto, EncodeResponseDto
from app.schemas.encoder import EncoderCheckpoint
from app.services import embedding_service, usage_service
from app.services.encoder_service import encode as encode_sample

logger = logging.getLogger(__name__)

router = APIRouter()


@router.post("/encode", response_model=EncodeResponseDto, response_model_by_alias=True,
             responses={400: {"model": ErrorResponseDto}})
async def encode(
    body: EncodeRequestDto,
    request: Request,
    client_key: str = Depends(get_client_key),
    ckpt: EncoderCheckpoint = Depends(get_checkpoint),
    db: AsyncSession = Depends(get_db),
):
    """Embed one payload; counted against the caller only when it succeeds."""
    try:
        sample = embedding_service.decode_sample(ckpt, body.modality, body.payload)
        embedding = encode_sample(ckpt, sample).numpy()
    except UnsupportedModalityError as exc:
        logger.warning("request %s rejected: %s", body.request_id, exc)
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail="UNSUPPORTED_MODALITY")
    except ShapeMismatchError as exc:
        logger.warning("request %s rejected: %s", body.request_id, exc)
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail="PAYLOAD_SHAPE_MISMATCH")
    except (InvalidConfigError, ValueError) as exc:
        logger.warning("request %s rejected: %s", body.request_id, exc)
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail="MALFORMED_PAYLOAD")

    async with request.app.state.ledger_lock:
        await usage_service.record_query(db, client_key, body.request_id, sample.modality)

    return EncodeResponseDto(
        request_id=body.request_id,
        embedding=embedding.tolist(),
        model_version=request.app.state.model_version,
    )
