"""Request decoding for the embedding service."""
import numpy as np

from app.core.codec import decode_floats
from app.core.exceptions import ShapeMismatchError, UnsupportedModalityError
from app.schemas.encoder import EncoderCheckpoint
from app.schemas.sample import IMAGE_SHAPE, Modality, Sample


def parse_modality(ckpt: EncoderCheckpoint, tag: str) -> Modality:
    try:
        modality = Modality(tag)
    except ValueError:
        raise UnsupportedModalityError(f"unknown modality {tag!r}") from None
    if modality not in ckpt.layers:
        raise UnsupportedModalityError(f"the served encoder has no {modality.value} tower")
    return modality


def decode_sample(ckpt: EncoderCheckpoint, tag: str, payload: str) -> Sample:
    """
    Base64 payload -> Sample.

    Raises UnsupportedModalityError, InvalidConfigError (bad base64),
    ShapeMismatchError (wrong length) or ValueError (values out of range).
    """
    modality = parse_modality(ckpt, tag)
    values = decode_floats(payload)
    if modality != Modality.TEXT:
        expected = ckpt.input_dim(modality)
        if values.size != expected:
            raise ShapeMismatchError(f"payload[{modality.value}]", values.shape, (expected,))
        if modality == Modality.IMAGE and values.size == int(np.prod(IMAGE_SHAPE)):
            values = values.reshape(IMAGE_SHAPE)
    return Sample(modality=modality, payload=values)
