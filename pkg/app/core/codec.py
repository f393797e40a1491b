"""Wire encoding of float payloads: row-major little-endian float64, base64."""
import base64
import binascii

import numpy as np

from app.core.exceptions import InvalidConfigError

WIRE_DTYPE = np.dtype("<f8")


def encode_floats(values) -> str:
    arr = np.ascontiguousarray(np.asarray(values, dtype=np.float64).reshape(-1), dtype=WIRE_DTYPE)
    return base64.b64encode(arr.tobytes()).decode("ascii")


def decode_floats(text: str) -> np.ndarray:
    """Inverse of ``encode_floats``; raises InvalidConfigError on malformed input."""
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError, ValueError) as exc:
        raise InvalidConfigError(f"payload is not valid base64: {exc}") from None
    if not raw or len(raw) % WIRE_DTYPE.itemsize:
        raise InvalidConfigError(f"payload length {len(raw)} is not a positive multiple of 8 bytes")
    return np.frombuffer(raw, dtype=WIRE_DTYPE).astype(np.float64)
