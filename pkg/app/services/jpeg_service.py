"""
JPEG compression as a pixel-to-pixel map.

RGB -> YCbCr, 8x8 block DCT per channel, quantization with the standard
tables scaled by quality, dequantization, inverse DCT, back to RGB and
clamp to [0, 1]. Entropy coding is lossless and skipped. There is no chroma
subsampling and no rounding to 8-bit pixels.

The block DCT of a channel is one matrix product with
``kron(kron(I, C8), kron(I, C8))``, so the whole pipeline stays inside the
differentiable tensor operations.
"""
import logging
from functools import lru_cache
from typing import Callable

import numpy as np

from app.core import grad
from app.core.exceptions import InvalidConfigError
from app.core.grad import Tensor
from app.schemas.defense import JpegConfig

logger = logging.getLogger(__name__)

BLOCK = 8

LUMINANCE_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

CHROMINANCE_TABLE = np.full((8, 8), 99.0)
CHROMINANCE_TABLE[:4, :4] = [
    [17, 18, 24, 47],
    [18, 21, 26, 66],
    [24, 26, 56, 99],
    [47, 66, 99, 99],
]

RGB_TO_YCBCR = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
YCBCR_TO_RGB = np.linalg.inv(RGB_TO_YCBCR)

RoundFn = Callable[[Tensor], Tensor]


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def scaled_table(base: np.ndarray, quality: int) -> np.ndarray:
    """Quality scaling of a base table: 5000/q below 50, 200 - 2q above."""
    _check_quality(quality)
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((base * scale + 50) / 100), 1, 255)


@lru_cache(maxsize=None)
def dct_matrix(n: int = BLOCK) -> np.ndarray:
    """Orthonormal DCT-II matrix: row k is the k-th cosine basis vector."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    c = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    c[0] /= np.sqrt(2.0)
    return _readonly(c)


@lru_cache(maxsize=None)
def _block_transform(height: int, width: int) -> np.ndarray:
    c8 = dct_matrix()
    rows = np.kron(np.eye(height // BLOCK), c8)
    cols = np.kron(np.eye(width // BLOCK), c8)
    return _readonly(np.kron(rows, cols))


@lru_cache(maxsize=None)
def _quant_matrix(height: int, width: int, quality: int) -> np.ndarray:
    reps = (height // BLOCK, width // BLOCK)
    luma = np.tile(scaled_table(LUMINANCE_TABLE, quality), reps).reshape(-1)
    chroma = np.tile(scaled_table(CHROMINANCE_TABLE, quality), reps).reshape(-1)
    return _readonly(np.stack([luma, chroma, chroma]))


@lru_cache(maxsize=None)
def _level_shift(size: int) -> np.ndarray:
    shift = np.zeros((3, size))
    shift[0] = -128.0
    return _readonly(shift)


def _check_quality(quality: int) -> None:
    if not 1 <= int(quality) <= 100 or int(quality) != quality:
        raise InvalidConfigError(f"JPEG quality must be an integer in [1, 100], got {quality}")


def _check_image(image: Tensor) -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise InvalidConfigError(f"JPEG expects a 3xHxW image, got shape {image.shape}")
    _, height, width = image.shape
    if height % BLOCK or width % BLOCK or height == 0 or width == 0:
        raise InvalidConfigError(f"image extents {height}x{width} are not multiples of {BLOCK}")


def _exact_round(t: Tensor) -> Tensor:
    return Tensor.constant(np.round(t.data))


def _pipeline(image: Tensor, quality: int, round_fn: RoundFn) -> Tensor:
    _check_quality(quality)
    _check_image(image)
    _, height, width = image.shape
    size = height * width
    transform = Tensor.constant(_block_transform(height, width))
    quant = Tensor.constant(_quant_matrix(height, width, int(quality)))
    shift = Tensor.constant(_level_shift(size))

    rows = image.reshape(3, size) * 255.0
    ycc = Tensor.constant(RGB_TO_YCBCR) @ rows + shift
    coeffs = ycc @ transform.T
    restored = (round_fn(coeffs / quant) * quant) @ transform
    rgb = Tensor.constant(YCBCR_TO_RGB) @ (restored - shift)
    return grad.clip((rgb * (1.0 / 255.0)).reshape(3, height, width), 0.0, 1.0)


def jpeg_compress(image, quality: int = 75) -> Tensor:
    """Exact JPEG round trip; not differentiable."""
    source = image.detach() if isinstance(image, Tensor) else Tensor(image)
    return _pipeline(source, quality, _exact_round)


def jpeg_differentiable(image: Tensor, config: JpegConfig = JpegConfig()) -> Tensor:
    """JPEG round trip with smooth rounding; gradients flow to ``image``."""
    if config.rounding_sharpness != "cubic":
        raise InvalidConfigError(f"unknown rounding approximation {config.rounding_sharpness!r}")
    image = image if isinstance(image, Tensor) else Tensor(image)
    round_fn = grad.smooth_round if config.differentiable else _exact_round
    return _pipeline(image, config.quality, round_fn)
