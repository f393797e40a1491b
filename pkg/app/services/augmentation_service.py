"""
Seeded image augmentations built from differentiable tensor operations.

Geometric augmentations are linear maps over pixel positions: an (HW x HW)
sampling matrix applied to every channel (bilinear, clamp to edge).
"""
import logging
import math
from typing import Dict, Tuple

import numpy as np

from app.core import grad
from app.core.exceptions import InvalidConfigError
from app.core.grad import Tensor
from app.schemas.defense import AugmentationKind, AugmentationSpec, JpegConfig
from app.services.jpeg_service import jpeg_compress, jpeg_differentiable

logger = logging.getLogger(__name__)

DEFAULT_PARAMS: Dict[AugmentationKind, Dict[str, float]] = {
    AugmentationKind.JPEG: {"quality_min": 60, "quality_max": 90},
    AugmentationKind.GAUSSIAN_BLUR: {"sigma_min": 0.5, "sigma_max": 1.0},
    AugmentationKind.RANDOM_AFFINE: {"degrees": 10.0, "translate": 0.1},
    AugmentationKind.COLOR_JITTER: {"brightness": 0.2, "contrast": 0.2},
    AugmentationKind.HORIZONTAL_FLIP: {},
    AugmentationKind.RANDOM_PERSPECTIVE: {"distortion": 0.3},
}
# fixed-value overrides accepted besides the range parameters
FIXED_PARAMS = {
    AugmentationKind.JPEG: {"quality"},
    AugmentationKind.GAUSSIAN_BLUR: {"sigma"},
    AugmentationKind.RANDOM_AFFINE: {"angle", "tx", "ty"},
    AugmentationKind.COLOR_JITTER: {"brightness_factor", "contrast_factor"},
    AugmentationKind.HORIZONTAL_FLIP: set(),
    AugmentationKind.RANDOM_PERSPECTIVE: set(),
}

GRAY_WEIGHTS = np.array([[0.299, 0.587, 0.114]])


def _merged_params(spec: AugmentationSpec) -> Dict[str, float]:
    allowed = set(DEFAULT_PARAMS[spec.kind]) | FIXED_PARAMS[spec.kind]
    unknown = set(spec.params) - allowed
    if unknown:
        raise InvalidConfigError(f"{spec.kind.value} does not take parameters {sorted(unknown)}")
    params = dict(DEFAULT_PARAMS[spec.kind])
    params.update(spec.params)
    return params


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise InvalidConfigError(message)


def resolve_augmentation(spec: AugmentationSpec, height: int, width: int) -> Dict[str, float]:
    """Draw the concrete transform of ``spec`` for an image of the given size."""
    p = _merged_params(spec)
    rng = np.random.default_rng(spec.seed)
    kind = spec.kind

    if kind == AugmentationKind.JPEG:
        lo, hi = int(p["quality_min"]), int(p["quality_max"])
        _require(1 <= lo <= hi <= 100, f"JPEG quality range [{lo}, {hi}] outside [1, 100]")
        quality = p.get("quality", rng.integers(lo, hi + 1))
        _require(1 <= quality <= 100 and quality == int(quality), f"JPEG quality {quality} outside [1, 100]")
        return {"quality": int(quality)}

    if kind == AugmentationKind.GAUSSIAN_BLUR:
        lo, hi = p["sigma_min"], p["sigma_max"]
        _require(0 < lo <= hi, f"blur sigma range [{lo}, {hi}] is invalid")
        sigma = p.get("sigma", rng.uniform(lo, hi))
        _require(sigma > 0, f"blur sigma must be > 0, got {sigma}")
        return {"sigma": float(sigma)}

    if kind == AugmentationKind.RANDOM_AFFINE:
        degrees, translate = p["degrees"], p["translate"]
        _require(0 <= degrees <= 180, f"affine degrees {degrees} outside [0, 180]")
        _require(0 <= translate <= 1, f"affine translate {translate} outside [0, 1]")
        angle = p.get("angle", rng.uniform(-degrees, degrees))
        tx = p.get("tx", rng.uniform(-translate, translate) * width)
        ty = p.get("ty", rng.uniform(-translate, translate) * height)
        return {"angle": float(angle), "tx": float(tx), "ty": float(ty)}

    if kind == AugmentationKind.COLOR_JITTER:
        b, c = p["brightness"], p["contrast"]
        _require(0 <= b < 1 and 0 <= c < 1, f"jitter strengths ({b}, {c}) outside [0, 1)")
        return {
            "brightness_factor": float(p.get("brightness_factor", rng.uniform(1 - b, 1 + b))),
            "contrast_factor": float(p.get("contrast_factor", rng.uniform(1 - c, 1 + c))),
        }

    if kind == AugmentationKind.RANDOM_PERSPECTIVE:
        d = p["distortion"]
        _require(0 <= d <= 1, f"perspective distortion {d} outside [0, 1]")
        half_h, half_w = d * (height - 1) / 2.0, d * (width - 1) / 2.0
        dx = rng.uniform(0.0, half_w, size=4)
        dy = rng.uniform(0.0, half_h, size=4)
        return {f"dx{i}": float(dx[i]) for i in range(4)} | {f"dy{i}": float(dy[i]) for i in range(4)}

    return {}


# =============================================================================
# Sampling matrices
# =============================================================================

def bilinear_matrix(src_y: np.ndarray, src_x: np.ndarray, height: int, width: int) -> np.ndarray:
    """Row p samples the input at (src_y[p], src_x[p]) with clamp-to-edge."""
    y = np.clip(src_y, 0.0, height - 1.0)
    x = np.clip(src_x, 0.0, width - 1.0)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    y1 = np.minimum(y0 + 1, height - 1)
    x1 = np.minimum(x0 + 1, width - 1)
    wy, wx = y - y0, x - x0
    size = height * width
    rows = np.arange(size)
    matrix = np.zeros((size, size))
    np.add.at(matrix, (rows, y0 * width + x0), (1 - wy) * (1 - wx))
    np.add.at(matrix, (rows, y0 * width + x1), (1 - wy) * wx)
    np.add.at(matrix, (rows, y1 * width + x0), wy * (1 - wx))
    np.add.at(matrix, (rows, y1 * width + x1), wy * wx)
    return matrix


def _grid(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    ii, jj = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return ii.reshape(-1), jj.reshape(-1)


def flip_matrix(height: int, width: int) -> np.ndarray:
    ii, jj = _grid(height, width)
    return bilinear_matrix(ii, width - 1.0 - jj, height, width)


def affine_matrix(height: int, width: int, angle: float, tx: float, ty: float) -> np.ndarray:
    """Rotation by ``angle`` degrees about the center, then translation in pixels."""
    ii, jj = _grid(height, width)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    theta = math.radians(angle)
    cos, sin = math.cos(theta), math.sin(theta)
    u, v = jj - cx - tx, ii - cy - ty
    return bilinear_matrix(-sin * u + cos * v + cy, cos * u + sin * v + cx, height, width)


def _blur_1d(n: int, sigma: float) -> np.ndarray:
    radius = max(1, math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1)
    weights = np.exp(-0.5 * (offsets / sigma) ** 2)
    weights /= weights.sum()
    matrix = np.zeros((n, n))
    for i in range(n):
        np.add.at(matrix[i], np.clip(i + offsets, 0, n - 1), weights)
    return matrix


def blur_matrix(height: int, width: int, sigma: float) -> np.ndarray:
    return np.kron(_blur_1d(height, sigma), _blur_1d(width, sigma))


def perspective_matrix(height: int, width: int, values: Dict[str, float]) -> np.ndarray:
    """Corners pulled inward by (dx_i, dy_i); the homography maps output to input."""
    top, bottom, left, right = 0.0, height - 1.0, 0.0, width - 1.0
    start = [(left, top), (right, top), (right, bottom), (left, bottom)]
    signs = [(1, 1), (-1, 1), (-1, -1), (1, -1)]
    end = [(x + sx * values[f"dx{i}"], y + sy * values[f"dy{i}"])
           for i, ((x, y), (sx, sy)) in enumerate(zip(start, signs))]

    a = np.zeros((8, 8))
    b = np.zeros(8)
    for k, ((x, y), (u, v)) in enumerate(zip(end, start)):
        a[2 * k] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * k + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * k], b[2 * k + 1] = u, v
    h = np.linalg.solve(a, b)

    ii, jj = _grid(height, width)
    denom = h[6] * jj + h[7] * ii + 1.0
    src_x = (h[0] * jj + h[1] * ii + h[2]) / denom
    src_y = (h[3] * jj + h[4] * ii + h[5]) / denom
    return bilinear_matrix(src_y, src_x, height, width)


# =============================================================================
# Application
# =============================================================================

def _spatial(image: Tensor, matrix: np.ndarray) -> Tensor:
    channels, height, width = image.shape
    rows = image.reshape(channels, height * width)
    return (rows @ Tensor.constant(matrix.T)).reshape(channels, height, width)


def _color_jitter(image: Tensor, brightness: float, contrast: float) -> Tensor:
    channels, height, width = image.shape
    bright = image * brightness
    gray_mean = (Tensor.constant(GRAY_WEIGHTS) @ bright.reshape(channels, height * width)).mean()
    return grad.clip((bright - gray_mean) * contrast + gray_mean, 0.0, 1.0)


def apply_augmentation(image, spec: AugmentationSpec, differentiable: bool = False) -> Tensor:
    """
    Apply ``spec`` to a 3xHxW image. With ``differentiable`` the JPEG
    augmentation uses smooth rounding so gradients reach the input.
    """
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.ndim != 3:
        raise InvalidConfigError(f"augmentations expect a CxHxW image, got shape {image.shape}")
    _, height, width = image.shape
    values = resolve_augmentation(spec, height, width)
    kind = spec.kind

    if kind == AugmentationKind.JPEG:
        if differentiable:
            return jpeg_differentiable(image, JpegConfig(quality=values["quality"]))
        return jpeg_compress(image, values["quality"])
    if kind == AugmentationKind.HORIZONTAL_FLIP:
        return _spatial(image, flip_matrix(height, width))
    if kind == AugmentationKind.GAUSSIAN_BLUR:
        return _spatial(image, blur_matrix(height, width, values["sigma"]))
    if kind == AugmentationKind.RANDOM_AFFINE:
        return _spatial(image, affine_matrix(height, width, values["angle"], values["tx"], values["ty"]))
    if kind == AugmentationKind.RANDOM_PERSPECTIVE:
        return _spatial(image, perspective_matrix(height, width, values))
    return _color_jitter(image, values["brightness_factor"], values["contrast_factor"])
