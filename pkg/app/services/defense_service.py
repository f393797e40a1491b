"""JPEG-resistant illusions, augmentation-consistency detection and its evasion."""
import logging
import time
from typing import Sequence

import numpy as np

from app.core import grad
from app.core.exceptions import EmptyInputError, UnsupportedModalityError
from app.core.grad import Tensor
from app.schemas.attack import AttackConfig, AttackMethod, AttackResult, EvasionMode, PerturbationBudget
from app.schemas.defense import AugmentationSpec, ConsistencyScore, DetectionResult, JpegConfig
from app.schemas.encoder import EncoderCheckpoint
from app.schemas.sample import Modality, Sample
from app.services.attack_service import check_attack_pair, gradient_result, pgd_whitebox, run_pgd, whitebox_loss
from app.services.augmentation_service import apply_augmentation
from app.services.encoder_service import embed_tensor, encode
from app.services.jpeg_service import jpeg_compress, jpeg_differentiable

logger = logging.getLogger(__name__)


def _require_image(x: Sample) -> None:
    if x.modality != Modality.IMAGE:
        raise UnsupportedModalityError(f"image defenses do not apply to {x.modality.value} inputs")


def resistant_attack(x: Sample, y_t: Sample, ckpt: EncoderCheckpoint, budget: PerturbationBudget,
                     cfg: AttackConfig, jpeg: JpegConfig = JpegConfig()) -> AttackResult:
    """
    PGD through the differentiable JPEG layer, so the illusion survives
    compression. ``final_alignment`` is measured after the exact JPEG round trip.
    """
    check_attack_pair(x, y_t, [ckpt])
    _require_image(x)
    iterations = cfg.resolved_iterations(AttackMethod.RESISTANT)
    target = encode(ckpt, y_t)
    shape, size = x.payload.shape, x.payload.size

    def loss_at(adv: Tensor, t: int) -> Tensor:
        compressed = jpeg_differentiable(adv.reshape(shape), jpeg)
        return whitebox_loss(ckpt, Modality.IMAGE, compressed.reshape(size), target)

    def defended_alignment(adv: Tensor) -> float:
        compressed = jpeg_compress(adv.reshape(shape), jpeg.quality)
        return grad.cosine_value(embed_tensor(ckpt, Modality.IMAGE, compressed.reshape(size)), target)

    logger.info("RESISTANT attack: eps=%.5f T=%d quality=%d", budget.epsilon, iterations, jpeg.quality)
    started = time.perf_counter()
    delta, trace, stopped = run_pgd(x, budget, cfg, iterations, loss_at)
    return gradient_result(AttackMethod.RESISTANT, x, delta, budget, cfg, trace, stopped, defended_alignment, started)


def consistency_score(x: Sample, ckpt: EncoderCheckpoint, augs: Sequence[AugmentationSpec]) -> ConsistencyScore:
    """cos(theta(x), theta(aug(x))) for every augmentation, and their mean."""
    _require_image(x)
    if not augs:
        raise EmptyInputError("consistency score needs at least one augmentation")
    base = encode(ckpt, x)
    scores = []
    for spec in augs:
        augmented = apply_augmentation(x.payload, spec)
        scores.append(grad.cosine_value(base, embed_tensor(ckpt, Modality.IMAGE, augmented.reshape(x.payload.size))))
    return ConsistencyScore(kinds=[s.kind for s in augs], per_augmentation=scores, mean=float(np.mean(scores)))


def detect_anomaly(x: Sample, ckpt: EncoderCheckpoint, augs: Sequence[AugmentationSpec],
                   threshold: float) -> DetectionResult:
    """Flag ``x`` when its mean consistency score falls below ``threshold``."""
    score = consistency_score(x, ckpt, augs).mean
    return DetectionResult(flagged=score < threshold, score=score, threshold=threshold)


def evasion_attack(x: Sample, y_t: Sample, ckpt: EncoderCheckpoint, budget: PerturbationBudget,
                   cfg: AttackConfig, augs: Sequence[AugmentationSpec]) -> AttackResult:
    """
    Illusions that keep their embedding under augmentation.

    ``eot`` mode (default) minimizes the white-box loss averaged over
    ``cfg.eot_samples`` augmentations drawn from ``augs`` at every step;
    ``jpeg`` mode is the JPEG-resistant attack. An empty ``augs`` is plain PGD.
    """
    if not augs:
        return pgd_whitebox(x, y_t, ckpt, budget, cfg)
    cfg = cfg.model_copy(update={"iterations": cfg.resolved_iterations(AttackMethod.EVASION)})
    if cfg.evasion_mode == EvasionMode.JPEG:
        result = resistant_attack(x, y_t, ckpt, budget, cfg)
        return result.model_copy(update={"method": AttackMethod.EVASION})

    check_attack_pair(x, y_t, [ckpt])
    _require_image(x)
    target = encode(ckpt, y_t)
    shape, size = x.payload.shape, x.payload.size
    rng = np.random.default_rng([cfg.seed, 1])

    def loss_at(adv: Tensor, t: int) -> Tensor:
        image = adv.reshape(shape)
        total = None
        for _ in range(cfg.eot_samples):
            base = augs[int(rng.integers(len(augs)))]
            spec = base.model_copy(update={"seed": int(rng.integers(2 ** 31))})
            augmented = apply_augmentation(image, spec, differentiable=True)
            loss = whitebox_loss(ckpt, Modality.IMAGE, augmented.reshape(size), target)
            total = loss if total is None else total + loss
        return total * (1.0 / cfg.eot_samples)

    logger.info("EVASION attack: eps=%.5f T=%d augmentations=%d draws/step=%d", budget.epsilon,
                cfg.iterations, len(augs), cfg.eot_samples)
    started = time.perf_counter()
    delta, trace, stopped = run_pgd(x, budget, cfg, cfg.iterations, loss_at)
    return gradient_result(
        AttackMethod.EVASION, x, delta, budget, cfg, trace, stopped,
        lambda adv: grad.cosine_value(embed_tensor(ckpt, Modality.IMAGE, adv), target), started)
