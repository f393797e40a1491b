"""
Tests for the defense suite (JPEG, augmentations, detector, adaptive attacks).

Test coverage:
- Exact JPEG against a reference codec and its quality contract
- Differentiable JPEG agreement and gradients
- Augmentations: identity and symmetry cases, parameter validation
- Consistency score and detector thresholds
- JPEG-resistant and evasion attacks (degenerate cases)
- Defense efficacy on the trained toy encoder (slow)
"""

import io

import numpy as np
import pytest
from PIL import Image
from scipy.stats import mannwhitneyu

from app.core import grad
from app.core.exceptions import EmptyInputError, InvalidConfigError, UnsupportedModalityError
from app.core.grad import Tensor
from app.schemas.attack import AttackConfig, AttackMethod, EvasionMode, PerturbationBudget
from app.schemas.defense import AugmentationKind, AugmentationSpec, JpegConfig
from app.schemas.sample import Modality, Sample
from app.services import attack_service, defense_service
from app.services.augmentation_service import apply_augmentation, blur_matrix, resolve_augmentation
from app.services.encoder_service import embed_tensor, encode, init_checkpoint
from app.services.eval_service import detector_roc
from app.services.experiment_service import (
    DEFAULT_AUGMENTATIONS,
    attack_runner,
    build_jobs,
    evaluate,
    run_attacks,
)
from app.services.jpeg_service import LUMINANCE_TABLE, jpeg_compress, jpeg_differentiable, scaled_table
from tests.conftest import image_sample

pytestmark = pytest.mark.defenses

TEXT_TARGET = Sample(modality=Modality.TEXT, payload=[2, 7, 1, 8])
IDENTITY_AFFINE = AugmentationSpec(kind=AugmentationKind.RANDOM_AFFINE, params={"angle": 0, "tx": 0, "ty": 0})
FLIP = AugmentationSpec(kind=AugmentationKind.HORIZONTAL_FLIP)
BLUR = AugmentationSpec(kind=AugmentationKind.GAUSSIAN_BLUR, params={"sigma": 1.0})


@pytest.fixture(scope="module")
def random_ckpt():
    return init_checkpoint(seed=8)


def reference_jpeg(image: np.ndarray, quality: int) -> np.ndarray:
    """Pillow round trip of a 3xHxW image in [0, 1], 4:4:4 sampling."""
    pixels = np.round(np.transpose(image, (1, 2, 0)) * 255.0).astype(np.uint8)
    buffer = io.BytesIO()
    Image.fromarray(pixels).save(buffer, format="JPEG", quality=quality, subsampling=0)
    buffer.seek(0)
    decoded = np.asarray(Image.open(buffer).convert("RGB"), dtype=np.float64) / 255.0
    return np.transpose(decoded, (2, 0, 1))


def smooth_images(count: int, seed: int, shape=(3, 16, 16)) -> list:
    """Blurred noise: natural-image-like spectra, values inside [0, 1]."""
    rng = np.random.default_rng(seed)
    channels, height, width = shape
    blur = blur_matrix(height, width, 2.0)
    images = []
    for _ in range(count):
        noise = rng.uniform(0.0, 1.0, (channels, height * width))
        images.append(np.clip((noise @ blur.T).reshape(shape), 0.0, 1.0))
    return images


# =============================================================================
# Exact JPEG
# =============================================================================

def test_mid_gray_survives_quality_fifty():
    """
    Test a uniform mid-gray image at quality 50.

    Expected: uniform output within 2/255 of the input and of Pillow
    """
    gray = np.full((3, 16, 16), 128 / 255)
    out = jpeg_compress(gray, 50).numpy()
    assert np.ptp(out) < 1e-9
    assert np.max(np.abs(out - gray)) < 2 / 255
    assert np.max(np.abs(out - reference_jpeg(gray, 50))) < 2 / 255


def test_quality_hundred_is_nearly_lossless():
    """Expected: max per-pixel deviation < 4/255 on random images"""
    rng = np.random.default_rng(0)
    for _ in range(20):
        image = rng.uniform(0.0, 1.0, (3, 16, 16))
        assert np.max(np.abs(jpeg_compress(image, 100).numpy() - image)) < 4 / 255


def test_close_to_reference_codec_on_smooth_images():
    for image in smooth_images(10, seed=1):
        image = np.round(image * 255) / 255
        assert np.mean(np.abs(jpeg_compress(image, 75).numpy() - reference_jpeg(image, 75))) < 2 / 255


def test_second_compression_changes_less_than_first():
    rng = np.random.default_rng(2)
    for _ in range(20):
        image = rng.uniform(0.0, 1.0, (3, 8, 8))
        once = jpeg_compress(image, 75).numpy()
        twice = jpeg_compress(once, 75).numpy()
        assert np.abs(twice - once).sum() < np.abs(once - image).sum()


def test_output_stays_in_range():
    rng = np.random.default_rng(3)
    out = jpeg_compress(rng.choice([0.0, 1.0], size=(3, 8, 8)), 10).numpy()
    assert out.min() >= 0.0 and out.max() <= 1.0


@pytest.mark.parametrize("shape", [(3, 12, 16), (3, 16, 7), (1, 16, 16), (16, 16)])
def test_bad_extents_rejected(shape):
    with pytest.raises(InvalidConfigError):
        jpeg_compress(np.zeros(shape), 75)


@pytest.mark.parametrize("quality", [0, 101, 50.5])
def test_bad_quality_rejected(quality):
    with pytest.raises(InvalidConfigError):
        jpeg_compress(np.zeros((3, 8, 8)), quality)


def test_quality_scaling_of_tables():
    """Expected: quality 50 keeps the base table, quality 100 is all ones"""
    np.testing.assert_array_equal(scaled_table(LUMINANCE_TABLE, 50), LUMINANCE_TABLE)
    np.testing.assert_array_equal(scaled_table(LUMINANCE_TABLE, 100), np.ones((8, 8)))
    assert scaled_table(LUMINANCE_TABLE, 10)[0, 0] == 80


# =============================================================================
# Differentiable JPEG
# =============================================================================

def test_differentiable_path_tracks_exact_jpeg():
    """
    Test quality 75 on 100 smooth random images.

    Expected: per-pixel gap < 3/255 and mean gap < 2/255
    """
    for image in smooth_images(100, seed=4):
        exact = jpeg_compress(image, 75).numpy()
        smooth = jpeg_differentiable(Tensor(image)).numpy()
        assert np.max(np.abs(smooth - exact)) < 3 / 255
        assert np.mean(np.abs(smooth - exact)) < 2 / 255


def test_differentiable_path_without_smoothing_is_exact():
    image = smooth_images(1, seed=5)[0]
    np.testing.assert_allclose(jpeg_differentiable(Tensor(image), JpegConfig(differentiable=False)).numpy(),
                               jpeg_compress(image, 75).numpy(), atol=1e-12)


def test_unknown_rounding_rejected():
    with pytest.raises(InvalidConfigError):
        jpeg_differentiable(Tensor(np.zeros((3, 8, 8))), JpegConfig(rounding_sharpness="sigmoid"))


def test_differentiable_jpeg_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    weights = Tensor(rng.normal(size=(3, 8, 8)))
    point = rng.uniform(0.3, 0.7, size=(3, 8, 8))
    assert grad.grad_check(lambda x: (jpeg_differentiable(x) * weights).sum(), point) < 1e-4


def test_gradient_reaches_every_pixel():
    image = Tensor(np.full((3, 8, 8), 0.4), requires_grad=True)
    with grad.Tape():
        grad.backward(jpeg_differentiable(image).mean())
    assert image.grad is not None
    assert np.all(np.isfinite(image.grad))


# =============================================================================
# Augmentations
# =============================================================================

def test_identity_affine_is_exact():
    image = np.random.default_rng(7).uniform(0, 1, (3, 16, 16))
    np.testing.assert_array_equal(apply_augmentation(image, IDENTITY_AFFINE).numpy(), image)


def test_flip_reverses_columns():
    image = np.random.default_rng(8).uniform(0, 1, (3, 16, 16))
    np.testing.assert_allclose(apply_augmentation(image, FLIP).numpy(), image[:, :, ::-1], atol=1e-15)


@pytest.mark.parametrize("spec", DEFAULT_AUGMENTATIONS, ids=lambda s: s.kind.value)
def test_augmentations_keep_shape_and_range(spec):
    image = np.random.default_rng(9).uniform(0, 1, (3, 16, 16))
    out = apply_augmentation(image, spec).numpy()
    assert out.shape == image.shape
    assert out.min() >= -1e-12 and out.max() <= 1.0 + 1e-12


def test_augmentation_draw_is_seeded():
    spec = AugmentationSpec(kind=AugmentationKind.RANDOM_AFFINE, seed=4)
    assert resolve_augmentation(spec, 16, 16) == resolve_augmentation(spec, 16, 16)
    other = spec.model_copy(update={"seed": 5})
    assert resolve_augmentation(spec, 16, 16) != resolve_augmentation(other, 16, 16)


@pytest.mark.parametrize("spec", [
    AugmentationSpec(kind=AugmentationKind.GAUSSIAN_BLUR, params={"radius": 2}),
    AugmentationSpec(kind=AugmentationKind.GAUSSIAN_BLUR, params={"sigma": 0}),
    AugmentationSpec(kind=AugmentationKind.JPEG, params={"quality": 101}),
    AugmentationSpec(kind=AugmentationKind.COLOR_JITTER, params={"brightness": 1.5}),
    AugmentationSpec(kind=AugmentationKind.RANDOM_PERSPECTIVE, params={"distortion": 2}),
])
def test_invalid_augmentation_params_rejected(spec):
    with pytest.raises(InvalidConfigError):
        apply_augmentation(np.zeros((3, 8, 8)), spec)


def test_differentiable_augmentations_pass_gradients():
    image = Tensor(np.full((3, 16, 16), 0.5), requires_grad=True)
    with grad.Tape():
        total = None
        for spec in DEFAULT_AUGMENTATIONS:
            term = apply_augmentation(image, spec, differentiable=True).mean()
            total = term if total is None else total + term
        grad.backward(total)
    assert np.any(image.grad)


# =============================================================================
# Consistency and detection
# =============================================================================

def test_identity_augmentation_scores_one(random_ckpt):
    """Expected: score 1.0 within 1e-9"""
    score = defense_service.consistency_score(image_sample(0.3), random_ckpt, [IDENTITY_AFFINE])
    assert abs(score.mean - 1.0) < 1e-9
    assert score.kinds == [AugmentationKind.RANDOM_AFFINE]


def test_flip_of_symmetric_image_scores_one(random_ckpt):
    """Expected: score 1.0 within 1e-6"""
    half = np.random.default_rng(10).uniform(0, 1, (3, 16, 8))
    symmetric = np.concatenate([half, half[:, :, ::-1]], axis=2)
    score = defense_service.consistency_score(Sample(modality=Modality.IMAGE, payload=symmetric), random_ckpt,
                                              [FLIP])
    assert abs(score.mean - 1.0) < 1e-6


def test_score_lists_every_augmentation(random_ckpt):
    score = defense_service.consistency_score(image_sample(0.6), random_ckpt, DEFAULT_AUGMENTATIONS)
    assert len(score.per_augmentation) == len(DEFAULT_AUGMENTATIONS)
    assert score.mean == pytest.approx(np.mean(score.per_augmentation))


def test_empty_augmentations_rejected(random_ckpt):
    with pytest.raises(EmptyInputError):
        defense_service.consistency_score(image_sample(0.5), random_ckpt, [])


def test_audio_input_rejected(random_ckpt):
    audio = Sample(modality=Modality.AUDIO, payload=np.zeros(256))
    with pytest.raises(UnsupportedModalityError):
        defense_service.consistency_score(audio, random_ckpt, [FLIP])


def test_threshold_zero_never_flags(random_ckpt):
    for value in (0.2, 0.5, 0.8):
        assert not defense_service.detect_anomaly(image_sample(value), random_ckpt, [BLUR, FLIP], 0.0).flagged


def test_threshold_one_flags_all_but_exact_invariance(random_ckpt):
    x = Sample(modality=Modality.IMAGE, payload=np.random.default_rng(11).uniform(0, 1, (3, 16, 16)))
    assert defense_service.detect_anomaly(x, random_ckpt, [BLUR], 1.0).flagged
    result = defense_service.detect_anomaly(x, random_ckpt, [IDENTITY_AFFINE], 1.0)
    assert not result.flagged
    assert result.score == 1.0


# =============================================================================
# Adaptive attacks
# =============================================================================

def test_resistant_attack_with_zero_iterations_is_identity(random_ckpt):
    x = image_sample(0.5)
    result = defense_service.resistant_attack(x, TEXT_TARGET, random_ckpt,
                                              PerturbationBudget.for_modality(Modality.IMAGE),
                                              AttackConfig(iterations=0))
    np.testing.assert_array_equal(result.adversarial, x.payload)
    assert result.method == AttackMethod.RESISTANT


def test_resistant_attack_respects_budget(random_ckpt):
    budget = PerturbationBudget.for_modality(Modality.IMAGE)
    result = defense_service.resistant_attack(image_sample(0.5), TEXT_TARGET, random_ckpt, budget,
                                              AttackConfig(iterations=5))
    assert np.max(np.abs(result.delta)) <= budget.epsilon + 1e-12
    assert len(result.trace) == 5


def test_resistant_alignment_is_measured_after_jpeg(random_ckpt):
    """Expected: final_alignment = cos(theta(jpeg75(x + delta)), theta(y_t))"""
    result = defense_service.resistant_attack(image_sample(0.4), TEXT_TARGET, random_ckpt,
                                              PerturbationBudget.for_modality(Modality.IMAGE),
                                              AttackConfig(iterations=4))
    compressed = jpeg_compress(result.adversarial, 75).numpy().reshape(-1)
    defended = embed_tensor(random_ckpt, Modality.IMAGE, Tensor.constant(compressed))
    expected = grad.cosine_value(defended, encode(random_ckpt, TEXT_TARGET))
    assert result.final_alignment == pytest.approx(expected, abs=1e-12)


def test_evasion_without_augmentations_is_pgd(random_ckpt):
    """Expected: identical delta to pgd_whitebox with the same config"""
    budget = PerturbationBudget.for_modality(Modality.IMAGE)
    cfg = AttackConfig(iterations=12, seed=3)
    x = image_sample(0.45)
    evading = defense_service.evasion_attack(x, TEXT_TARGET, random_ckpt, budget, cfg, [])
    plain = attack_service.pgd_whitebox(x, TEXT_TARGET, random_ckpt, budget, cfg)
    np.testing.assert_array_equal(evading.delta, plain.delta)


@pytest.mark.slow
def test_evasion_without_augmentations_keeps_whitebox_defaults(random_ckpt):
    """
    Test the empty augmentation list with a default config.

    Expected: T = 7500 like pgd_whitebox, same delta, WHITEBOX label
    """
    budget = PerturbationBudget.for_modality(Modality.IMAGE)
    x = image_sample(0.45)
    evading = defense_service.evasion_attack(x, TEXT_TARGET, random_ckpt, budget, AttackConfig(seed=3), [])
    plain = attack_service.pgd_whitebox(x, TEXT_TARGET, random_ckpt, budget, AttackConfig(seed=3))
    assert len(evading.trace) == len(plain.trace) == 7500
    assert evading.method == AttackMethod.WHITEBOX
    np.testing.assert_array_equal(evading.delta, plain.delta)


def test_evasion_is_deterministic(random_ckpt):
    budget = PerturbationBudget.for_modality(Modality.IMAGE)
    cfg = AttackConfig(iterations=3, seed=9, eot_samples=2)
    runs = [defense_service.evasion_attack(image_sample(0.5), TEXT_TARGET, random_ckpt, budget, cfg,
                                           DEFAULT_AUGMENTATIONS) for _ in range(2)]
    np.testing.assert_array_equal(runs[0].delta, runs[1].delta)
    assert runs[0].method == AttackMethod.EVASION


def test_jpeg_evasion_mode_is_labelled_evasion(random_ckpt):
    cfg = AttackConfig(iterations=2, evasion_mode=EvasionMode.JPEG)
    result = defense_service.evasion_attack(image_sample(0.5), TEXT_TARGET, random_ckpt,
                                            PerturbationBudget.for_modality(Modality.IMAGE), cfg, [BLUR])
    assert result.method == AttackMethod.EVASION
    assert len(result.trace) == 2


# =============================================================================
# Efficacy on the trained encoder
# =============================================================================

def _top1(rows) -> float:
    return float(np.mean([row.top1 for row in rows]))


@pytest.mark.slow
def test_jpeg_defense_and_resistant_illusions(toy_dataset, trained_ckpt):
    """
    Test plain and JPEG-resistant illusions with and without a JPEG-75 defense.

    Expected: plain success drops by >= 50 points under JPEG; resistant
    illusions stay within 20 points of their undefended success
    """
    jobs = build_jobs(toy_dataset, Modality.IMAGE, Modality.TEXT, seed=4, count=20)
    budget = PerturbationBudget.for_modality(Modality.IMAGE)
    cfg = AttackConfig(iterations=300)

    plain = run_attacks(jobs, attack_runner(AttackMethod.WHITEBOX, budget, cfg, ckpt=trained_ckpt), 0)
    resistant = run_attacks(jobs, attack_runner(AttackMethod.RESISTANT, budget, cfg, ckpt=trained_ckpt), 0)

    plain_clean = _top1(evaluate(jobs, plain, trained_ckpt, toy_dataset))
    plain_jpeg = _top1(evaluate(jobs, plain, trained_ckpt, toy_dataset, defense="jpeg75"))
    resistant_clean = _top1(evaluate(jobs, resistant, trained_ckpt, toy_dataset))
    resistant_jpeg = _top1(evaluate(jobs, resistant, trained_ckpt, toy_dataset, defense="jpeg75"))

    assert plain_clean - plain_jpeg >= 0.5
    assert resistant_clean - resistant_jpeg <= 0.2
    assert resistant_jpeg > plain_jpeg


@pytest.mark.slow
def test_consistency_detector_and_its_evasion(toy_dataset, trained_ckpt):
    """
    Test the consistency detector on clean images and on illusions.

    Expected: clean scores above illusion scores and ROC AUC >= 0.9 on
    plain illusions; against evading illusions AUC < 0.7 while they still
    reach >= 50% top-1 success
    """
    jobs = build_jobs(toy_dataset, Modality.IMAGE, Modality.TEXT, seed=5, count=20)
    budget = PerturbationBudget.for_modality(Modality.IMAGE)
    cfg = AttackConfig(iterations=300)
    plain = run_attacks(jobs, attack_runner(AttackMethod.WHITEBOX, budget, cfg, ckpt=trained_ckpt), 0)
    evading = run_attacks(jobs, attack_runner(AttackMethod.EVASION, budget, cfg, ckpt=trained_ckpt), 0)

    def scores(samples):
        return [defense_service.consistency_score(s, trained_ckpt, DEFAULT_AUGMENTATIONS).mean for s in samples]

    clean = scores([job.source for job in jobs])
    attacked = scores([r.adversarial_sample() for r in plain])
    evaded = scores([r.adversarial_sample() for r in evading])

    assert np.mean(clean) > np.mean(attacked)
    assert mannwhitneyu(clean, attacked, alternative="greater").pvalue < 0.01
    assert detector_roc(clean, attacked).auc >= 0.9
    assert np.mean(evaded) > np.mean(attacked)
    assert detector_roc(clean, evaded).auc < 0.7
    assert _top1(evaluate(jobs, evading, trained_ckpt, toy_dataset)) >= 0.5
