"""Synthetic multi-modal dataset: class prototypes plus seeded noise."""
import logging
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from app.core.container import read_container, write_container
from app.core.exceptions import EmptyInputError, InvalidConfigError
from app.schemas.sample import (
    AUDIO_LENGTH,
    IMAGE_SHAPE,
    MODALITY_RANGES,
    TEXT_MAX_LENGTH,
    VOCAB_SIZE,
    Modality,
    PairedDataset,
    Provenance,
    Sample,
)

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"ILLUDATA"
DATASET_FORMAT_VERSION = 1

DEFAULT_NOISE = 0.1
# index i is held out when i % HOLDOUT_PERIOD == HOLDOUT_PERIOD - 1  (80/20)
HOLDOUT_PERIOD = 5


class ToyDataset(BaseModel):
    """Three aligned modality sets; entry i of each list shares class labels[i]."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    num_classes: int
    n_per_class: int
    seed: int
    noise: float
    images: List[Sample]
    audio: List[Sample]
    texts: List[Sample]
    labels: np.ndarray
    prototypes: Dict[Modality, np.ndarray]

    def __len__(self) -> int:
        return len(self.labels)

    def samples(self, modality: Modality) -> List[Sample]:
        return {Modality.IMAGE: self.images, Modality.AUDIO: self.audio, Modality.TEXT: self.texts}[modality]

    def class_text(self, class_id: int) -> Sample:
        return Sample(modality=Modality.TEXT, payload=self.prototypes[Modality.TEXT][class_id], class_id=class_id)


def _audio_prototype(rng: np.random.Generator) -> np.ndarray:
    t = np.arange(AUDIO_LENGTH) / AUDIO_LENGTH
    freqs = rng.uniform(2.0, 40.0, size=3)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    amps = rng.uniform(0.5, 1.0, size=3)
    wave = (amps[:, None] * np.sin(2.0 * np.pi * freqs[:, None] * t[None, :] + phases[:, None])).sum(axis=0)
    return 0.5 * wave / np.max(np.abs(wave))


def gen_dataset(num_classes: int, n_per_class: int, seed: int, noise: float = DEFAULT_NOISE) -> ToyDataset:
    """
    Generate K classes with one fixed prototype per modality.

    IMAGE and AUDIO samples are prototype + N(0, noise) clamped to the
    modality range; every TEXT sample is its class's fixed token sequence,
    whose first token is unique to the class.
    """
    if num_classes < 2:
        raise InvalidConfigError(f"need at least 2 classes, got {num_classes}")
    if num_classes > VOCAB_SIZE:
        raise InvalidConfigError(f"{num_classes} classes exceed the {VOCAB_SIZE}-token vocabulary")
    if n_per_class < 1:
        raise InvalidConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    if noise < 0:
        raise InvalidConfigError(f"noise must be >= 0, got {noise}")

    rng = np.random.default_rng(seed)
    image_protos = rng.uniform(0.0, 1.0, size=(num_classes,) + IMAGE_SHAPE)
    audio_protos = np.stack([_audio_prototype(rng) for _ in range(num_classes)])
    heads = rng.permutation(VOCAB_SIZE)[:num_classes]
    tails = rng.integers(0, VOCAB_SIZE, size=(num_classes, TEXT_MAX_LENGTH - 1))
    text_protos = np.concatenate([heads[:, None], tails], axis=1).astype(np.float64)

    img_lo, img_hi = MODALITY_RANGES[Modality.IMAGE]
    aud_lo, aud_hi = MODALITY_RANGES[Modality.AUDIO]
    images, audio, texts, labels = [], [], [], []
    for k in range(num_classes):
        for _ in range(n_per_class):
            img = np.clip(image_protos[k] + rng.normal(0.0, 1.0, IMAGE_SHAPE) * noise, img_lo, img_hi)
            wav = np.clip(audio_protos[k] + rng.normal(0.0, 1.0, AUDIO_LENGTH) * noise, aud_lo, aud_hi)
            images.append(Sample(modality=Modality.IMAGE, payload=img, class_id=k))
            audio.append(Sample(modality=Modality.AUDIO, payload=wav, class_id=k))
            texts.append(Sample(modality=Modality.TEXT, payload=text_protos[k], class_id=k))
            labels.append(k)

    logger.info("generated %d samples over %d classes (seed=%d, noise=%g)", len(labels), num_classes, seed, noise)
    return ToyDataset(
        num_classes=num_classes,
        n_per_class=n_per_class,
        seed=seed,
        noise=noise,
        images=images,
        audio=audio,
        texts=texts,
        labels=np.array(labels, dtype=np.int64),
        prototypes={Modality.IMAGE: image_protos, Modality.AUDIO: audio_protos, Modality.TEXT: text_protos},
    )


def split_indices(n: int) -> tuple:
    """Deterministic 80/20 split: (train indices, held-out indices)."""
    idx = np.arange(n)
    held = idx % HOLDOUT_PERIOD == HOLDOUT_PERIOD - 1
    return idx[~held], idx[held]


def natural_pairs(ds: ToyDataset, first: Modality, second: Modality,
                  indices: Optional[Sequence[int]] = None) -> PairedDataset:
    if first == second:
        raise InvalidConfigError("a paired dataset needs two different modalities")
    indices = range(len(ds)) if indices is None else indices
    xs, ys = ds.samples(first), ds.samples(second)
    return PairedDataset(pairs=[(xs[i], ys[i]) for i in indices], provenance=Provenance.NATURAL)


def derange_classes(labels: Sequence[int], num_classes: int, seed: int) -> np.ndarray:
    """Draw a target class for every sample, never its own class."""
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes < 2:
        raise InvalidConfigError("derangement needs at least 2 classes")
    rng = np.random.default_rng(seed)
    shifts = rng.integers(1, num_classes, size=labels.size)
    return (labels + shifts) % num_classes


def class_representative(ds: ToyDataset, modality: Modality, class_id: int,
                         indices: Optional[Sequence[int]] = None) -> Sample:
    """First sample of ``class_id`` among ``indices`` (all samples by default)."""
    pool = range(len(ds)) if indices is None else indices
    for i in pool:
        if ds.labels[i] == class_id:
            return ds.samples(modality)[i]
    raise EmptyInputError(f"no {modality.value} sample of class {class_id} in the selection")


def permuted_pairs(ds: ToyDataset, first: Modality, second: Modality, seed: int,
                   indices: Optional[Sequence[int]] = None) -> PairedDataset:
    """Pair each sample with a representative of a different, randomly drawn class."""
    indices = list(range(len(ds)) if indices is None else indices)
    targets = derange_classes(ds.labels[indices], ds.num_classes, seed)
    xs = ds.samples(first)
    pairs = [(xs[i], class_representative(ds, second, int(t))) for i, t in zip(indices, targets)]
    return PairedDataset(pairs=pairs, provenance=Provenance.PERMUTED)


def save_dataset(ds: ToyDataset, path) -> None:
    header = {
        "kind": "toy-dataset",
        "num_classes": ds.num_classes,
        "n_per_class": ds.n_per_class,
        "seed": ds.seed,
        "noise": ds.noise,
    }
    arrays = [
        ("labels", ds.labels.astype(np.float64)),
        ("images", np.stack([s.payload for s in ds.images])),
        ("audio", np.stack([s.payload for s in ds.audio])),
        ("image_prototypes", ds.prototypes[Modality.IMAGE]),
        ("audio_prototypes", ds.prototypes[Modality.AUDIO]),
        ("text_prototypes", ds.prototypes[Modality.TEXT]),
    ]
    write_container(path, DATASET_MAGIC, DATASET_FORMAT_VERSION, header, arrays)


def load_dataset(path) -> ToyDataset:
    _, header, arrays = read_container(path, DATASET_MAGIC, [DATASET_FORMAT_VERSION])
    labels = arrays["labels"].astype(np.int64)
    text_protos = arrays["text_prototypes"]
    images = [Sample(modality=Modality.IMAGE, payload=p, class_id=int(k)) for p, k in zip(arrays["images"], labels)]
    audio = [Sample(modality=Modality.AUDIO, payload=p, class_id=int(k)) for p, k in zip(arrays["audio"], labels)]
    texts = [Sample(modality=Modality.TEXT, payload=text_protos[k], class_id=int(k)) for k in labels]
    return ToyDataset(
        num_classes=header["num_classes"],
        n_per_class=header["n_per_class"],
        seed=header["seed"],
        noise=header["noise"],
        images=images,
        audio=audio,
        texts=texts,
        labels=labels,
        prototypes={
            Modality.IMAGE: arrays["image_prototypes"],
            Modality.AUDIO: arrays["audio_prototypes"],
            Modality.TEXT: text_protos,
        },
    )
