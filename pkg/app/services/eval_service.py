"""Downstream tasks and attack-success accounting."""
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from sklearn.metrics import roc_auc_score, roc_curve

from app.core import grad
from app.core.exceptions import EmptyInputError, InvalidConfigError
from app.schemas.attack import AttackResult
from app.schemas.defense import RocCurve
from app.schemas.encoder import EncoderCheckpoint
from app.schemas.sample import Sample
from app.services.encoder_service import encode

logger = logging.getLogger(__name__)

EmbedFn = Callable[[AttackResult], np.ndarray]


class LabelSet(BaseModel):
    """
    Ordered class labels with their embeddings.

    ``sample`` sets embed one stored sample per class; ``class_mean`` sets
    average the embeddings of several class representatives.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    class_ids: List[int]
    samples: List[Sample] = Field(default_factory=list)
    embeddings: np.ndarray
    kind: str = "sample"

    def __len__(self) -> int:
        return len(self.class_ids)

    def sample_for(self, class_id: int) -> Sample:
        return self.samples[self.class_ids.index(class_id)]


class SuccessReport(BaseModel):
    rate: float
    flags: List[bool]


def build_label_set(ckpt: EncoderCheckpoint, labels: Sequence[Tuple[int, Sample]]) -> LabelSet:
    """Embed one sample per class; rows match ``encode`` bit for bit."""
    class_ids = [int(k) for k, _ in labels]
    samples = [s for _, s in labels]
    if len(set(class_ids)) != len(class_ids):
        raise InvalidConfigError("duplicate class id in label set")
    embeddings = np.stack([encode(ckpt, s).numpy() for s in samples]) if samples else np.zeros((0, ckpt.embed_dim))
    return LabelSet(class_ids=class_ids, samples=samples, embeddings=embeddings)


def class_mean_label_set(ckpt: EncoderCheckpoint, samples_by_class: Dict[int, Sequence[Sample]]) -> LabelSet:
    """Label k is the mean embedding of the given class-k samples."""
    class_ids = sorted(samples_by_class)
    rows = []
    for k in class_ids:
        members = samples_by_class[k]
        if not members:
            raise EmptyInputError(f"class {k} has no representatives")
        rows.append(np.mean([encode(ckpt, s).numpy() for s in members], axis=0))
    embeddings = np.stack(rows) if rows else np.zeros((0, ckpt.embed_dim))
    return LabelSet(class_ids=class_ids, embeddings=embeddings, kind="class_mean")


def _cosines(query: np.ndarray, rows: np.ndarray) -> np.ndarray:
    return np.array([grad.cosine_value(query, row) for row in rows])


def zero_shot_classify(embedding, labels: LabelSet, k: int = 1) -> List[int]:
    """Top-k class ids by cosine similarity; ties go to the lower class id."""
    if len(labels) == 0:
        raise EmptyInputError("zero-shot classification against an empty label set")
    if not 1 <= k <= len(labels):
        raise InvalidConfigError(f"k={k} outside [1, {len(labels)}]")
    sims = _cosines(np.asarray(getattr(embedding, "data", embedding)), labels.embeddings)
    class_ids = np.asarray(labels.class_ids)
    order = np.lexsort((class_ids, -sims))
    return [int(c) for c in class_ids[order[:k]]]


def retrieve_topk(query, corpus: Sequence, k: int = 1) -> List[int]:
    """Indices of the k corpus embeddings nearest to ``query``; ties go to the lower index."""
    if len(corpus) == 0:
        raise EmptyInputError("retrieval from an empty corpus")
    if not 1 <= k <= len(corpus):
        raise InvalidConfigError(f"k={k} outside [1, {len(corpus)}]")
    rows = np.stack([np.asarray(getattr(c, "data", c)) for c in corpus])
    sims = _cosines(np.asarray(getattr(query, "data", query)), rows)
    order = np.lexsort((np.arange(len(rows)), -sims))
    return [int(i) for i in order[:k]]


def success_rate(results: Sequence[AttackResult], labels: Optional[LabelSet], targets: Sequence[int], k: int = 1,
                 *, embed_fn: EmbedFn, task: str = "classify", corpus: Optional[Sequence] = None) -> SuccessReport:
    """
    Fraction of results whose perturbed input lands on its target within
    top-k. ``classify`` targets are class ids of ``labels``; ``retrieve``
    targets are indices into ``corpus``. Each result's flag is also stored
    in ``result.success`` under ``"<task>_top<k>"``.
    """
    if not results:
        raise EmptyInputError("success rate of an empty result list")
    if len(results) != len(targets):
        raise InvalidConfigError(f"{len(results)} results but {len(targets)} targets")
    if task not in ("classify", "retrieve"):
        raise InvalidConfigError(f"unknown downstream task {task!r}")
    if task == "classify" and labels is None:
        raise InvalidConfigError("classification needs a label set")
    if task == "retrieve" and not corpus:
        raise InvalidConfigError("retrieval needs a corpus")

    flags = []
    for result, target in zip(results, targets):
        embedding = embed_fn(result)
        if task == "classify":
            hit = int(target) in zero_shot_classify(embedding, labels, k)
        else:
            hit = int(target) in retrieve_topk(embedding, corpus, k)
        result.success[f"{task}_top{k}"] = hit
        flags.append(hit)
    return SuccessReport(rate=sum(flags) / len(flags), flags=flags)


def default_non_targets(labels: LabelSet, target_class: int, true_class: Optional[int] = None,
                        exclude_true_label: bool = False) -> List[Sample]:
    """Every label sample except the target's (and the source's own, on request)."""
    skip = {target_class}
    if exclude_true_label and true_class is not None:
        skip.add(true_class)
    return [s for k, s in zip(labels.class_ids, labels.samples) if k not in skip]


def zero_shot_predicate(labels: LabelSet, target_class: int, k: int = 1) -> Callable[[np.ndarray], bool]:
    return lambda embedding: target_class in zero_shot_classify(embedding, labels, k)


def retrieval_predicate(corpus: Sequence, target_index: int, k: int = 1) -> Callable[[np.ndarray], bool]:
    return lambda embedding: target_index in retrieve_topk(embedding, corpus, k)


def detector_roc(clean_scores: Sequence[float], adversarial_scores: Sequence[float]) -> RocCurve:
    """
    ROC of the consistency detector (adversarial is the positive class,
    lower consistency is more anomalous). Thresholds are on the consistency
    scale, clipped to [-2, 2].
    """
    if not clean_scores or not adversarial_scores:
        raise EmptyInputError("ROC needs both clean and adversarial scores")
    y_true = np.concatenate([np.zeros(len(clean_scores)), np.ones(len(adversarial_scores))])
    anomaly = -np.concatenate([np.asarray(clean_scores, float), np.asarray(adversarial_scores, float)])
    fpr, tpr, thresholds = roc_curve(y_true, anomaly)
    return RocCurve(
        fpr=fpr.tolist(),
        tpr=tpr.tolist(),
        thresholds=np.clip(-thresholds, -2.0, 2.0).tolist(),
        auc=float(roc_auc_score(y_true, anomaly)),
    )
