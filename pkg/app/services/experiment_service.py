"""
Batch experiments: permuted attack jobs over the held-out split, parallel
attack runs with per-sample seeds, and evaluation into report rows.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel
from tqdm import tqdm

from app.core import grad
from app.core.exceptions import EmptyInputError, InvalidConfigError
from app.core.grad import Tensor
from app.schemas.attack import AttackConfig, AttackMethod, AttackResult, PerturbationBudget
from app.schemas.defense import AugmentationKind, AugmentationSpec, JpegConfig
from app.schemas.encoder import EncoderCheckpoint
from app.schemas.report import ReportRow
from app.schemas.sample import Modality, Sample
from app.services import attack_service, defense_service
from app.services.dataset_service import ToyDataset, class_representative, derange_classes, split_indices
from app.services.encoder_service import embed_tensor, encode
from app.services.eval_service import (
    LabelSet,
    build_label_set,
    class_mean_label_set,
    default_non_targets,
    success_rate,
    zero_shot_predicate,
)
from app.services.jpeg_service import jpeg_compress
from app.services.oracle_service import QueryOracle
from app.utils.seed import derive_seed

logger = logging.getLogger(__name__)

DEFAULT_AUGMENTATIONS = [AugmentationSpec(kind=kind, seed=i) for i, kind in enumerate(AugmentationKind)]

AttackFn = Callable[["AttackJob", int], AttackResult]


class AttackJob(BaseModel):
    """One source sample, its permuted target and the bookkeeping to score it."""
    sample_id: int
    source: Sample
    target: Sample
    true_class: int
    target_class: int


def build_jobs(ds: ToyDataset, source: Modality, target: Modality, seed: int,
               count: Optional[int] = None) -> List[AttackJob]:
    """
    Held-out source samples paired with a target of a different class
    (seeded derangement). TEXT targets are the class texts; other targets
    are the first held-out sample of the target class.
    """
    if source == target:
        raise InvalidConfigError("source and target modalities must differ")
    _, held = split_indices(len(ds))
    chosen = held if count is None else held[:count]
    targets = derange_classes(ds.labels[chosen], ds.num_classes, seed)
    return [job_for(ds, source, target, int(i), int(t)) for i, t in zip(chosen, targets)]


def job_for(ds: ToyDataset, source: Modality, target: Modality, sample_id: int, target_class: int) -> AttackJob:
    """Rebuild the job of one sample from its id and target class."""
    if target == Modality.TEXT:
        target_sample = ds.class_text(target_class)
    else:
        _, held = split_indices(len(ds))
        target_sample = _representative(ds, target, target_class, held)
    return AttackJob(sample_id=sample_id, source=ds.samples(source)[sample_id], target=target_sample,
                     true_class=int(ds.labels[sample_id]), target_class=target_class)


def _representative(ds: ToyDataset, modality: Modality, class_id: int, indices: Sequence[int]) -> Sample:
    try:
        return class_representative(ds, modality, class_id, indices)
    except EmptyInputError:
        return class_representative(ds, modality, class_id)


def label_set_for(ckpt: EncoderCheckpoint, ds: ToyDataset, modality: Modality) -> LabelSet:
    """TEXT labels are the class texts; other modalities use class-mean embeddings of training samples."""
    if modality == Modality.TEXT:
        return build_label_set(ckpt, [(k, ds.class_text(k)) for k in range(ds.num_classes)])
    train, _ = split_indices(len(ds))
    members: Dict[int, List[Sample]] = {k: [] for k in range(ds.num_classes)}
    for i in train:
        members[int(ds.labels[i])].append(ds.samples(modality)[i])
    return class_mean_label_set(ckpt, members)


def caption_corpus(ckpt: EncoderCheckpoint, ds: ToyDataset) -> List[np.ndarray]:
    """Class-text embeddings; caption k describes class k."""
    return [encode(ckpt, ds.class_text(k)).numpy() for k in range(ds.num_classes)]


def organic_alignment(ckpt: EncoderCheckpoint, ds: ToyDataset, job: AttackJob) -> float:
    """cos(theta(x_t), theta(y_t)) with x_t the first held-out source sample of the target class."""
    _, held = split_indices(len(ds))
    x_t = _representative(ds, job.source.modality, job.target_class, held)
    return grad.cosine_value(encode(ckpt, x_t), encode(ckpt, job.target))


# =============================================================================
# Running attacks
# =============================================================================

def attack_runner(method: AttackMethod, budget: PerturbationBudget, base_cfg: AttackConfig,
                  ckpt: Optional[EncoderCheckpoint] = None,
                  surrogates: Sequence[EncoderCheckpoint] = (),
                  oracle: Optional[QueryOracle] = None,
                  labels: Optional[LabelSet] = None,
                  augs: Sequence[AugmentationSpec] = DEFAULT_AUGMENTATIONS,
                  jpeg: JpegConfig = JpegConfig()) -> AttackFn:
    """
    Bind everything but the job and its seed. Query-based methods use the
    label texts other than the target as non-targets (unless the config
    already lists some) and stop once zero-shot classification succeeds.
    """
    needs_ckpt = method in (AttackMethod.WHITEBOX, AttackMethod.RESISTANT, AttackMethod.EVASION)
    if needs_ckpt and ckpt is None:
        raise InvalidConfigError(f"{method.value} needs a checkpoint")
    if method in (AttackMethod.TRANSFER, AttackMethod.HYBRID) and not surrogates:
        raise InvalidConfigError(f"{method.value} needs surrogates")
    if method in (AttackMethod.QUERY, AttackMethod.HYBRID) and oracle is None:
        raise InvalidConfigError(f"{method.value} needs an oracle")

    def run(job: AttackJob, seed: int) -> AttackResult:
        cfg = base_cfg.model_copy(update={"seed": seed, "method": method})
        success_fn = None
        if method in (AttackMethod.QUERY, AttackMethod.HYBRID):
            if not cfg.non_targets and labels is not None and labels.samples:
                cfg = cfg.model_copy(update={"non_targets": default_non_targets(
                    labels, job.target_class, job.true_class, cfg.exclude_true_label)})
            if labels is not None:
                success_fn = zero_shot_predicate(labels, job.target_class)
        if method == AttackMethod.WHITEBOX:
            return attack_service.pgd_whitebox(job.source, job.target, ckpt, budget, cfg)
        if method == AttackMethod.TRANSFER:
            return attack_service.transfer_ensemble(job.source, job.target, surrogates, budget, cfg)
        if method == AttackMethod.QUERY:
            return attack_service.square_attack(job.source, job.target, oracle, budget, cfg, success_fn)
        if method == AttackMethod.HYBRID:
            return attack_service.hybrid_attack(job.source, job.target, surrogates, oracle, budget, cfg, success_fn)
        if method == AttackMethod.RESISTANT:
            return defense_service.resistant_attack(job.source, job.target, ckpt, budget, cfg, jpeg)
        return defense_service.evasion_attack(job.source, job.target, ckpt, budget, cfg, augs)

    return run


def run_attacks(jobs: Sequence[AttackJob], attack_fn: AttackFn, run_seed: int, workers: int = 1,
                progress: bool = False) -> List[AttackResult]:
    """Results come back in job order whatever the worker count."""
    def one(job: AttackJob) -> AttackResult:
        return attack_fn(job, derive_seed(run_seed, job.sample_id))

    bar = dict(total=len(jobs), disable=not progress, desc="attacks", unit="sample")
    if workers <= 1:
        return [one(job) for job in tqdm(jobs, **bar)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(tqdm(pool.map(one, jobs), **bar))


# =============================================================================
# Evaluation
# =============================================================================

def parse_defense(defense: str) -> Optional[int]:
    """``none`` -> None, ``jpeg75`` -> 75."""
    if defense == "none":
        return None
    if defense.startswith("jpeg") and defense[4:].isdigit():
        return int(defense[4:])
    raise InvalidConfigError(f"unknown defense {defense!r}; expected 'none' or 'jpeg<quality>'")


def defended_embedding(ckpt: EncoderCheckpoint, result: AttackResult, defense: str = "none") -> np.ndarray:
    payload = result.adversarial
    quality = parse_defense(defense)
    if quality is not None:
        payload = jpeg_compress(payload, quality).numpy()
    return embed_tensor(ckpt, result.modality, Tensor.constant(payload.reshape(-1))).numpy()


def evaluate(jobs: Sequence[AttackJob], results: Sequence[AttackResult], ckpt: EncoderCheckpoint,
             ds: ToyDataset, defense: str = "none", task: str = "classify",
             labels: Optional[LabelSet] = None) -> List[ReportRow]:
    """Score every result on ``ckpt`` (after the defense) and build report rows."""
    if len(jobs) != len(results):
        raise InvalidConfigError(f"{len(jobs)} jobs but {len(results)} results")
    if not jobs:
        return []
    target_modality = jobs[0].target.modality
    corpus = None
    if task == "retrieve":
        if target_modality != Modality.TEXT:
            raise InvalidConfigError("retrieval targets must be captions (TEXT)")
        corpus = caption_corpus(ckpt, ds)
        size = len(corpus)
    else:
        labels = labels if labels is not None else label_set_for(ckpt, ds, target_modality)
        size = len(labels)

    def embed_fn(result: AttackResult) -> np.ndarray:
        return defended_embedding(ckpt, result, defense)

    targets = [job.target_class for job in jobs]
    top1 = success_rate(results, labels, targets, 1, embed_fn=embed_fn, task=task, corpus=corpus)
    top5 = success_rate(results, labels, targets, min(5, size), embed_fn=embed_fn, task=task, corpus=corpus)

    rows = []
    for job, result, hit1, hit5 in zip(jobs, results, top1.flags, top5.flags):
        rows.append(ReportRow(
            sample_id=job.sample_id,
            method=result.method.value,
            modality=result.modality.value,
            epsilon=result.epsilon,
            organic_align=organic_alignment(ckpt, ds, job),
            adv_align=grad.cosine_value(embed_fn(result), encode(ckpt, job.target)),
            top1=hit1,
            top5=hit5,
            queries=result.queries_used,
            defense=defense,
            seed=result.seed,
        ))
    logger.info("evaluated %d results (%s, defense=%s): top1 %.1f%%", len(rows), task, defense, 100 * top1.rate)
    return rows
