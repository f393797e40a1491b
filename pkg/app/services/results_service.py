"""
Attack run storage: ``results.json`` (one persisted record per sample) and
``perturbed.bin`` (the adversarial payloads and their deltas).
"""
import json
import logging
from pathlib import Path
from typing import List, Sequence, Tuple

from app.core.container import read_container, write_container
from app.core.exceptions import CheckpointFormatError
from app.schemas.attack import AttackResult
from app.schemas.sample import Modality
from app.services.dataset_service import ToyDataset
from app.services.experiment_service import AttackJob, job_for

logger = logging.getLogger(__name__)

RESULTS_FILE = "results.json"
PERTURBED_FILE = "perturbed.bin"
PERTURBED_MAGIC = b"ILLUADVS"
PERTURBED_FORMAT_VERSION = 1

_JOB_FIELDS = ("sampleId", "trueClass", "targetClass", "targetModality")


def _record(job: AttackJob, result: AttackResult) -> dict:
    record = result.persisted()
    record.update({
        "sampleId": job.sample_id,
        "trueClass": job.true_class,
        "targetClass": job.target_class,
        "targetModality": job.target.modality.value,
    })
    return record


def save_run(jobs: Sequence[AttackJob], results: Sequence[AttackResult], out_dir) -> List[Path]:
    """Write both files into ``out_dir``; returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = [_record(job, result) for job, result in zip(jobs, results)]
    results_path = out_dir / RESULTS_FILE
    results_path.write_text(json.dumps(records, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    arrays = []
    for i, result in enumerate(results):
        arrays.append((f"adversarial/{i}", result.adversarial))
        arrays.append((f"delta/{i}", result.delta))
    perturbed_path = write_container(out_dir / PERTURBED_FILE, PERTURBED_MAGIC, PERTURBED_FORMAT_VERSION,
                                     {"kind": "attack-run", "count": len(results)}, arrays)
    logger.info("saved %d attack results to %s", len(results), out_dir)
    return [results_path, perturbed_path]


def _read(out_dir) -> Tuple[List[dict], List[AttackResult]]:
    out_dir = Path(out_dir)
    results_path = out_dir / RESULTS_FILE
    if not results_path.is_file():
        raise FileNotFoundError(f"no such file: {results_path}")
    records = json.loads(results_path.read_text(encoding="utf-8"))
    _, header, arrays = read_container(out_dir / PERTURBED_FILE, PERTURBED_MAGIC, [PERTURBED_FORMAT_VERSION])
    if header.get("count") != len(records):
        raise CheckpointFormatError(f"{out_dir}: {len(records)} records but {header.get('count')} payloads")

    results = []
    for i, record in enumerate(records):
        fields = {k: v for k, v in record.items() if k not in _JOB_FIELDS}
        results.append(AttackResult.model_validate({
            **fields,
            "adversarial": arrays[f"adversarial/{i}"],
            "delta": arrays[f"delta/{i}"],
        }))
    return records, results


def load_results(out_dir) -> List[AttackResult]:
    return _read(out_dir)[1]


def load_run(out_dir, ds: ToyDataset) -> Tuple[List[AttackJob], List[AttackResult]]:
    """Inverse of ``save_run``; jobs are rebuilt against ``ds``."""
    records, results = _read(out_dir)
    jobs = [
        job_for(ds, result.modality, Modality(record["targetModality"]), int(record["sampleId"]),
                int(record["targetClass"]))
        for record, result in zip(records, results)
    ]
    return jobs, results
