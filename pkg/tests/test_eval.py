"""
Tests for the evaluation harness: downstream tasks, success accounting,
reports, detector ROC, plots and run storage.

Test coverage:
- Zero-shot classification and retrieval (ordering, tie-breaks, k bounds)
- success_rate (flags, empty input, mismatched targets)
- Label sets and default non-targets
- Batch runs: per-sample seeds independent of the worker count
- CSV reports with the aggregate sidecar
- Detector ROC and SVG plots
- Attack-run storage round trip
"""

import numpy as np
import pytest

from app.core.exceptions import CheckpointFormatError, EmptyInputError, InvalidConfigError, ReportIOError
from app.schemas.attack import AttackMethod, AttackResult
from app.schemas.defense import RocCurve
from app.schemas.report import REPORT_COLUMNS, EvalReport, ReportRow
from app.schemas.sample import Modality, Sample
from app.services import report_service, results_service
from app.services.eval_service import (
    LabelSet,
    build_label_set,
    class_mean_label_set,
    default_non_targets,
    detector_roc,
    retrieve_topk,
    success_rate,
    zero_shot_classify,
)
from app.services.experiment_service import build_jobs, parse_defense, run_attacks
from app.services.plot_service import plot_roc, plot_traces
from app.utils.seed import derive_seed
from tests.conftest import identity_checkpoint

pytestmark = pytest.mark.eval


def label_set(rows, class_ids=None) -> LabelSet:
    rows = np.asarray(rows, dtype=np.float64)
    return LabelSet(class_ids=class_ids or list(range(len(rows))), embeddings=rows)


def fake_result(adversarial, method=AttackMethod.QUERY, queries=0, seed=0) -> AttackResult:
    adversarial = np.asarray(adversarial, dtype=np.float64)
    return AttackResult(method=method, modality=Modality.IMAGE, epsilon=0.1, seed=seed,
                        delta=np.zeros_like(adversarial), adversarial=adversarial, queries_used=queries,
                        trace=[0.5, 0.25])


def row(sample_id=0, method="WHITEBOX", adv=0.9, top1=True, queries=0, defense="none") -> ReportRow:
    return ReportRow(sample_id=sample_id, method=method, modality="IMAGE", epsilon=16 / 255, organic_align=0.3,
                     adv_align=adv, top1=top1, top5=True, queries=queries, defense=defense, seed=7)


# =============================================================================
# Downstream tasks
# =============================================================================

def test_classify_picks_most_similar_label():
    labels = label_set([[1, 0], [0, 1], [-1, 0]])
    assert zero_shot_classify(np.array([0.2, 0.9]), labels) == [1]
    assert zero_shot_classify(np.array([0.2, 0.9]), labels, k=3) == [1, 0, 2]


def test_classify_ties_go_to_lower_class_id():
    """Expected: equal similarity to classes 4 and 2 -> 2 first"""
    labels = label_set([[1, 0], [1, 0]], class_ids=[4, 2])
    assert zero_shot_classify(np.array([1.0, 0.0]), labels, k=2) == [2, 4]


@pytest.mark.parametrize("k", [0, 4])
def test_classify_k_out_of_range_rejected(k):
    with pytest.raises(InvalidConfigError):
        zero_shot_classify(np.array([1.0, 0.0]), label_set([[1, 0], [0, 1], [1, 1]]), k=k)


def test_classify_empty_label_set_rejected():
    with pytest.raises(EmptyInputError):
        zero_shot_classify(np.array([1.0]), LabelSet(class_ids=[], embeddings=np.zeros((0, 1))))


def test_retrieve_orders_by_similarity_with_index_tie_break():
    corpus = [np.array([0.0, 1.0]), np.array([1.0, 0.0]), np.array([2.0, 0.0])]
    assert retrieve_topk(np.array([1.0, 0.1]), corpus, k=3) == [1, 2, 0]


def test_retrieve_empty_corpus_rejected():
    with pytest.raises(EmptyInputError):
        retrieve_topk(np.array([1.0]), [])


def test_label_set_rows_match_encode():
    ckpt = identity_checkpoint(3)
    samples = [(5, Sample(modality=Modality.AUDIO, payload=[0.0, 0.3, 0.4]))]
    labels = build_label_set(ckpt, samples)
    np.testing.assert_allclose(labels.embeddings, [[0.0, 0.6, 0.8]])
    np.testing.assert_array_equal(labels.sample_for(5).payload, [0.0, 0.3, 0.4])


def test_duplicate_label_ids_rejected():
    ckpt = identity_checkpoint(2)
    s = Sample(modality=Modality.AUDIO, payload=[0.5, 0.5])
    with pytest.raises(InvalidConfigError):
        build_label_set(ckpt, [(1, s), (1, s)])


def test_class_mean_label_set_averages_members():
    ckpt = identity_checkpoint(2)
    members = {0: [Sample(modality=Modality.AUDIO, payload=[1.0, 0.0]),
                   Sample(modality=Modality.AUDIO, payload=[0.0, 1.0])]}
    labels = class_mean_label_set(ckpt, members)
    np.testing.assert_allclose(labels.embeddings, [[0.5, 0.5]])
    assert labels.kind == "class_mean"
    with pytest.raises(EmptyInputError):
        class_mean_label_set(ckpt, {0: []})


def test_default_non_targets_skip_target_and_optionally_true_class():
    samples = [Sample(modality=Modality.TEXT, payload=[k]) for k in range(4)]
    labels = LabelSet(class_ids=[0, 1, 2, 3], samples=samples, embeddings=np.eye(4))
    assert [int(s.payload[0]) for s in default_non_targets(labels, 2)] == [0, 1, 3]
    assert [int(s.payload[0]) for s in default_non_targets(labels, 2, 0, exclude_true_label=True)] == [1, 3]


# =============================================================================
# Success accounting
# =============================================================================

def test_success_rate_counts_and_stores_flags():
    labels = label_set([[1, 0], [0, 1]])
    results = [fake_result([1.0, 0.0]), fake_result([0.0, 1.0]), fake_result([0.9, 0.1])]
    report = success_rate(results, labels, [0, 0, 1], embed_fn=lambda r: r.adversarial)
    assert report.flags == [True, False, False]
    assert report.rate == pytest.approx(1 / 3)
    assert results[0].success == {"classify_top1": True}


def test_success_rate_top_k_includes_more_classes():
    labels = label_set([[1, 0], [0, 1]])
    report = success_rate([fake_result([0.9, 0.1])], labels, [1], k=2, embed_fn=lambda r: r.adversarial)
    assert report.rate == 1.0


def test_success_rate_on_retrieval():
    corpus = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
    report = success_rate([fake_result([0.1, 0.9])], None, [1], embed_fn=lambda r: r.adversarial,
                          task="retrieve", corpus=corpus)
    assert report.flags == [True]


def test_success_rate_of_nothing_rejected():
    with pytest.raises(EmptyInputError):
        success_rate([], label_set([[1.0]]), [], embed_fn=lambda r: r.adversarial)


@pytest.mark.parametrize("kwargs", [
    {"targets": [0, 1]},
    {"task": "caption"},
    {"labels": None},
])
def test_success_rate_bad_arguments_rejected(kwargs):
    args = {"labels": label_set([[1, 0]]), "targets": [0], "task": "classify"}
    args.update(kwargs)
    with pytest.raises(InvalidConfigError):
        success_rate([fake_result([1.0, 0.0])], args["labels"], args["targets"], embed_fn=lambda r: r.adversarial,
                     task=args["task"])


@pytest.mark.parametrize("name,expected", [("none", None), ("jpeg75", 75), ("jpeg100", 100)])
def test_parse_defense(name, expected):
    assert parse_defense(name) == expected


def test_unknown_defense_rejected():
    with pytest.raises(InvalidConfigError):
        parse_defense("blur")


# =============================================================================
# Batch runs
# =============================================================================

def test_derived_seeds_are_stable_and_distinct():
    assert derive_seed(3, 10) == derive_seed(3, 10)
    assert len({derive_seed(3, i) for i in range(100)}) == 100
    assert derive_seed(3, 10) != derive_seed(4, 10)


def test_run_results_do_not_depend_on_worker_count(toy_dataset):
    """
    Test the same jobs on one and four workers.

    Expected: identical seeds in job order
    """
    jobs = build_jobs(toy_dataset, Modality.IMAGE, Modality.TEXT, seed=0, count=12)

    def attack(job, seed):
        return fake_result(job.source.payload, seed=seed)

    serial = run_attacks(jobs, attack, run_seed=9, workers=1)
    parallel = run_attacks(jobs, attack, run_seed=9, workers=4)
    assert [r.seed for r in serial] == [r.seed for r in parallel]
    assert [r.seed for r in serial] == [derive_seed(9, job.sample_id) for job in jobs]


def test_jobs_never_target_the_true_class(toy_dataset):
    jobs = build_jobs(toy_dataset, Modality.IMAGE, Modality.TEXT, seed=3)
    assert jobs
    assert all(job.true_class != job.target_class for job in jobs)
    assert all(job.target.class_id == job.target_class for job in jobs)


def test_same_modality_jobs_rejected(toy_dataset):
    with pytest.raises(InvalidConfigError):
        build_jobs(toy_dataset, Modality.AUDIO, Modality.AUDIO, seed=0)


# =============================================================================
# Reports
# =============================================================================

def test_report_round_trip(tmp_path):
    report = EvalReport(rows=[row(0), row(1, adv=0.7, top1=False)])
    path = report_service.emit_report(report, tmp_path / "report.csv")
    assert path.read_text().splitlines()[0] == ",".join(REPORT_COLUMNS)
    loaded = report_service.load_report(path)
    assert loaded.rows == report.rows
    assert loaded.price_per_query == report.price_per_query


def test_aggregates_use_sample_standard_deviation():
    aggregates = report_service.aggregate(EvalReport(rows=[row(0, adv=0.9), row(1, adv=0.7)]))
    assert aggregates.count == 2
    assert aggregates.means["adv_align"] == pytest.approx(0.8)
    assert aggregates.stds["adv_align"] == pytest.approx(np.std([0.9, 0.7], ddof=1))
    assert aggregates.means["top1"] == 1.0


def test_single_row_has_zero_spread():
    aggregates = report_service.aggregate(EvalReport(rows=[row()]))
    assert all(value == 0.0 for value in aggregates.stds.values())


def test_empty_report_writes_header_only(tmp_path):
    path = report_service.emit_report(EvalReport(), tmp_path / "empty.csv")
    assert path.read_text().splitlines() == [",".join(REPORT_COLUMNS)]
    assert report_service.load_summary(path).count == 0
    assert "(no rows)" in report_service.format_table(report_service.load_summary(path))


def test_cost_per_hundred_samples():
    """
    Test query rows averaging 1000 queries at $0.00006 per query.

    Expected: $6.00 per 100 samples; white-box rows carry no cost
    """
    rows = [row(0, method="QUERY", queries=500), row(1, method="QUERY", queries=1500), row(2)]
    aggregates = report_service.aggregate(EvalReport(rows=rows, price_per_query=0.00006))
    assert aggregates.cost_per_100 == pytest.approx(6.0)
    by_method = {g.method: g for g in aggregates.groups}
    assert by_method["QUERY"].cost_per_100 == pytest.approx(6.0)
    assert by_method["WHITEBOX"].cost_per_100 is None


def test_groups_split_by_defense():
    aggregates = report_service.aggregate(EvalReport(rows=[row(0), row(0, defense="jpeg75", top1=False)]))
    assert [(g.defense, g.means["top1"]) for g in aggregates.groups] == [("jpeg75", 0.0), ("none", 1.0)]


def test_table_lists_every_group():
    aggregates = report_service.aggregate(EvalReport(rows=[row(0), row(1, method="QUERY", queries=10)]))
    table = report_service.format_table(aggregates)
    assert "WHITEBOX" in table and "QUERY" in table


def test_bad_header_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ReportIOError):
        report_service.load_report(path)


def test_missing_report_rejected(tmp_path):
    with pytest.raises(ReportIOError):
        report_service.load_report(tmp_path / "missing.csv")


def test_unwritable_report_rejected(tmp_path):
    with pytest.raises(ReportIOError):
        report_service.emit_report(EvalReport(rows=[row()]), tmp_path / "no" / "such" / "dir.csv")


# =============================================================================
# Detector ROC and plots
# =============================================================================

def test_perfectly_separated_scores_give_unit_auc():
    curve = detector_roc([0.95, 0.9, 0.85], [0.2, 0.3])
    assert curve.auc == 1.0
    assert curve.fpr[0] == 0.0 and curve.tpr[-1] == 1.0
    assert all(-2.0 <= t <= 2.0 for t in curve.thresholds)


def test_inverted_scores_give_zero_auc():
    assert detector_roc([0.1], [0.9]).auc == 0.0


def test_roc_needs_both_pools():
    with pytest.raises(EmptyInputError):
        detector_roc([], [0.5])


def test_plots_are_byte_deterministic(tmp_path):
    results = [fake_result([0.1, 0.2]), fake_result([0.3, 0.4])]
    first = plot_traces(results, tmp_path / "a.svg").read_bytes()
    second = plot_traces(results, tmp_path / "b.svg").read_bytes()
    assert first == second
    assert first.lstrip().startswith(b"<?xml")

    curve = RocCurve(fpr=[0.0, 0.5, 1.0], tpr=[0.0, 1.0, 1.0], thresholds=[2.0, 0.5, 0.1], auc=0.75)
    assert plot_roc(curve, tmp_path / "c.svg").read_bytes() == plot_roc(curve, tmp_path / "d.svg").read_bytes()


# =============================================================================
# Attack-run storage
# =============================================================================

def test_saved_run_loads_back(tmp_path, toy_dataset):
    jobs = build_jobs(toy_dataset, Modality.IMAGE, Modality.TEXT, seed=1, count=3)
    results = [fake_result(job.source.payload, seed=i) for i, job in enumerate(jobs)]
    results[0].success["classify_top1"] = True
    results_service.save_run(jobs, results, tmp_path)

    loaded_jobs, loaded = results_service.load_run(tmp_path, toy_dataset)
    assert [j.sample_id for j in loaded_jobs] == [j.sample_id for j in jobs]
    assert [j.target_class for j in loaded_jobs] == [j.target_class for j in jobs]
    for before, after in zip(results, loaded):
        np.testing.assert_array_equal(before.adversarial, after.adversarial)
        assert after.persisted() == before.persisted()


def test_run_with_mismatched_payloads_rejected(tmp_path, toy_dataset):
    jobs = build_jobs(toy_dataset, Modality.IMAGE, Modality.TEXT, seed=1, count=2)
    results_service.save_run(jobs, [fake_result(j.source.payload) for j in jobs], tmp_path)
    records = (tmp_path / results_service.RESULTS_FILE).read_text()
    (tmp_path / results_service.RESULTS_FILE).write_text(records.replace("[\n  {", "[\n  {}, {", 1))
    with pytest.raises(CheckpointFormatError):
        results_service.load_results(tmp_path)


def test_missing_run_rejected(tmp_path):
    with pytest.raises(FileNotFoundError):
        results_service.load_results(tmp_path)
