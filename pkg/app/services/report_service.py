"""CSV reports with a JSON aggregate sidecar."""
import csv
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.core.exceptions import ReportIOError
from app.schemas.report import (
    METRIC_COLUMNS,
    QUERY_METHODS,
    REPORT_COLUMNS,
    EvalReport,
    GroupAggregate,
    ReportAggregates,
    ReportRow,
)

logger = logging.getLogger(__name__)

SUMMARY_SUFFIX = ".summary.json"


def summary_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + SUMMARY_SUFFIX)


def _metric(row: ReportRow, column: str) -> float:
    return float(getattr(row, column))


def _stats(rows: Sequence[ReportRow]):
    means, stds = {}, {}
    for column in METRIC_COLUMNS:
        values = np.array([_metric(r, column) for r in rows])
        means[column] = float(values.mean())
        # sample standard deviation; a single row has none
        stds[column] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return means, stds


def _cost_per_100(rows: Sequence[ReportRow], price: float) -> Optional[float]:
    queried = [r.queries for r in rows if r.method in QUERY_METHODS]
    if not queried:
        return None
    return float(np.mean(queried)) * price * 100.0


def aggregate(report: EvalReport) -> ReportAggregates:
    rows = report.rows
    if not rows:
        return ReportAggregates()
    means, stds = _stats(rows)
    groups: Dict[tuple, List[ReportRow]] = {}
    for row in rows:
        groups.setdefault((row.method, row.modality, row.epsilon, row.defense), []).append(row)
    group_aggs = []
    for key in sorted(groups):
        members = groups[key]
        g_means, g_stds = _stats(members)
        group_aggs.append(GroupAggregate(
            method=key[0], modality=key[1], epsilon=key[2], defense=key[3], count=len(members),
            means=g_means, stds=g_stds, cost_per_100=_cost_per_100(members, report.price_per_query),
        ))
    return ReportAggregates(
        count=len(rows), means=means, stds=stds,
        cost_per_100=_cost_per_100(rows, report.price_per_query), groups=group_aggs,
    )


def _cell(row: ReportRow, column: str) -> str:
    value = getattr(row, column)
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_report(report: EvalReport, path) -> Path:
    """Write the CSV (fixed header order) and its aggregate sidecar; returns the CSV path."""
    path = Path(path)
    aggregates = aggregate(report)
    try:
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(REPORT_COLUMNS)
            for row in report.rows:
                writer.writerow([_cell(row, c) for c in REPORT_COLUMNS])
        summary = {"pricePerQuery": report.price_per_query, "aggregates": aggregates.model_dump()}
        summary_path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise ReportIOError(path, exc.strerror or str(exc)) from exc
    logger.info("wrote %d report rows to %s", len(report.rows), path)
    return path


def _parse_row(record: Dict[str, str]) -> ReportRow:
    return ReportRow(
        sample_id=int(record["sample_id"]),
        method=record["method"],
        modality=record["modality"],
        epsilon=float(record["epsilon"]),
        organic_align=float(record["organic_align"]),
        adv_align=float(record["adv_align"]),
        top1=record["top1"] == "1",
        top5=record["top5"] == "1",
        queries=int(record["queries"]),
        defense=record["defense"],
        seed=int(record["seed"]),
    )


def load_report(path, price_per_query: Optional[float] = None) -> EvalReport:
    """Parse a CSV written by ``emit_report``; the price comes from the sidecar when present."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as handle:
            reader = csv.DictReader(handle)
            if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
                raise ReportIOError(path, f"unexpected header {reader.fieldnames}")
            rows = [_parse_row(record) for record in reader]
        if price_per_query is None and summary_path(path).exists():
            price_per_query = json.loads(summary_path(path).read_text(encoding="utf-8"))["pricePerQuery"]
    except (OSError, ValueError, KeyError) as exc:
        if isinstance(exc, ReportIOError):
            raise
        raise ReportIOError(path, str(exc)) from exc
    report = EvalReport(rows=rows)
    if price_per_query is not None:
        report.price_per_query = price_per_query
    return report


def load_summary(path) -> ReportAggregates:
    try:
        data = json.loads(summary_path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ReportIOError(summary_path(path), str(exc)) from exc
    return ReportAggregates.model_validate(data["aggregates"])


def format_table(aggregates: ReportAggregates) -> str:
    """Plain-text table of the per-group aggregates."""
    header = f"{'method':<10} {'modality':<8} {'eps':>9} {'defense':<8} {'n':>4} " \
             f"{'organic':>15} {'adversarial':>15} {'top1':>6} {'top5':>6} {'queries':>10} {'$/100':>9}"
    lines = [header, "-" * len(header)]
    for g in aggregates.groups:
        cost = "" if g.cost_per_100 is None else f"{g.cost_per_100:.4f}"
        lines.append(
            f"{g.method:<10} {g.modality:<8} {g.epsilon:>9.5f} {g.defense:<8} {g.count:>4} "
            f"{g.means['organic_align']:>7.4f}+-{g.stds['organic_align']:<6.4f} "
            f"{g.means['adv_align']:>7.4f}+-{g.stds['adv_align']:<6.4f} "
            f"{100 * g.means['top1']:>5.1f}% {100 * g.means['top5']:>5.1f}% "
            f"{g.means['queries']:>10.1f} {cost:>9}"
        )
    if not aggregates.groups:
        lines.append("(no rows)")
    return "\n".join(lines)
