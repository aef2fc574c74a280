"""conlleval-style slot F1, intent accuracy and per-task / per-group reports."""

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

from openpyxl import Workbook

from groupnlu.errors import ContractError
from groupnlu.models import TaskRegistry


@dataclass(frozen=True)
class ChunkSpan:
    label: str
    start: int
    end: int


def _split_tag(tag: str):
    if len(tag) > 2 and tag[1] == "-" and tag[0] in "BI":
        return tag[0], tag[2:]
    return "O", ""


def extract_chunks(tags: Sequence[str]) -> List[ChunkSpan]:
    """B-X opens a chunk; I-X continues an open X chunk or opens one if none is open."""
    chunks: List[ChunkSpan] = []
    label: Optional[str] = None
    start = 0
    for i, tag in enumerate(tags):
        prefix, kind = _split_tag(tag)
        if prefix == "I" and label == kind:
            continue
        if label is not None:
            chunks.append(ChunkSpan(label, start, i))
            label = None
        if prefix in ("B", "I"):
            label, start = kind, i
    if label is not None:
        chunks.append(ChunkSpan(label, start, len(tags)))
    return chunks


def slot_f1(gold: Sequence[Sequence[str]], predicted: Sequence[Sequence[str]]) -> float:
    """Micro-averaged exact-match chunk F1 as a percentage."""
    if len(gold) != len(predicted):
        raise ContractError(f"{len(gold)} gold sequences but {len(predicted)} predictions")
    correct = found_gold = found_pred = 0
    for sent, (gold_tags, pred_tags) in enumerate(zip(gold, predicted)):
        if len(gold_tags) != len(pred_tags):
            raise ContractError(f"sequence {sent}: {len(gold_tags)} gold tags but {len(pred_tags)} predicted")
        gold_chunks = set(extract_chunks(gold_tags))
        pred_chunks = set(extract_chunks(pred_tags))
        correct += len(gold_chunks & pred_chunks)
        found_gold += len(gold_chunks)
        found_pred += len(pred_chunks)
    if found_gold == 0 and found_pred == 0:
        return 100.0
    precision = correct / found_pred if found_pred else 0.0
    recall = correct / found_gold if found_gold else 0.0
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2 * precision * recall / (precision + recall)


def intent_accuracy(gold: Sequence[str], predicted: Sequence[str]) -> float:
    if len(gold) != len(predicted):
        raise ContractError(f"{len(gold)} gold intents but {len(predicted)} predictions")
    if not gold:
        raise ContractError("intent accuracy of an empty set")
    correct = sum(1 for g, p in zip(gold, predicted) if g == p)
    return 100.0 * correct / len(gold)


def lower_median(values: Sequence[float]) -> float:
    """Median; for an even count the lower of the two middle values."""
    if not values:
        raise ContractError("median of an empty set")
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


@dataclass
class TaskMetrics:
    task_id: str
    group_id: str
    intent_acc: float
    slot_f1: float
    count: int = 0


@dataclass
class Summary:
    intent_acc_mean: float
    intent_acc_median: float
    slot_f1_mean: float
    slot_f1_median: float

    @classmethod
    def of(cls, metrics: Sequence[TaskMetrics]) -> "Summary":
        intents = [m.intent_acc for m in metrics]
        slots = [m.slot_f1 for m in metrics]
        return cls(
            intent_acc_mean=sum(intents) / len(intents),
            intent_acc_median=lower_median(intents),
            slot_f1_mean=sum(slots) / len(slots),
            slot_f1_median=lower_median(slots),
        )


@dataclass
class MetricReport:
    tasks: List[TaskMetrics]
    groups: Dict[str, Summary] = field(default_factory=dict)
    overall: Optional[Summary] = None


def aggregate_report(per_task: Sequence[TaskMetrics], registry: Optional[TaskRegistry] = None) -> MetricReport:
    """Means and medians are taken over per-task values, never over pooled utterances."""
    if not per_task:
        raise ContractError("aggregate_report needs at least one task")
    order = registry.group_ids if registry is not None else []
    for m in per_task:
        if m.group_id not in order:
            order.append(m.group_id)
    groups = {}
    for group_id in order:
        members = [m for m in per_task if m.group_id == group_id]
        if members:
            groups[group_id] = Summary.of(members)
    return MetricReport(tasks=list(per_task), groups=groups, overall=Summary.of(per_task))


def render_table(report: MetricReport) -> str:
    rows = [("task", "group", "intent_acc", "slot_f1")]
    for m in report.tasks:
        rows.append((m.task_id, m.group_id, f"{m.intent_acc:.2f}", f"{m.slot_f1:.2f}"))
    for group_id, summary in report.groups.items():
        rows.append((f"[group mean] {group_id}", group_id, f"{summary.intent_acc_mean:.2f}", f"{summary.slot_f1_mean:.2f}"))
    if report.overall is not None:
        o = report.overall
        rows.append(("[overall mean]", "*", f"{o.intent_acc_mean:.2f}", f"{o.slot_f1_mean:.2f}"))
        rows.append(("[overall median]", "*", f"{o.intent_acc_median:.2f}", f"{o.slot_f1_median:.2f}"))
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    lines = []
    for n, row in enumerate(rows):
        cells = [row[0].ljust(widths[0]), row[1].ljust(widths[1])] + [row[i].rjust(widths[i]) for i in (2, 3)]
        lines.append("  ".join(cells).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def to_records(report: MetricReport) -> List[dict]:
    return [
        {"task": m.task_id, "group": m.group_id, "intent_acc": m.intent_acc, "slot_f1": m.slot_f1}
        for m in report.tasks
    ]


def write_records(report: MetricReport, path: str) -> None:
    dir_name = os.path.dirname(path)
    if dir_name:
        os.makedirs(dir_name, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for record in to_records(report):
            handle.write(json.dumps(record, sort_keys=True) + "\n")
        summary = {"groups": {g: asdict(s) for g, s in report.groups.items()}}
        if report.overall is not None:
            summary["overall"] = asdict(report.overall)
        handle.write(json.dumps(summary, sort_keys=True) + "\n")


def write_workbook(report: MetricReport, path: str) -> None:
    workbook = Workbook()
    sheet = workbook.active
    sheet.title = "tasks"
    sheet.append(["task", "group", "intent_acc", "slot_f1", "utterances"])
    for m in report.tasks:
        sheet.append([m.task_id, m.group_id, round(m.intent_acc, 4), round(m.slot_f1, 4), m.count])
    summary = workbook.create_sheet("summary")
    summary.append(["scope", "intent_acc_mean", "intent_acc_median", "slot_f1_mean", "slot_f1_median"])
    scopes = list(report.groups.items())
    if report.overall is not None:
        scopes.append(("overall", report.overall))
    for scope, s in scopes:
        summary.append([scope, s.intent_acc_mean, s.intent_acc_median, s.slot_f1_mean, s.slot_f1_median])
    workbook.save(path)


def score_predictions(
    task_id: str,
    group_id: str,
    gold_tags: Sequence[Sequence[str]],
    gold_intents: Sequence[str],
    pred_tags: Sequence[Sequence[str]],
    pred_intents: Sequence[str],
) -> TaskMetrics:
    return TaskMetrics(
        task_id=task_id,
        group_id=group_id,
        intent_acc=intent_accuracy(gold_intents, pred_intents),
        slot_f1=slot_f1(gold_tags, pred_tags),
        count=len(gold_intents),
    )


def mean_metrics(metrics: Iterable[TaskMetrics]):
    metrics = list(metrics)
    return (
        sum(m.slot_f1 for m in metrics) / len(metrics),
        sum(m.intent_acc for m in metrics) / len(metrics),
    )
