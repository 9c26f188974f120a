"""Answer metrics, exploration efficiency/coverage, grouped reports and the t statistic."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .kg import KnowledgeGraph, TaskInstance, normalize
from .rewards import f1_score
from .trace import Trace, extract_mentioned_triples

__all__ = [
    "EvalRecord",
    "MetricSummary",
    "answer_metrics",
    "build_record",
    "exploration_metrics",
    "summarize",
    "grouped_report",
    "one_sample_ttest",
    "format_table",
]

UNLABELED = "unlabeled"


@dataclass(frozen=True)
class EvalRecord:
    id: str
    hit1: int
    f1: float
    n_pred_triples: int = 0
    n_correct_triples: int = 0
    n_gold_triples: int = 0
    group_labels: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.n_correct_triples > min(self.n_pred_triples, self.n_gold_triples):
            raise ValueError(f"record {self.id!r}: correct triples exceed predicted or gold count")


@dataclass
class MetricSummary:
    hit1_mean: float
    f1_mean: float
    efficiency: float | None
    coverage: float | None
    n_samples: int
    n_skipped_efficiency: int
    n_exploration: int = 0
    per_group: dict[str, dict[str, "MetricSummary"]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_group"] = {
            key: {label: s.to_dict() for label, s in groups.items()} for key, groups in self.per_group.items()
        }
        return d


def answer_metrics(trace: Trace, gold: Iterable[str]) -> tuple[int, float]:
    pred = trace.predicted
    gold = {normalize(g) for g in gold}
    hit1 = int(bool(pred & gold))
    return hit1, f1_score(pred, gold)[0]


def build_record(trace: Trace, task: TaskInstance, graph: KnowledgeGraph | None = None) -> EvalRecord:
    """Score one trace; predicted triples are the graph triples mentioned in the think block.

    The task's own subgraph is preferred over ``graph`` when present.
    """
    hit1, f1 = answer_metrics(trace, task.gold_answers)
    gold = task.gold_triples()
    g = task.subgraph if task.subgraph is not None else graph
    pred = extract_mentioned_triples(trace.think, g.triples) if g is not None else set()
    return EvalRecord(
        id=task.id,
        hit1=hit1,
        f1=f1,
        n_pred_triples=len(pred),
        n_correct_triples=len(pred & gold),
        n_gold_triples=len(gold),
        group_labels={k: str(v) for k, v in task.labels.items()},
    )


def exploration_metrics(records: Sequence[EvalRecord]) -> MetricSummary:
    """Efficiency (skipping zero-correct records) and coverage over records with gold triples."""
    if not records:
        raise ValueError("no records to summarize")
    bad = [r.id for r in records if r.n_gold_triples <= 0]
    if bad:
        raise ValueError(f"records without gold triples: {', '.join(bad[:5])}")
    ratios = [r.n_pred_triples / r.n_correct_triples for r in records if r.n_correct_triples > 0]
    coverage = sum(r.n_correct_triples / r.n_gold_triples for r in records) / len(records)
    return MetricSummary(
        hit1_mean=sum(r.hit1 for r in records) / len(records),
        f1_mean=sum(r.f1 for r in records) / len(records),
        efficiency=sum(ratios) / len(ratios) if ratios else None,
        coverage=coverage,
        n_samples=len(records),
        n_skipped_efficiency=len(records) - len(ratios),
        n_exploration=len(records),
    )


def summarize(records: Sequence[EvalRecord]) -> MetricSummary:
    """Answer metrics over all records; exploration metrics over those with gold triples."""
    if not records:
        raise ValueError("no records to summarize")
    explored = [r for r in records if r.n_gold_triples > 0]
    if explored:
        ex = exploration_metrics(explored)
        eff, cov, skipped = ex.efficiency, ex.coverage, ex.n_skipped_efficiency
    else:
        eff = cov = None
        skipped = 0
    return MetricSummary(
        hit1_mean=sum(r.hit1 for r in records) / len(records),
        f1_mean=sum(r.f1 for r in records) / len(records),
        efficiency=eff,
        coverage=cov,
        n_samples=len(records),
        n_skipped_efficiency=skipped,
        n_exploration=len(explored),
    )


def grouped_report(records: Sequence[EvalRecord], group_key: str) -> MetricSummary:
    """Overall summary with ``per_group[group_key]`` holding one summary per label."""
    buckets: dict[str, list[EvalRecord]] = defaultdict(list)
    for r in records:
        buckets[str(r.group_labels.get(group_key, UNLABELED))].append(r)
    overall = summarize(records)
    overall.per_group[group_key] = {label: summarize(rs) for label, rs in sorted(buckets.items())}
    return overall


def one_sample_ttest(model_mean: float, model_sd: float, n_runs: int, baseline: float) -> tuple[float, int]:
    """t statistic and degrees of freedom of ``model_mean`` against a fixed baseline."""
    if n_runs < 2:
        raise ValueError("n_runs must be >= 2")
    if model_sd <= 0:
        raise ValueError("model_sd must be > 0")
    return (model_mean - baseline) / (model_sd / math.sqrt(n_runs)), n_runs - 1


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.4f}"


def format_table(summary: MetricSummary) -> str:
    """Fixed-width text table of a summary and its groups."""
    head = f"{'group':<24}{'n':>6}{'hit@1':>10}{'f1':>10}{'effic.':>10}{'cover.':>10}{'skipped':>9}"
    rows = [head, "-" * len(head)]

    def row(name, s):
        rows.append(
            f"{name[:24]:<24}{s.n_samples:>6}{_fmt(s.hit1_mean):>10}{_fmt(s.f1_mean):>10}"
            f"{_fmt(s.efficiency):>10}{_fmt(s.coverage):>10}{s.n_skipped_efficiency:>9}"
        )

    row("overall", summary)
    for key, groups in summary.per_group.items():
        for label, s in groups.items():
            row(f"{key}={label}", s)
    return "\n".join(rows)
