"""Recall@K and single-positive average precision over ranked lists."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import DataError, ValidationError

DEFAULT_KS = (1, 5, 10)


def recall_at_k(ranked: Sequence[str], gt_id: str, k: int) -> int:
    if k < 1:
        raise ValidationError(f"K must be >= 1, got {k}")
    return int(gt_id in ranked[:k])


def average_precision(ranked: Sequence[str], gt_id: str) -> float:
    """Reciprocal rank of the single positive; 0.0 when it was never retrieved."""
    if len(set(ranked)) != len(ranked):
        raise DataError("ranked list contains duplicate ids")
    for pos, rid in enumerate(ranked, start=1):
        if rid == gt_id:
            return 1.0 / pos
    return 0.0


def gt_rank(ranked: Sequence[str], gt_id: str) -> int | None:
    try:
        return list(ranked).index(gt_id) + 1
    except ValueError:
        return None


@dataclass
class QueryEval:
    query_id: str
    gt_rank: int | None
    ap: float


@dataclass
class EvalReport:
    n_queries: int
    recall_at: dict[int, float]
    ap: float
    per_query: list[QueryEval] = field(default_factory=list)

    def summary_row(self, run_id: str) -> dict:
        row = {"run_id": run_id, "n_queries": self.n_queries}
        for k in DEFAULT_KS:
            row[f"R@{k}"] = f"{self.recall_at[k]:.2f}" if k in self.recall_at else ""
        row["AP"] = f"{self.ap:.2f}"
        return row

    def to_json(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "ap": self.ap,
        }


def evaluate_run(
    results: Iterable[tuple[str, Sequence[str], str]] | Iterable[tuple[Sequence[str], str]],
    ks: Sequence[int] = DEFAULT_KS,
) -> EvalReport:
    """Aggregate Recall@K and AP (both as percentages) over queries.

    ``results`` items are ``(ranked_ids, gt_id)`` or ``(query_id, ranked_ids, gt_id)``.
    """
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ValidationError(f"invalid K list {ks}")
    hits = {k: 0 for k in ks}
    ap_sum = 0.0
    per_query = []
    for i, item in enumerate(results):
        if len(item) == 3:
            qid, ranked, gt = item
        else:
            ranked, gt = item
            qid = str(i)
        ranked = list(ranked)
        ap = average_precision(ranked, gt)
        for k in ks:
            hits[k] += recall_at_k(ranked, gt, k)
        ap_sum += ap
        per_query.append(QueryEval(qid, gt_rank(ranked, gt), ap))
    n = len(per_query)
    if n == 0:
        raise DataError("cannot evaluate an empty run")
    return EvalReport(
        n_queries=n,
        recall_at={k: 100.0 * hits[k] / n for k in ks},
        ap=100.0 * ap_sum / n,
        per_query=per_query,
    )


SUMMARY_COLUMNS = ["run_id", "n_queries", "R@1", "R@5", "R@10", "AP"]


def summary_csv(reports: Sequence[tuple[str, EvalReport]]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    w.writeheader()
    for run_id, rep in reports:
        w.writerow(rep.summary_row(run_id))
    return buf.getvalue()


def delta_csv(baseline: EvalReport, reranked: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "retriever", "reranked", "delta"])
    for k in DEFAULT_KS:
        if k in baseline.recall_at and k in reranked.recall_at:
            b, r = baseline.recall_at[k], reranked.recall_at[k]
            w.writerow([f"R@{k}", f"{b:.2f}", f"{r:.2f}", f"{r - b:.2f}"])
    w.writerow(["AP", f"{baseline.ap:.2f}", f"{reranked.ap:.2f}", f"{reranked.ap - baseline.ap:.2f}"])
    return buf.getvalue()


def per_query_jsonl(report: EvalReport) -> str:
    return "".join(
        json.dumps({"query": q.query_id, "gt_rank": q.gt_rank, "ap": q.ap}) + "\n"
        for q in report.per_query
    )
