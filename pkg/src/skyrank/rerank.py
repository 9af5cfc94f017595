"""Inference-time re-ranking of retrieved candidates with a trained scorer."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .embedding import Embedding, Gallery, atomic_write_text, retrieve_top_m
from .errors import DataError, NumericError, ValidationError
from .scorer import ScorerParams, score_pairs

DEFAULT_M_RETRIEVE = 20
DEFAULT_K_RERANK = 10


@dataclass
class RerankResult:
    query_id: str
    original_order: list[str]
    scores: list[float]
    reranked_order: list[str]
    predicted_id: str
    # retrieval positions k_rerank+1..m, left in retrieval order
    tail: list[str] = field(default_factory=list)

    def full_ranking(self) -> list[str]:
        return list(self.reranked_order) + list(self.tail)

    def retrieval_ranking(self) -> list[str]:
        return list(self.original_order) + list(self.tail)

    def to_json(self) -> str:
        return json.dumps(
            {
                "query": self.query_id,
                "original_order": self.original_order,
                "scores": self.scores,
                "reranked_order": self.reranked_order,
                "predicted": self.predicted_id,
                "tail": self.tail,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "RerankResult":
        try:
            obj = json.loads(line)
            res = cls(
                obj["query"],
                list(obj["original_order"]),
                [float(s) for s in obj["scores"]],
                list(obj["reranked_order"]),
                obj["predicted"],
                list(obj.get("tail", [])),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad rerank record: {exc}") from exc
        if sorted(res.reranked_order) != sorted(res.original_order) or res.predicted_id != res.reranked_order[0]:
            raise DataError(f"rerank record {res.query_id!r} is inconsistent")
        return res


Scorer = Callable[[Embedding, Sequence[Embedding]], Sequence[float]]


def score_candidates(params: ScorerParams, query: Embedding, candidates: Sequence[Embedding]) -> np.ndarray:
    if not candidates:
        raise ValidationError("no candidates to score")
    q = np.repeat(query.vector[None, :], len(candidates), axis=0)
    c = np.stack([e.vector for e in candidates])
    return score_pairs(params, q, c)


def rerank(scores: Sequence[float], original_order: Sequence[str], query_id: str = "") -> RerankResult:
    """Stable descending sort by score; equal scores keep retrieval order."""
    scores = [float(s) for s in scores]
    original_order = list(original_order)
    if len(scores) != len(original_order):
        raise ValidationError(f"{len(scores)} scores for {len(original_order)} candidates")
    if not scores:
        raise ValidationError("nothing to rerank")
    if not all(math.isfinite(s) for s in scores):
        raise NumericError("non-finite score")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    reranked = [original_order[i] for i in order]
    return RerankResult(query_id, original_order, scores, reranked, reranked[0])


def param_scorer(params: ScorerParams) -> Scorer:
    return lambda query, cands: score_candidates(params, query, cands)


def rerank_run(
    scorer: ScorerParams | Scorer,
    queries: Sequence[Embedding],
    gallery: Gallery,
    m_retrieve: int = DEFAULT_M_RETRIEVE,
    k_rerank: int = DEFAULT_K_RERANK,
    workers: int = 1,
) -> list[RerankResult]:
    """Retrieve top-m per query, re-score the first k_rerank, and re-order them.

    ``scorer`` is trained params or any callable ``(query, candidates) -> scores``.
    Results come back in query order regardless of ``workers``.
    """
    if not 1 <= k_rerank <= m_retrieve <= len(gallery):
        raise ValidationError(
            f"need 1 <= k_rerank ({k_rerank}) <= m_retrieve ({m_retrieve}) <= gallery size ({len(gallery)})"
        )
    score_fn = param_scorer(scorer) if isinstance(scorer, ScorerParams) else scorer

    def one(query: Embedding) -> RerankResult:
        retrieved = retrieve_top_m(gallery, query, m_retrieve).ids
        head, tail = retrieved[:k_rerank], retrieved[k_rerank:]
        scores = score_fn(query, [gallery[c] for c in head])
        res = rerank(scores, head, query.id)
        res.tail = tail
        return res

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, queries))
    return [one(q) for q in queries]


def batch_rerank_run(
    params: ScorerParams,
    queries: Sequence[Embedding],
    gallery: Gallery,
    m_retrieve: int = DEFAULT_M_RETRIEVE,
    k_rerank: int = DEFAULT_K_RERANK,
) -> list[RerankResult]:
    """Same output as ``rerank_run`` with params, but scores every pair in one batched pass."""
    if not 1 <= k_rerank <= m_retrieve <= len(gallery):
        raise ValidationError(
            f"need 1 <= k_rerank ({k_rerank}) <= m_retrieve ({m_retrieve}) <= gallery size ({len(gallery)})"
        )
    retrieved = [retrieve_top_m(gallery, q, m_retrieve).ids for q in queries]
    if not queries:
        return []
    q_rows = np.repeat(np.stack([q.vector for q in queries]), k_rerank, axis=0)
    c_rows = np.stack([gallery[c].vector for ids in retrieved for c in ids[:k_rerank]])
    scores = score_pairs(params, q_rows, c_rows).reshape(len(queries), k_rerank)
    out = []
    for q, ids, s in zip(queries, retrieved, scores):
        res = rerank(s, ids[:k_rerank], q.id)
        res.tail = ids[k_rerank:]
        out.append(res)
    return out


def write_results(path, results: Sequence[RerankResult]) -> None:
    atomic_write_text(path, "".join(r.to_json() + "\n" for r in results))


def read_results(path) -> list[RerankResult]:
    try:
        lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return [RerankResult.from_json(ln) for ln in lines]
