"""Ranking-dataset curation: top-m retrieval with ground-truth handling, plus the manifest format."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .embedding import (
    Embedding,
    Gallery,
    RetrievalResult,
    atomic_write_text,
    retrieve_top_m,
)
from .errors import DataError, ValidationError

MANIFEST_FORMAT = "skyrank-manifest"
MANIFEST_VERSION = 1
DEFAULT_M = 20


@dataclass(frozen=True)
class RankSample:
    query_id: str
    gt_id: str
    candidate_ids: tuple[str, ...]
    candidate_sims: tuple[float, ...]

    def validate(self, m: int) -> None:
        if len(self.candidate_ids) != m - 1:
            raise DataError(
                f"sample {self.query_id!r}: {len(self.candidate_ids)} candidates, expected {m - 1}"
            )
        if len(self.candidate_sims) != len(self.candidate_ids):
            raise DataError(f"sample {self.query_id!r}: cands/sims length mismatch")
        if self.gt_id in self.candidate_ids:
            raise DataError(f"sample {self.query_id!r}: ground truth {self.gt_id!r} among candidates")
        if len(set(self.candidate_ids)) != len(self.candidate_ids):
            raise DataError(f"sample {self.query_id!r}: duplicate candidate ids")
        sims = self.candidate_sims
        if any(sims[i] < sims[i + 1] for i in range(len(sims) - 1)):
            raise DataError(f"sample {self.query_id!r}: candidate similarities not non-increasing")


@dataclass(frozen=True)
class RankDataset:
    samples: tuple[RankSample, ...]
    m: int
    gallery_sha256: str
    gallery_path: str | None = field(default=None, compare=False)

    def validate(self, gallery: Gallery | None = None) -> None:
        if self.m < 2:
            raise DataError(f"manifest m must be >= 2, got {self.m}")
        for s in self.samples:
            s.validate(self.m)
        if gallery is not None:
            digest = gallery_sha256(gallery)
            if digest != self.gallery_sha256:
                raise DataError("manifest was curated against a different gallery (checksum mismatch)")
            for s in self.samples:
                for rid in (s.gt_id, *s.candidate_ids):
                    if rid not in gallery:
                        raise DataError(f"sample {s.query_id!r}: id {rid!r} not in gallery")

    def __len__(self):
        return len(self.samples)


def curate_candidates(retrieved: RetrievalResult | Sequence[str], gt_id: str, m: int) -> list[str]:
    """Reduce a top-m retrieval to exactly m-1 ground-truth-free candidates.

    If the ground truth was retrieved it is removed; otherwise the m-th
    (least similar) candidate is dropped. Order is preserved either way.
    """
    ids = retrieved.ids if isinstance(retrieved, RetrievalResult) else list(retrieved)
    if m < 2:
        raise ValidationError(f"m must be >= 2, got {m}")
    if len(ids) != m:
        raise DataError(f"expected {m} retrieved candidates, got {len(ids)}")
    if gt_id in ids:
        return [c for c in ids if c != gt_id]
    return ids[:-1]


def build_rank_sample(query: Embedding, gallery: Gallery, gt_id: str, m: int = DEFAULT_M) -> RankSample:
    if gt_id not in gallery:
        raise DataError(f"query {query.id!r}: ground truth {gt_id!r} is not in the gallery")
    retrieved = retrieve_top_m(gallery, query, m)
    sim_of = dict(retrieved.ranked)
    cands = curate_candidates(retrieved, gt_id, m)
    return RankSample(query.id, gt_id, tuple(cands), tuple(sim_of[c] for c in cands))


def build_rank_dataset(
    queries: Sequence[Embedding],
    gallery: Gallery,
    gt_map: Mapping[str, str],
    m: int = DEFAULT_M,
    gallery_path: str | None = None,
) -> RankDataset:
    samples = []
    for q in queries:
        if q.id not in gt_map:
            raise DataError(f"query {q.id!r} has no ground-truth entry")
        samples.append(build_rank_sample(q, gallery, gt_map[q.id], m))
    return RankDataset(tuple(samples), m, gallery_sha256(gallery), gallery_path)


def gallery_sha256(gallery: Gallery) -> str:
    """Checksum of the gallery's canonical serialization (header + records, in order)."""
    h = hashlib.sha256()
    h.update(json.dumps({"dim": gallery.dim}).encode())
    for e in gallery:
        h.update(b"\n")
        h.update(json.dumps({"id": e.id, "view": e.view.value, "vec": [float(x) for x in e.vector]}).encode())
    return h.hexdigest()


def write_manifest(dataset: RankDataset, path: str | os.PathLike) -> None:
    dataset.validate()
    lines = [
        json.dumps(
            {
                "format": MANIFEST_FORMAT,
                "version": MANIFEST_VERSION,
                "m": dataset.m,
                "gallery_sha256": dataset.gallery_sha256,
            }
        )
    ]
    for s in dataset.samples:
        lines.append(
            json.dumps(
                {
                    "query": s.query_id,
                    "gt": s.gt_id,
                    "cands": list(s.candidate_ids),
                    "sims": [float(x) for x in s.candidate_sims],
                }
            )
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_manifest(path: str | os.PathLike) -> RankDataset:
    path = Path(path)
    try:
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise DataError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: bad header: {exc}") from exc
    if (
        not isinstance(header, dict)
        or header.get("format") != MANIFEST_FORMAT
        or header.get("version") != MANIFEST_VERSION
        or not isinstance(header.get("m"), int)
        or not isinstance(header.get("gallery_sha256"), str)
    ):
        raise DataError(f"{path}: not a {MANIFEST_FORMAT} v{MANIFEST_VERSION} file")
    samples = []
    for lineno, ln in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(ln)
            sample = RankSample(
                str(obj["query"]),
                str(obj["gt"]),
                tuple(str(c) for c in obj["cands"]),
                tuple(float(x) for x in obj["sims"]),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: bad sample: {exc}") from exc
        samples.append(sample)
    ds = RankDataset(tuple(samples), header["m"], header["gallery_sha256"], str(path))
    ds.validate()
    return ds
