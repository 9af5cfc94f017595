"""Embedding records, cosine geometry and exhaustive top-m retrieval."""
from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, DegenerateInputError, DimensionMismatchError, ValidationError

GALLERY_FORMAT = "skyrank-gallery"
GALLERY_VERSION = 1


class View(str, enum.Enum):
    QUERY = "query"
    REFERENCE = "reference"


@dataclass(frozen=True, eq=False)
class Embedding:
    id: str
    vector: np.ndarray
    view: View = View.REFERENCE

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise DataError("embedding id must be a non-empty string")
        vec = np.array(self.vector, dtype=np.float64)
        if vec.ndim != 1 or vec.size == 0:
            raise DataError(f"embedding {self.id!r}: vector must be a non-empty 1-d sequence")
        if not np.all(np.isfinite(vec)):
            raise DataError(f"embedding {self.id!r}: non-finite entries")
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)
        object.__setattr__(self, "view", View(self.view))

    @property
    def dim(self) -> int:
        return self.vector.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Embedding):
            return NotImplemented
        return (
            self.id == other.id
            and self.view == other.view
            and np.array_equal(self.vector, other.vector)
        )

    def __hash__(self):
        return hash((self.id, self.view))


@dataclass(frozen=True)
class RetrievalResult:
    query_id: str
    ranked: tuple[tuple[str, float], ...]

    @property
    def ids(self) -> list[str]:
        return [cid for cid, _ in self.ranked]

    @property
    def similarities(self) -> list[float]:
        return [s for _, s in self.ranked]

    def __len__(self):
        return len(self.ranked)


class Gallery:
    """Immutable, ordered collection of reference-view embeddings.

    Vectors are kept as a read-only ``(n, dim)`` float64 matrix; iteration
    order is the construction order.
    """

    def __init__(self, entries: Sequence[Embedding]):
        if not entries:
            raise DataError("gallery must contain at least one entry")
        dim = entries[0].dim
        index: dict[str, int] = {}
        for pos, e in enumerate(entries):
            if e.view is not View.REFERENCE:
                raise DataError(f"gallery entry {e.id!r} has view {e.view.value!r}, expected reference")
            if e.dim != dim:
                raise DimensionMismatchError(
                    f"gallery entry {e.id!r} has dim {e.dim}, expected {dim}"
                )
            if e.id in index:
                raise DataError(f"duplicate gallery id {e.id!r}")
            index[e.id] = pos
        self._entries = tuple(entries)
        self._index = index
        self._dim = dim
        mat = np.stack([e.vector for e in entries])
        mat.setflags(write=False)
        self._matrix = mat
        norms = np.linalg.norm(mat, axis=1)
        norms.setflags(write=False)
        self._norms = norms

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def entries(self) -> tuple[Embedding, ...]:
        return self._entries

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self._entries]

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def __contains__(self, entry_id: str) -> bool:
        return entry_id in self._index

    def __getitem__(self, entry_id: str) -> Embedding:
        try:
            return self._entries[self._index[entry_id]]
        except KeyError:
            raise DataError(f"unknown gallery id {entry_id!r}") from None

    def position(self, entry_id: str) -> int:
        try:
            return self._index[entry_id]
        except KeyError:
            raise DataError(f"unknown gallery id {entry_id!r}") from None

    def similarities(self, query_vec) -> np.ndarray:
        """Cosine similarity of ``query_vec`` against every entry, in gallery order."""
        q = np.asarray(query_vec, dtype=np.float64)
        if q.shape != (self._dim,):
            raise DimensionMismatchError(f"query has shape {q.shape}, gallery dim is {self._dim}")
        qn = np.linalg.norm(q)
        if qn == 0.0:
            raise DegenerateInputError("query vector is all zeros")
        if np.any(self._norms == 0.0):
            bad = self._entries[int(np.argmin(self._norms))].id
            raise DegenerateInputError(f"gallery entry {bad!r} is a zero vector")
        return (self._matrix @ q) / (self._norms * qn)


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0.0 or not np.isfinite(n):
        raise DegenerateInputError("cannot normalize a zero or non-finite vector")
    return v / n


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise DimensionMismatchError(f"shape mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    return float(u @ v / (nu * nv))


def build_gallery(entries: Iterable[Embedding]) -> Gallery:
    return Gallery(list(entries))


def _top_order(sims: np.ndarray, m: int) -> np.ndarray:
    # stable sort on -sim keeps ascending gallery position among ties
    return np.argsort(-sims, kind="stable")[:m]


def retrieve_top_m(gallery: Gallery, query: Embedding | np.ndarray, m: int) -> RetrievalResult:
    """The ``m`` gallery entries most cosine-similar to ``query``, best first.

    Ties are broken by ascending gallery position.
    """
    if isinstance(m, bool) or not isinstance(m, (int, np.integer)) or m < 1:
        raise ValidationError(f"m must be a positive integer, got {m!r}")
    if m > len(gallery):
        raise ValidationError(f"m={m} exceeds gallery size {len(gallery)}")
    if isinstance(query, Embedding):
        qid, qvec = query.id, query.vector
    else:
        qid, qvec = "", query
    sims = gallery.similarities(qvec)
    order = _top_order(sims, m)
    ids = gallery.ids
    return RetrievalResult(qid, tuple((ids[i], float(sims[i])) for i in order))


def retrieve_batch(gallery: Gallery, queries: Sequence[Embedding], m: int) -> list[RetrievalResult]:
    """Vectorised retrieval for many queries; identical to calling retrieve_top_m per query."""
    if not queries:
        return []
    if m < 1 or m > len(gallery):
        raise ValidationError(f"m={m} must be in [1, {len(gallery)}]")
    # row-by-row matvec keeps results bit-identical to the single-query path
    return [retrieve_top_m(gallery, q, m) for q in queries]


# -- JSON Lines I/O ---------------------------------------------------------

def _embedding_to_json(e: Embedding) -> str:
    return json.dumps({"id": e.id, "view": e.view.value, "vec": [float(x) for x in e.vector]})


def write_embeddings(path: str | os.PathLike, entries: Sequence[Embedding]) -> None:
    """Write embeddings in the gallery JSON Lines format (header line first)."""
    entries = list(entries)
    if not entries:
        raise DataError("refusing to write an empty embedding file")
    dim = entries[0].dim
    lines = [json.dumps({"format": GALLERY_FORMAT, "version": GALLERY_VERSION, "dim": dim})]
    for e in entries:
        if e.dim != dim:
            raise DimensionMismatchError(f"entry {e.id!r} has dim {e.dim}, expected {dim}")
        lines.append(_embedding_to_json(e))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_embeddings(path: str | os.PathLike) -> list[Embedding]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: bad header line: {exc}") from exc
    if (
        not isinstance(header, dict)
        or header.get("format") != GALLERY_FORMAT
        or header.get("version") != GALLERY_VERSION
        or not isinstance(header.get("dim"), int)
    ):
        raise DataError(f"{path}: not a {GALLERY_FORMAT} v{GALLERY_VERSION} file")
    dim = header["dim"]
    out = []
    for lineno, ln in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(ln)
            e = Embedding(obj["id"], obj["vec"], View(obj["view"]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: bad record: {exc}") from exc
        if e.dim != dim:
            raise DimensionMismatchError(f"{path}:{lineno}: dim {e.dim} != header dim {dim}")
        out.append(e)
    return out


def write_gallery(path: str | os.PathLike, gallery: Gallery) -> None:
    write_embeddings(path, gallery.entries)


def read_gallery(path: str | os.PathLike) -> Gallery:
    return build_gallery(read_embeddings(path))


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)
