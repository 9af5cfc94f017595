"""Seeded synthetic paired-view world: reference gallery, query set, ground truth and split.

Each location has a unit latent ``z`` on the sphere of dimension ``latent_dim``.
The reference view observes ``M_r z`` and the query view observes
``M_r G z`` where ``G`` is a latent rotation whose angle grows with
``view_gap``; both views add isotropic Gaussian noise. Cosine retrieval
therefore confuses neighbouring locations, while a scorer that learns to undo
``G`` can recover them. Confusers are in-span perturbations of a location's
reference at a fixed cosine similarity to it.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .embedding import Embedding, Gallery, View, atomic_write_text, build_gallery, read_embeddings, write_embeddings
from .errors import DataError, ValidationError


@dataclass(frozen=True)
class WorldConfig:
    n_locations: int = 1000
    queries_per_location: int = 25
    latent_dim: int = 8
    d_e: int = 32
    view_gap: float = 0.5
    noise_sigma: float = 0.03
    query_jitter: float = 0.0
    n_confusers_per_location: int = 2
    confuser_sim_target: float = 0.95
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("n_locations", "queries_per_location", "latent_dim", "d_e"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ValidationError(f"world.{name} must be a positive integer, got {v!r}")
        if self.n_locations < 2:
            raise ValidationError("world needs at least 2 locations")
        if self.latent_dim > self.d_e:
            raise ValidationError(f"latent_dim={self.latent_dim} exceeds d_e={self.d_e}")
        if self.latent_dim < 2 and self.view_gap:
            raise ValidationError("a view gap needs latent_dim >= 2")
        for name in ("view_gap", "noise_sigma", "query_jitter"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValidationError(f"world.{name} must be finite and >= 0, got {v!r}")
        if self.n_confusers_per_location < 0:
            raise ValidationError("n_confusers_per_location must be >= 0")
        if not 0.0 < self.confuser_sim_target < 1.0:
            raise ValidationError("confuser_sim_target must be in (0, 1)")
        if self.n_confusers_per_location and self.latent_dim < 2:
            raise ValidationError("confusers need latent_dim >= 2")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValidationError("train_fraction must be in (0, 1)")
        n_train = round(self.train_fraction * self.n_locations)
        if not 0 < n_train < self.n_locations:
            raise ValidationError("train_fraction leaves one split without locations")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "WorldConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown world config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class SynthWorld:
    config: WorldConfig
    gallery: Gallery
    queries: list[Embedding]
    gt_map: dict[str, str]
    split: dict[str, list[str]]

    def query_subset(self, split: str) -> list[Embedding]:
        wanted = set(self.split[split])
        return [q for q in self.queries if q.id in wanted]


def _ref_id(loc: int) -> str:
    return f"r{loc:05d}"


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def view_rotation(latent_dim: int, view_gap: float, rng: np.random.Generator) -> np.ndarray:
    """Rotation ``expm(view_gap * K)`` for a random skew matrix K with spectral norm 1."""
    K = rng.standard_normal((latent_dim, latent_dim))
    K = K - K.T
    norm = np.linalg.norm(K, 2)
    if norm == 0.0:
        return np.eye(latent_dim)
    return expm(view_gap * K / norm)


def generate_world(cfg: WorldConfig) -> SynthWorld:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, lat, de = cfg.n_locations, cfg.latent_dim, cfg.d_e
    basis = np.linalg.qr(rng.standard_normal((de, lat)))[0]
    rot = view_rotation(lat, cfg.view_gap, rng)
    z = _unit_rows(rng.standard_normal((n, lat)))
    refs = z @ basis.T + cfg.noise_sigma * rng.standard_normal((n, de))

    # confusers: ref + t * |ref| * p, p a unit in-span direction orthogonal to ref,
    # so cos(confuser, ref) = 1 / sqrt(1 + t^2) = confuser_sim_target exactly
    tan = math.tan(math.acos(cfg.confuser_sim_target))
    confusers = []
    ref_lat = refs @ basis
    for _ in range(cfg.n_confusers_per_location):
        u = rng.standard_normal((n, lat))
        u -= (u * ref_lat).sum(1, keepdims=True) / (ref_lat * ref_lat).sum(1, keepdims=True) * ref_lat
        p = _unit_rows(u @ basis.T)
        confusers.append(refs + tan * np.linalg.norm(refs, axis=1, keepdims=True) * p)

    entries = []
    for loc in range(n):
        entries.append(Embedding(_ref_id(loc), refs[loc], View.REFERENCE))
        for c, block in enumerate(confusers, start=1):
            entries.append(Embedding(f"{_ref_id(loc)}c{c}", block[loc], View.REFERENCE))
    gallery = build_gallery(entries)

    qpl = cfg.queries_per_location
    qz = np.repeat(z, qpl, axis=0)
    if cfg.query_jitter:
        qz = _unit_rows(qz + cfg.query_jitter * rng.standard_normal(qz.shape))
    qvecs = qz @ rot.T @ basis.T + cfg.noise_sigma * rng.standard_normal((n * qpl, de))
    queries, gt_map = [], {}
    for i in range(n * qpl):
        loc, j = divmod(i, qpl)
        qid = f"q{loc:05d}_{j:03d}"
        queries.append(Embedding(qid, qvecs[i], View.QUERY))
        gt_map[qid] = _ref_id(loc)

    perm = rng.permutation(n)
    train_locs = set(perm[: round(cfg.train_fraction * n)].tolist())
    split = {"train": [], "test": []}
    for i, q in enumerate(queries):
        split["train" if i // qpl in train_locs else "test"].append(q.id)
    return SynthWorld(cfg, gallery, queries, gt_map, split)


WORLD_FILES = {
    "gallery": "gallery.jsonl",
    "queries": "queries.jsonl",
    "gt_map": "gt_map.json",
    "split": "split.json",
    "config": "world.json",
}


def emit_world(world: SynthWorld, out_dir: str | os.PathLike) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / v for k, v in WORLD_FILES.items()}
    write_embeddings(paths["gallery"], world.gallery.entries)
    write_embeddings(paths["queries"], world.queries)
    atomic_write_text(paths["gt_map"], json.dumps(world.gt_map, indent=0) + "\n")
    atomic_write_text(paths["split"], json.dumps(world.split) + "\n")
    atomic_write_text(paths["config"], json.dumps(world.config.to_dict(), indent=2, sort_keys=True) + "\n")
    return paths


def read_json(path: str | os.PathLike):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read JSON {path}: {exc}") from exc


def load_world(world_dir: str | os.PathLike) -> SynthWorld:
    d = Path(world_dir)
    cfg = WorldConfig.from_dict(read_json(d / WORLD_FILES["config"]))
    gallery = build_gallery(read_embeddings(d / WORLD_FILES["gallery"]))
    queries = read_embeddings(d / WORLD_FILES["queries"])
    gt_map = read_json(d / WORLD_FILES["gt_map"])
    split = read_json(d / WORLD_FILES["split"])
    validate_world_files(queries, gallery, gt_map, split)
    return SynthWorld(cfg, gallery, queries, gt_map, split)


def validate_world_files(queries, gallery: Gallery, gt_map: dict, split: dict) -> None:
    ids = [q.id for q in queries]
    if any(q.view is not View.QUERY for q in queries):
        raise DataError("query file contains non-query embeddings")
    if len(set(ids)) != len(ids):
        raise DataError("duplicate query ids")
    if set(gt_map) != set(ids):
        raise DataError("gt_map must cover every query id exactly once")
    for qid, rid in gt_map.items():
        if rid not in gallery:
            raise DataError(f"ground truth {rid!r} of {qid!r} not in gallery")
    if not isinstance(split, dict) or set(split) != {"train", "test"}:
        raise DataError("split must have exactly 'train' and 'test' lists")
    tr, te = set(split["train"]), set(split["test"])
    if tr & te or (tr | te) != set(ids):
        raise DataError("train/test split must be disjoint and exhaustive")
