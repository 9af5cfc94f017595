"""Run configuration and the gen / curate / train / rerank / eval / sweep stages.

Every stage reads and writes files only, and records its resolved config plus
input checksums in ``<out_dir>/run.json``.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch

from .curation import DEFAULT_M, build_rank_dataset, read_manifest, write_manifest
from .embedding import atomic_write_text, read_embeddings, read_gallery
from .errors import DataError, ValidationError
from .evaluation import delta_csv, evaluate_run, per_query_jsonl, summary_csv
from .rerank import batch_rerank_run, read_results, write_results
from .scorer import ScorerConfig, init_params, load_checkpoint, save_checkpoint
from .synthgen import WORLD_FILES, WorldConfig, emit_world, generate_world, read_json, validate_world_files
from .training import TrainConfig, train

SEED_ENV = "SKYRANK_SEED"
SWEEP_AXES = ("T", "k_rerank", "k_train")

def _block(d: dict, **changes) -> dict:
    # component seeds all follow the single top-level "seed"
    return {k: v for k, v in {**d, **changes}.items() if k != "seed"}


DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "paths": {
        "world_dir": "world",
        "manifest": "manifest.jsonl",
        "checkpoint": "scorer.sklk",
        "rerank_results": "rerank.jsonl",
        "out_dir": "runs",
    },
    # shipped calibration: see README "Synthetic world"
    "world": _block(WorldConfig().to_dict(), confuser_sim_target=0.85),
    "curate": {"m": DEFAULT_M, "split": "train"},
    "scorer": _block(ScorerConfig().to_dict(), lora_targets=["q", "k", "v", "o", "mlp"]),
    "train": _block(TrainConfig().to_dict()),
    "rerank": {"m_retrieve": 20, "k_rerank": 10, "split": "test"},
    "eval": {"ks": [1, 5, 10]},
    "sweep": {"axis": "T", "values": [0.0, 0.5, 0.8, 0.9, 1.0]},
}


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in out:
            raise ValidationError(f"unknown config key {where}{key!r}")
        if isinstance(out[key], dict) and isinstance(val, dict):
            out[key] = _merge(out[key], val, f"{where}{key}.")
        else:
            out[key] = copy.deepcopy(val)
    return out


def set_dotted(config: dict, dotted: str, value: Any) -> None:
    node = config
    parts = dotted.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ValidationError(f"unknown config key {dotted!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ValidationError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunConfig:
    """Resolved run configuration; ``raw`` is the full JSON-able document."""

    raw: dict
    base_dir: Path

    @classmethod
    def load(
        cls,
        path: str | os.PathLike | None = None,
        overrides: dict[str, Any] | None = None,
        base_dir: str | os.PathLike | None = None,
        env: dict[str, str] | None = None,
    ) -> "RunConfig":
        """Defaults < config file < ``SKYRANK_SEED`` < explicit overrides."""
        raw = copy.deepcopy(DEFAULT_CONFIG)
        if path is not None:
            doc = read_json(path)
            if not isinstance(doc, dict):
                raise ValidationError(f"{path}: config must be a JSON object")
            raw = _merge(raw, doc)
            if base_dir is None:
                base_dir = Path(path).resolve().parent
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            try:
                raw["seed"] = int(env[SEED_ENV])
            except ValueError:
                raise ValidationError(f"{SEED_ENV} must be an integer") from None
        for dotted, value in (overrides or {}).items():
            set_dotted(raw, dotted, value)
        cfg = cls(raw, Path(base_dir or ".").resolve())
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.world_config()
        self.scorer_config()
        self.train_config()
        m = self.raw["curate"]["m"]
        if not isinstance(m, int) or m < 2:
            raise ValidationError("curate.m must be an integer >= 2")
        self.train_config().validate(m)
        rr = self.raw["rerank"]
        if not 1 <= rr["k_rerank"] <= rr["m_retrieve"]:
            raise ValidationError("need 1 <= rerank.k_rerank <= rerank.m_retrieve")
        for split_key in (self.raw["curate"]["split"], rr["split"]):
            if split_key not in ("train", "test", "all"):
                raise ValidationError(f"unknown split {split_key!r}")

    # the global seed feeds every seeded component
    def world_config(self) -> WorldConfig:
        return WorldConfig.from_dict({**self.raw["world"], "seed": self.raw["seed"]})

    def scorer_config(self) -> ScorerConfig:
        return ScorerConfig.from_dict({**self.raw["scorer"], "seed": self.raw["seed"]})

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({**self.raw["train"], "seed": self.raw["seed"]})

    def path(self, key: str) -> Path:
        p = Path(self.raw["paths"][key])
        return p if p.is_absolute() else self.base_dir / p

    def world_path(self, key: str) -> Path:
        return self.path("world_dir") / WORLD_FILES[key]

    @property
    def out_dir(self) -> Path:
        return self.path("out_dir")

    def hash(self) -> str:
        return config_hash(self.raw)


def set_serial_deterministic() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def _rel(path: Path, base: Path) -> str:
    # relative names keep run.json identical across working directories
    try:
        return str(Path(path).resolve().relative_to(base))
    except ValueError:
        return str(path)


def _write_run_json(out_dir: Path, stage: str, cfg: RunConfig, inputs: list[Path], outputs: list[Path]) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "stage": stage,
        "config": cfg.raw,
        "config_sha256": cfg.hash(),
        "inputs": {_rel(p, cfg.base_dir): file_sha256(p) for p in inputs},
        "outputs": {_rel(p, cfg.base_dir): file_sha256(p) for p in outputs},
    }
    path = out_dir / "run.json"
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _require(paths: list[Path]) -> None:
    for p in paths:
        if not p.exists():
            raise DataError(f"missing input file {p}")


def _load_world_parts(cfg: RunConfig):
    paths = [cfg.world_path(k) for k in ("gallery", "queries", "gt_map", "split")]
    _require(paths)
    gallery = read_gallery(paths[0])
    queries = read_embeddings(paths[1])
    gt_map = read_json(paths[2])
    split = read_json(paths[3])
    validate_world_files(queries, gallery, gt_map, split)
    return gallery, queries, gt_map, split, paths


def _split_queries(queries, split: dict, which: str):
    if which == "all":
        return list(queries)
    wanted = set(split[which])
    return [q for q in queries if q.id in wanted]


# -- stages -------------------------------------------------------------------

def cmd_gen(cfg: RunConfig) -> dict[str, Path]:
    world = generate_world(cfg.world_config())
    paths = emit_world(world, cfg.path("world_dir"))
    _write_run_json(cfg.path("world_dir"), "gen", cfg, [], list(paths.values()))
    return paths


def cmd_curate(cfg: RunConfig) -> Path:
    gallery, queries, gt_map, split, inputs = _load_world_parts(cfg)
    chosen = _split_queries(queries, split, cfg.raw["curate"]["split"])
    ds = build_rank_dataset(chosen, gallery, gt_map, cfg.raw["curate"]["m"], str(inputs[0]))
    out = cfg.path("manifest")
    write_manifest(ds, out)
    _write_run_json(out.parent / "curate", "curate", cfg, inputs, [out])
    return out


def cmd_train(cfg: RunConfig) -> tuple[Path, dict]:
    gallery_path, queries_path = cfg.world_path("gallery"), cfg.world_path("queries")
    manifest = cfg.path("manifest")
    _require([gallery_path, queries_path, manifest])
    gallery = read_gallery(gallery_path)
    queries = {q.id: q for q in read_embeddings(queries_path)}
    ds = read_manifest(manifest)
    params = init_params(cfg.scorer_config())
    trained, report = train(ds, gallery, queries, params, cfg.train_config())
    ckpt = cfg.path("checkpoint")
    save_checkpoint(trained, ckpt)
    train_dir = ckpt.parent / "train"
    report_json = train_dir / "train_report.json"
    losses_csv = train_dir / "losses.csv"
    atomic_write_text(report_json, json.dumps(report.to_json(), indent=1) + "\n")
    atomic_write_text(losses_csv, report.losses_csv())
    _write_run_json(train_dir, "train", cfg, [gallery_path, queries_path, manifest], [ckpt, report_json, losses_csv])
    return ckpt, report.to_json()


def cmd_rerank(cfg: RunConfig) -> Path:
    gallery, queries, gt_map, split, inputs = _load_world_parts(cfg)
    ckpt = cfg.path("checkpoint")
    _require([ckpt])
    params = load_checkpoint(ckpt)
    rr = cfg.raw["rerank"]
    chosen = _split_queries(queries, split, rr["split"])
    results = batch_rerank_run(params, chosen, gallery, rr["m_retrieve"], rr["k_rerank"])
    out = cfg.path("rerank_results")
    write_results(out, results)
    _write_run_json(out.parent / "rerank", "rerank", cfg, [*inputs, ckpt], [out])
    return out


def cmd_eval(cfg: RunConfig) -> dict:
    gt_path = cfg.world_path("gt_map")
    res_path = cfg.path("rerank_results")
    _require([gt_path, res_path])
    gt_map = read_json(gt_path)
    results = read_results(res_path)
    if not results:
        raise DataError("no rerank results to evaluate")
    for r in results:
        if r.query_id not in gt_map:
            raise DataError(f"no ground truth for query {r.query_id!r}")
    ks = cfg.raw["eval"]["ks"]
    base = evaluate_run([(r.query_id, r.retrieval_ranking(), gt_map[r.query_id]) for r in results], ks)
    new = evaluate_run([(r.query_id, r.full_ranking(), gt_map[r.query_id]) for r in results], ks)
    out = cfg.out_dir
    files = {
        "summary_csv": out / "eval_summary.csv",
        "delta_csv": out / "eval_delta.csv",
        "summary_json": out / "eval_summary.json",
        "retriever_detail": out / "eval_retriever.jsonl",
        "reranked_detail": out / "eval_reranked.jsonl",
    }
    summary = {"retriever": base.to_json(), "reranked": new.to_json()}
    atomic_write_text(files["summary_csv"], summary_csv([("retriever", base), ("reranked", new)]))
    atomic_write_text(files["delta_csv"], delta_csv(base, new))
    atomic_write_text(files["summary_json"], json.dumps(summary, indent=2) + "\n")
    atomic_write_text(files["retriever_detail"], per_query_jsonl(base))
    atomic_write_text(files["reranked_detail"], per_query_jsonl(new))
    _write_run_json(out, "eval", cfg, [gt_path, res_path], list(files.values()))
    return summary


SWEEP_COLUMNS = ["axis", "value", "config_sha256", "n_queries", "R@1", "R@5", "R@10", "AP"]


def _sub_config(cfg: RunConfig, run_dir: Path, axis: str, value) -> RunConfig:
    raw = copy.deepcopy(cfg.raw)
    # the world is shared; per-run artifacts live under run_dir
    raw["paths"]["world_dir"] = str(cfg.path("world_dir"))
    raw["paths"]["manifest"] = str(cfg.path("manifest"))
    raw["paths"]["checkpoint"] = str(run_dir / "scorer.sklk")
    raw["paths"]["rerank_results"] = str(run_dir / "rerank.jsonl")
    raw["paths"]["out_dir"] = str(run_dir)
    if axis == "T":
        raw["train"]["T"] = float(value)
    elif axis == "k_train":
        raw["train"]["k"] = int(value)
    else:
        raw["rerank"]["k_rerank"] = int(value)
    sub = RunConfig(raw, cfg.base_dir)
    sub.validate()
    return sub


def cmd_sweep(cfg: RunConfig, axis: str | None = None, values: list | None = None) -> Path:
    """Repeat train/rerank/eval along one axis with a shared world, manifest and seed."""
    axis = axis or cfg.raw["sweep"]["axis"]
    values = list(values if values is not None else cfg.raw["sweep"]["values"])
    if axis not in SWEEP_AXES:
        raise ValidationError(f"sweep axis must be one of {SWEEP_AXES}")
    if not values:
        raise ValidationError("sweep needs at least one value")
    if not cfg.world_path("gallery").exists():
        cmd_gen(cfg)
    if not cfg.path("manifest").exists():
        cmd_curate(cfg)
    sweep_dir = cfg.out_dir / f"sweep_{axis}"
    rows = []
    shared_ckpt = None
    for value in values:
        run_dir = sweep_dir / f"{axis}={value}"
        sub = _sub_config(cfg, run_dir, axis, value)
        if axis == "k_rerank":
            # scorer training does not depend on k_rerank: train once, reuse
            if shared_ckpt is None:
                shared_ckpt = sub.path("checkpoint")
                cmd_train(sub)
            sub.raw["paths"]["checkpoint"] = str(shared_ckpt)
        else:
            cmd_train(sub)
        cmd_rerank(sub)
        summary = cmd_eval(sub)["reranked"]
        rows.append(
            {
                "axis": axis,
                "value": value,
                "config_sha256": sub.hash(),
                "n_queries": summary["n_queries"],
                **{f"R@{k}": f"{summary['recall_at'][str(k)]:.2f}" for k in (1, 5, 10) if str(k) in summary["recall_at"]},
                "AP": f"{summary['ap']:.2f}",
            }
        )
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n", restval="")
    w.writeheader()
    w.writerows(rows)
    out = sweep_dir / "sweep.csv"
    atomic_write_text(out, buf.getvalue())
    return out
