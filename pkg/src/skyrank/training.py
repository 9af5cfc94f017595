"""Soft-label relational training of the scorer's LoRA factors and value head."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .curation import RankDataset, RankSample
from .embedding import Embedding, Gallery, cosine_similarity
from .errors import DataError, DimensionMismatchError, NumericError, SkyrankError, ValidationError
from .scorer import DTYPE, ScorerParams, assemble_prompts, forward_scores

LABEL_MODES = ("soft", "hard", "shifted", "top1")
OPTIMIZERS = ("adamw", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    T: float = 0.9
    k: int = 7
    learning_rate: float = 1e-4
    batch_size: int = 4
    epochs: int = 1
    optimizer: str = "adamw"
    weight_decay: float = 0.0
    label_mode: str = "soft"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self, m: int | None = None) -> None:
        if not (isinstance(self.T, (int, float)) and 0.0 <= self.T <= 1.0):
            raise ValidationError(f"T must be in [0, 1], got {self.T!r}")
        if isinstance(self.k, bool) or not isinstance(self.k, int) or self.k < 1:
            raise ValidationError(f"k must be a positive integer, got {self.k!r}")
        if m is not None and self.k > m:
            raise ValidationError(f"k={self.k} exceeds the {m - 1} curated candidates plus ground truth")
        if not (math.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise ValidationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("batch_size must be >= 1 and epochs >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}")
        if self.label_mode not in LABEL_MODES:
            raise ValidationError(f"label_mode must be one of {LABEL_MODES}")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class SoftLabelVector:
    labels: np.ndarray
    gt_index: int


@dataclass
class TrainReport:
    step_losses: list[float] = field(default_factory=list)
    epoch_mean_losses: list[float] = field(default_factory=list)
    loss_variance: float = 0.0
    second_half_variance: float = 0.0
    final_checksum: str = ""

    def to_json(self) -> dict:
        return {
            "steps": len(self.step_losses),
            "step_losses": self.step_losses,
            "epoch_mean_losses": self.epoch_mean_losses,
            "loss_variance": self.loss_variance,
            "second_half_variance": self.second_half_variance,
            "final_checksum": self.final_checksum,
        }

    def losses_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, loss in enumerate(self.step_losses):
            w.writerow([i, repr(loss)])
        return buf.getvalue()


def second_half_variance(losses: Sequence[float]) -> float:
    tail = np.asarray(losses[len(losses) // 2:], dtype=np.float64)
    return float(tail.var()) if tail.size else 0.0


# -- candidates and labels --------------------------------------------------

def select_training_candidates(
    sample: RankSample, k: int, rng: np.random.Generator
) -> tuple[list[str], int]:
    """Ground truth plus the k-1 most query-similar curated candidates (hard negatives).

    The ground truth lands at an rng-chosen slot, returned as ``gt_index``.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if k - 1 > len(sample.candidate_ids):
        raise ValidationError(
            f"k={k} needs {k - 1} negatives but sample {sample.query_id!r} has {len(sample.candidate_ids)}"
        )
    # curated candidates are stored in descending retriever similarity
    order = sorted(range(len(sample.candidate_ids)), key=lambda i: (-sample.candidate_sims[i], i))
    negatives = [sample.candidate_ids[i] for i in order[: k - 1]]
    gt_index = int(rng.integers(k))
    ids = negatives[:gt_index] + [sample.gt_id] + negatives[gt_index:]
    return ids, gt_index


def compute_soft_labels(
    candidate_embs: Sequence[Embedding],
    gt_emb: Embedding,
    T: float,
    mode: str = "soft",
    retrieval_top1: str | None = None,
) -> SoftLabelVector:
    """Per-candidate targets from cosine similarity to the ground truth.

    soft:    sim if sim > T else 0
    hard:    1 if sim > T else 0
    shifted: max(0, sim - T)
    top1:    1 for the retriever's rank-1 reference, 0 elsewhere (no threshold)

    The ground-truth entry is always 1.
    """
    if not 0.0 <= T <= 1.0:
        raise ValidationError(f"T must be in [0, 1], got {T}")
    if mode not in LABEL_MODES:
        raise ValidationError(f"unknown label mode {mode!r}")
    ids = [c.id for c in candidate_embs]
    if gt_emb.id not in ids:
        raise DataError(f"ground truth {gt_emb.id!r} missing from the candidate list")
    gt_index = ids.index(gt_emb.id)
    k = len(candidate_embs)
    labels = np.zeros(k, dtype=np.float64)
    if mode == "top1":
        if retrieval_top1 is None:
            raise ValidationError("label mode 'top1' needs the retriever's rank-1 id")
        if retrieval_top1 in ids:
            labels[ids.index(retrieval_top1)] = 1.0
    else:
        for j, c in enumerate(candidate_embs):
            if c.dim != gt_emb.dim:
                raise DimensionMismatchError(f"candidate {c.id!r} has dim {c.dim}, ground truth {gt_emb.dim}")
            sim = cosine_similarity(c.vector, gt_emb.vector)
            if mode == "soft":
                labels[j] = sim if sim > T else 0.0
            elif mode == "hard":
                labels[j] = 1.0 if sim > T else 0.0
            else:
                labels[j] = max(0.0, sim - T)
    labels[gt_index] = 1.0
    return SoftLabelVector(labels, gt_index)


def retrieval_top1(sample: RankSample, query_vec, gallery: Gallery) -> str:
    """The id the retriever ranked first, recovered from a curated (ground-truth-free) sample."""
    if not sample.candidate_ids:
        return sample.gt_id
    first = sample.candidate_ids[0]
    sims = gallery.similarities(query_vec)
    gpos, fpos = gallery.position(sample.gt_id), gallery.position(first)
    if (-sims[gpos], gpos) < (-sims[fpos], fpos):
        return sample.gt_id
    return first


# -- loss and gradients -----------------------------------------------------

def bce_with_logits(scores, labels) -> torch.Tensor:
    """Mean binary cross-entropy on logits, via max(s,0) - s*l + log1p(exp(-|s|))."""
    s = torch.as_tensor(scores, dtype=DTYPE)
    l = torch.as_tensor(labels, dtype=DTYPE)
    if s.ndim != 1 or s.shape != l.shape:
        raise DimensionMismatchError(f"scores {tuple(s.shape)} vs labels {tuple(l.shape)}")
    if s.numel() == 0:
        raise ValidationError("bce_with_logits of an empty vector")
    if not (torch.all(torch.isfinite(s)) and torch.all(torch.isfinite(l))):
        raise NumericError("non-finite input to bce_with_logits")
    return (torch.clamp(s, min=0) - s * l + torch.log1p(torch.exp(-s.abs()))).mean()


def _with_grad_leaves(params: ScorerParams) -> tuple[ScorerParams, dict[str, torch.Tensor]]:
    leaves = {n: params[n].detach().clone().requires_grad_(True) for n in params.trainable_names}
    tensors = {n: leaves.get(n, t.detach()) for n, t in params.tensors.items()}
    return ScorerParams(params.config, tensors), leaves


def loss_and_grads(
    params: ScorerParams,
    prompts: torch.Tensor,
    labels,
    dropout_gen: torch.Generator | None = None,
) -> tuple[float, dict[str, torch.Tensor]]:
    view, leaves = _with_grad_leaves(params)
    loss = bce_with_logits(forward_scores(view, prompts, dropout_gen), labels)
    if not torch.isfinite(loss):
        raise NumericError("non-finite loss")
    grads = torch.autograd.grad(loss, list(leaves.values()))
    out = {}
    for name, g in zip(leaves, grads):
        if not torch.all(torch.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        out[name] = g
    return float(loss.detach()), out


def backward(params: ScorerParams, prompts: torch.Tensor, labels) -> dict[str, torch.Tensor]:
    """Exact gradients of the mean BCE loss for every trainable tensor (dropout off)."""
    return loss_and_grads(params, prompts, labels)[1]


# -- training loop ----------------------------------------------------------

def _make_optimizer(cfg: TrainConfig, tensors: list[torch.Tensor]) -> torch.optim.Optimizer:
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(tensors, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(tensors, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


def train(
    dataset: RankDataset,
    gallery: Gallery,
    queries: Mapping[str, Embedding],
    params: ScorerParams,
    cfg: TrainConfig,
    on_step: Callable[[int, float], None] | None = None,
) -> tuple[ScorerParams, TrainReport]:
    """One pass per epoch over ``dataset``; returns trained copy of ``params`` and a report.

    Deterministic for a fixed ``cfg.seed`` when torch runs single-threaded.
    """
    cfg.validate(dataset.m)
    dataset.validate(gallery)
    trained = params.clone()
    report = TrainReport()
    names = trained.trainable_names
    leaves = [trained.tensors[n].requires_grad_(True) for n in names]
    opt = _make_optimizer(cfg, leaves)
    rng = np.random.default_rng(cfg.seed)
    dropout_gen = torch.Generator().manual_seed(cfg.seed)
    samples = dataset.samples
    for q in (s.query_id for s in samples):
        if q not in queries:
            raise DataError(f"query {q!r} from the manifest has no embedding")

    step = 0
    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start:start + cfg.batch_size]]
            q_rows, c_rows, label_rows = [], [], []
            for s in batch:
                try:
                    ids, _ = select_training_candidates(s, cfg.k, rng)
                    cands = [gallery[c] for c in ids]
                    top1 = (
                        retrieval_top1(s, queries[s.query_id].vector, gallery)
                        if cfg.label_mode == "top1"
                        else None
                    )
                    lab = compute_soft_labels(cands, gallery[s.gt_id], cfg.T, cfg.label_mode, top1)
                except SkyrankError as exc:
                    raise type(exc)(f"sample {s.query_id!r}: {exc}") from exc
                q_rows.extend([queries[s.query_id].vector] * len(ids))
                c_rows.extend(c.vector for c in cands)
                label_rows.append(lab.labels)
            prompts = assemble_prompts(trained, np.stack(q_rows), np.stack(c_rows))
            labels = torch.as_tensor(np.concatenate(label_rows))
            opt.zero_grad(set_to_none=True)
            loss = bce_with_logits(forward_scores(trained, prompts, dropout_gen), labels)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at step {step}")
            loss.backward()
            for n, t in zip(names, leaves):
                if not torch.all(torch.isfinite(t.grad)):
                    raise NumericError(f"non-finite gradient for {n} at step {step}")
            opt.step()
            value = float(loss.detach())
            report.step_losses.append(value)
            epoch_losses.append(value)
            if on_step is not None:
                on_step(step, value)
            step += 1
        if epoch_losses:
            report.epoch_mean_losses.append(float(np.mean(epoch_losses)))
    for t in leaves:
        t.requires_grad_(False)
        t.grad = None
    report.loss_variance = float(np.var(report.step_losses)) if report.step_losses else 0.0
    report.second_half_variance = second_half_variance(report.step_losses)
    report.final_checksum = trained.checksum()
    return trained, report
