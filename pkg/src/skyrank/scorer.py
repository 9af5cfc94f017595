"""Joint cross-view scorer: a small frozen transformer encoder with LoRA adapters and a value head.

A (query, candidate) pair is laid out as one token sequence::

    [query tokens | separator | candidate tokens | readout]

and the score is ``w . h`` where ``h`` is the final hidden state of the
readout token. All math is float64.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .embedding import Embedding, atomic_write_bytes
from .errors import DataError, DimensionMismatchError, NumericError, ValidationError

DTYPE = torch.float64
ATTN_TARGETS = ("q", "k", "v", "o")
MLP_TARGETS = ("mlp_in", "mlp_out")
ALL_TARGETS = ATTN_TARGETS + ("mlp",)


@dataclass(frozen=True)
class ScorerConfig:
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    tokens_per_view: int = 1
    lora_rank: int = 16
    lora_alpha: float = 32.0
    lora_dropout: float = 0.05
    lora_targets: tuple[str, ...] = ("q", "k", "v")
    lora_scaling: bool = True
    input_dim: int = 32
    tie_qk: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lora_targets", tuple(self.lora_targets))
        self.validate()

    def validate(self) -> None:
        for name in ("d", "n_layers", "n_heads", "tokens_per_view", "lora_rank", "input_dim"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ValidationError(f"scorer.{name} must be a positive integer, got {v!r}")
        if self.d % self.n_heads:
            raise ValidationError(f"n_heads={self.n_heads} must divide d={self.d}")
        if self.lora_rank >= self.d:
            raise ValidationError(f"lora_rank={self.lora_rank} must be < d={self.d}")
        if not 0.0 <= self.lora_dropout < 1.0:
            raise ValidationError(f"lora_dropout must be in [0, 1), got {self.lora_dropout}")
        if not math.isfinite(self.lora_alpha) or self.lora_alpha <= 0:
            raise ValidationError(f"lora_alpha must be positive, got {self.lora_alpha}")
        bad = [t for t in self.lora_targets if t not in ALL_TARGETS]
        if bad or len(set(self.lora_targets)) != len(self.lora_targets):
            raise ValidationError(f"lora_targets must be distinct members of {ALL_TARGETS}, got {self.lora_targets}")

    @property
    def seq_len(self) -> int:
        return 2 * self.tokens_per_view + 2

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.lora_rank if self.lora_scaling else 1.0

    def adapted_matrices(self) -> tuple[str, ...]:
        out = []
        for t in self.lora_targets:
            out.extend(MLP_TARGETS if t == "mlp" else (t,))
        return tuple(out)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ScorerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown scorer config keys: {sorted(unknown)}")
        return cls(**data)


class ScorerParams:
    """Named float64 tensors plus the config that shaped them.

    Trainable tensors are the LoRA factors (``*.lora_A``/``*.lora_B``) and the
    value head ``value_head``; everything else is frozen.
    """

    def __init__(self, config: ScorerConfig, tensors: dict[str, torch.Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    @staticmethod
    def is_trainable(name: str) -> bool:
        return name == "value_head" or name.endswith(".lora_A") or name.endswith(".lora_B")

    @property
    def trainable_names(self) -> list[str]:
        return [n for n in self.tensors if self.is_trainable(n)]

    @property
    def frozen_names(self) -> list[str]:
        return [n for n in self.tensors if not self.is_trainable(n)]

    def clone(self) -> "ScorerParams":
        return ScorerParams(self.config, {n: t.detach().clone() for n, t in self.tensors.items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(self.tensors[name].detach().contiguous().numpy().tobytes())
        return h.hexdigest()

    def equal(self, other: "ScorerParams") -> bool:
        return (
            self.config == other.config
            and self.tensors.keys() == other.tensors.keys()
            and all(torch.equal(self.tensors[n], other.tensors[n]) for n in self.tensors)
        )


def _orthogonal(gen: torch.Generator, rows: int, cols: int) -> torch.Tensor:
    """Random matrix with orthonormal rows or columns; entry variance ~1/max(rows, cols)."""
    a = torch.randn(max(rows, cols), min(rows, cols), generator=gen, dtype=DTYPE)
    q, r = torch.linalg.qr(a)
    q = q * torch.sign(torch.diagonal(r))
    return q if rows >= cols else q.T


def init_params(config: ScorerConfig) -> ScorerParams:
    """Deterministic parameters from ``config.seed``: B factors and value head start at zero."""
    config.validate()
    gen = torch.Generator().manual_seed(int(config.seed) & 0xFFFF_FFFF_FFFF_FFFF)
    d, r, tpv = config.d, config.lora_rank, config.tokens_per_view
    t: dict[str, torch.Tensor] = {}
    t["input_proj"] = torch.randn(config.input_dim, tpv * d, generator=gen, dtype=DTYPE)
    t["pos_emb"] = 0.5 * torch.randn(config.seq_len, d, generator=gen, dtype=DTYPE)
    t["sep_token"] = torch.randn(d, generator=gen, dtype=DTYPE)
    t["read_token"] = torch.randn(d, generator=gen, dtype=DTYPE)
    adapted = config.adapted_matrices()
    for layer in range(config.n_layers):
        p = f"layers.{layer}."
        t[p + "norm1.weight"] = torch.ones(d, dtype=DTYPE)
        t[p + "norm1.bias"] = torch.zeros(d, dtype=DTYPE)
        for name in ATTN_TARGETS:
            t[p + f"attn.{name}.weight"] = _orthogonal(gen, d, d)
        if config.tie_qk:
            t[p + "attn.k.weight"] = t[p + "attn.q.weight"].clone()
        t[p + "norm2.weight"] = torch.ones(d, dtype=DTYPE)
        t[p + "norm2.bias"] = torch.zeros(d, dtype=DTYPE)
        t[p + "mlp_in.weight"] = torch.randn(d, 4 * d, generator=gen, dtype=DTYPE) / math.sqrt(d)
        t[p + "mlp_out.weight"] = torch.randn(4 * d, d, generator=gen, dtype=DTYPE) / math.sqrt(4 * d)
        for name in adapted:
            key = p + (f"attn.{name}" if name in ATTN_TARGETS else name)
            d_in, d_out = t[key + ".weight"].shape
            t[key + ".lora_A"] = torch.randn(d_in, r, generator=gen, dtype=DTYPE) / math.sqrt(d_in)
            t[key + ".lora_B"] = torch.zeros(r, d_out, dtype=DTYPE)
    t["value_head"] = torch.zeros(d, dtype=DTYPE)
    return ScorerParams(config, t)


def effective_weight(W: torch.Tensor, A: torch.Tensor, B: torch.Tensor, alpha: float, r: int, scaling: bool = True):
    """``W + (alpha/r) A B`` (or ``W + A B`` with scaling off)."""
    W, A, B = (torch.as_tensor(x, dtype=DTYPE) for x in (W, A, B))
    if A.ndim != 2 or B.ndim != 2 or W.ndim != 2:
        raise DimensionMismatchError("effective_weight expects 2-d tensors")
    if A.shape[0] != W.shape[0] or B.shape[1] != W.shape[1] or A.shape[1] != B.shape[0] or A.shape[1] != r:
        raise DimensionMismatchError(
            f"shape mismatch: W{tuple(W.shape)} A{tuple(A.shape)} B{tuple(B.shape)} r={r}"
        )
    scale = alpha / r if scaling else 1.0
    return W + scale * (A @ B)


# -- prompts ----------------------------------------------------------------

def _as_matrix(vectors, input_dim: int) -> torch.Tensor:
    if isinstance(vectors, torch.Tensor):
        x = vectors.to(DTYPE)
    else:
        x = torch.from_numpy(np.array(vectors, dtype=np.float64))
    if x.ndim == 1:
        x = x.unsqueeze(0)
    if x.ndim != 2 or x.shape[1] != input_dim:
        raise DimensionMismatchError(f"expected vectors of dim {input_dim}, got shape {tuple(x.shape)}")
    norms = torch.linalg.vector_norm(x, dim=1, keepdim=True)
    if torch.any(norms == 0):
        raise DataError("cannot build a prompt from a zero vector")
    return x / norms


def assemble_prompts(params: ScorerParams, query_vecs, cand_vecs) -> torch.Tensor:
    """Token matrices for row-aligned (query, candidate) pairs: shape (n, seq_len, d).

    View vectors are L2-normalised before projection so scores are invariant to
    embedding scale, like the cosine retriever they re-rank.
    """
    cfg = params.config
    q = _as_matrix(query_vecs, cfg.input_dim)
    c = _as_matrix(cand_vecs, cfg.input_dim)
    if q.shape[0] != c.shape[0]:
        raise DimensionMismatchError(f"{q.shape[0]} queries vs {c.shape[0]} candidates")
    n, tpv, d = q.shape[0], cfg.tokens_per_view, cfg.d
    proj = params["input_proj"]
    qt = (q @ proj).reshape(n, tpv, d)
    ct = (c @ proj).reshape(n, tpv, d)
    sep = params["sep_token"].expand(n, 1, d)
    read = params["read_token"].expand(n, 1, d)
    return torch.cat([qt, sep, ct, read], dim=1) + params["pos_emb"]


def assemble_prompt(query: Embedding, candidate: Embedding, params: ScorerParams) -> torch.Tensor:
    """Single (seq_len, d) prompt for one query/candidate pair."""
    return assemble_prompts(params, query.vector, candidate.vector)[0]


# -- forward ----------------------------------------------------------------

def _project(x, params: ScorerParams, key: str, dropout_gen: torch.Generator | None):
    cfg = params.config
    W = params[key + ".weight"]
    a_key = key + ".lora_A"
    if a_key not in params.tensors:
        return x @ W
    A, B = params[a_key], params[key + ".lora_B"]
    if dropout_gen is None or cfg.lora_dropout == 0.0:
        return x @ effective_weight(W, A, B, cfg.lora_alpha, cfg.lora_rank, cfg.lora_scaling)
    keep = 1.0 - cfg.lora_dropout
    mask = torch.bernoulli(torch.full(x.shape, keep, dtype=DTYPE), generator=dropout_gen) / keep
    return x @ W + cfg.lora_scale * (((x * mask) @ A) @ B)


def hidden_states(
    params: ScorerParams,
    prompts: torch.Tensor,
    dropout_gen: torch.Generator | None = None,
    return_attn: bool = False,
):
    """Run the encoder; returns final hidden states (n, seq_len, d) [and attention maps]."""
    cfg = params.config
    x = prompts
    if x.ndim == 2:
        x = x.unsqueeze(0)
    if x.shape[1:] != (cfg.seq_len, cfg.d):
        raise DimensionMismatchError(
            f"prompt shape {tuple(x.shape[1:])} does not match ({cfg.seq_len}, {cfg.d})"
        )
    n, T, d = x.shape
    H = cfg.n_heads
    dh = d // H
    attn_maps = []
    for layer in range(cfg.n_layers):
        p = f"layers.{layer}."
        h = F.layer_norm(x, (d,), params[p + "norm1.weight"], params[p + "norm1.bias"])
        q = _project(h, params, p + "attn.q", dropout_gen).view(n, T, H, dh).transpose(1, 2)
        k = _project(h, params, p + "attn.k", dropout_gen).view(n, T, H, dh).transpose(1, 2)
        v = _project(h, params, p + "attn.v", dropout_gen).view(n, T, H, dh).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        if return_attn:
            attn_maps.append(att.detach())
        o = (att @ v).transpose(1, 2).reshape(n, T, d)
        x = x + _project(o, params, p + "attn.o", dropout_gen)
        h = F.layer_norm(x, (d,), params[p + "norm2.weight"], params[p + "norm2.bias"])
        u = F.gelu(_project(h, params, p + "mlp_in", dropout_gen))
        x = x + _project(u, params, p + "mlp_out", dropout_gen)
    if return_attn:
        return x, attn_maps
    return x


def forward_scores(params: ScorerParams, prompts: torch.Tensor, dropout_gen: torch.Generator | None = None):
    """Scores for a batch of prompts, shape (n,), in input order."""
    h = hidden_states(params, prompts, dropout_gen)
    s = h[:, -1, :] @ params["value_head"]
    if not torch.all(torch.isfinite(s)):
        raise NumericError("non-finite score in forward pass")
    return s


def forward_score(params: ScorerParams, prompt: torch.Tensor) -> float:
    if prompt.ndim != 2:
        raise DimensionMismatchError("forward_score takes a single (seq_len, d) prompt")
    return float(forward_scores(params, prompt)[0])


def score_pairs(params: ScorerParams, query_vecs, cand_vecs, chunk: int = 4096) -> np.ndarray:
    """Inference-mode scores for row-aligned pairs (no dropout, no autograd)."""
    q = np.asarray(query_vecs, dtype=np.float64)
    c = np.asarray(cand_vecs, dtype=np.float64)
    out = []
    with torch.no_grad():
        for start in range(0, len(q), chunk):
            prompts = assemble_prompts(params, q[start:start + chunk], c[start:start + chunk])
            out.append(forward_scores(params, prompts).numpy())
    return np.concatenate(out) if out else np.zeros(0)


# -- checkpoint format ------------------------------------------------------
# "SKLK" | u32 version | u32 len | config JSON | repeated tensor records:
#   u32 name_len | name utf-8 | u32 rank | u32 dims[rank] | f64 LE data

CHECKPOINT_MAGIC = b"SKLK"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(params: ScorerParams) -> bytes:
    cfg = json.dumps(params.config.to_dict(), sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg]
    for name, tensor in params.tensors.items():
        nb = name.encode()
        arr = tensor.detach().contiguous().numpy().astype("<f8", copy=False)
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(params: ScorerParams, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, checkpoint_bytes(params))


def params_from_bytes(data: bytes) -> ScorerParams:
    if data[:4] != CHECKPOINT_MAGIC:
        raise DataError("not a scorer checkpoint (bad magic)")
    try:
        version, cfg_len = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        off = 12
        cfg = ScorerConfig.from_dict(json.loads(data[off:off + cfg_len].decode()))
        off += cfg_len
        tensors = {}
        while off < len(data):
            (name_len,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + name_len].decode()
            off += name_len
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(dims)
            off += 8 * count
            tensors[name] = torch.from_numpy(arr.astype(np.float64))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"corrupt checkpoint: {exc}") from exc
    ref = init_params(cfg)
    if ref.tensors.keys() != tensors.keys():
        raise DataError("checkpoint tensor set does not match its config")
    for n, t in tensors.items():
        if t.shape != ref.tensors[n].shape:
            raise DataError(f"checkpoint tensor {n!r} has shape {tuple(t.shape)}")
    return ScorerParams(cfg, tensors)


def load_checkpoint(path: str | os.PathLike) -> ScorerParams:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return params_from_bytes(data)
