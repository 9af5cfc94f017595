import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from skyrank.embedding import Embedding, View
from skyrank.errors import DataError, DimensionMismatchError, ValidationError
from skyrank.scorer import (
    ScorerConfig,
    assemble_prompt,
    assemble_prompts,
    checkpoint_bytes,
    effective_weight,
    forward_score,
    forward_scores,
    init_params,
    load_checkpoint,
    params_from_bytes,
    save_checkpoint,
    score_pairs,
)

from conftest import TINY


def randomize(params, seed=0, scale=0.1):
    """Copy with nonzero LoRA B factors and value head."""
    g = torch.Generator().manual_seed(seed)
    out = params.clone()
    for n in out.trainable_names:
        if n.endswith(".lora_B") or n == "value_head":
            out.tensors[n] = scale * torch.randn(out.tensors[n].shape, generator=g, dtype=torch.float64)
    return out


def test_config_validation():
    with pytest.raises(ValidationError):
        ScorerConfig(d=10, n_heads=4)
    with pytest.raises(ValidationError):
        ScorerConfig(lora_rank=64)
    with pytest.raises(ValidationError):
        ScorerConfig(lora_targets=("q", "z"))
    with pytest.raises(ValidationError):
        ScorerConfig(lora_dropout=1.0)
    cfg = ScorerConfig(lora_targets=["q", "mlp"])
    assert cfg.adapted_matrices() == ("q", "mlp_in", "mlp_out")
    assert ScorerConfig.from_dict(cfg.to_dict()) == cfg


def test_init_deterministic_and_zero_heads():
    a, b = init_params(TINY), init_params(TINY)
    assert a.equal(b) and a.checksum() == b.checksum()
    assert not a.equal(init_params(dataclasses.replace(TINY, seed=4)))
    for n in a.trainable_names:
        if n.endswith(".lora_B") or n == "value_head":
            assert torch.count_nonzero(a[n]) == 0
    assert set(a.trainable_names) == {"value_head"} | {
        f"layers.0.attn.{t}.lora_{f}" for t in "qkv" for f in "AB"
    }


def test_effective_weight_at_init_is_base():
    p = init_params(TINY)
    for key in ("layers.0.attn.q", "layers.0.attn.k", "layers.0.attn.v"):
        W = p[key + ".weight"]
        assert torch.equal(effective_weight(W, p[key + ".lora_A"], p[key + ".lora_B"], 32, 4), W)


def test_effective_weight_examples():
    W = torch.eye(2, dtype=torch.float64)
    A = torch.tensor([[1.0], [0.0]], dtype=torch.float64)
    B = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    dW = effective_weight(W, A, B, alpha=1, r=1) - W
    assert torch.equal(dW, torch.tensor([[0.0, 1.0], [0.0, 0.0]], dtype=torch.float64))
    assert torch.equal(effective_weight(W, A, torch.zeros_like(B), 1, 1), W)
    assert torch.equal(effective_weight(W, A, B, 8, 1, scaling=False) - W, dW)
    with pytest.raises(DimensionMismatchError):
        effective_weight(W, A, B, 1, 2)


def _rank_row_reduction(M, tol=1e-9):
    """Gaussian elimination with partial pivoting: an SVD-free rank oracle."""
    M = np.array(M, dtype=np.float64)
    rows, cols = M.shape
    rank, r = 0, 0
    scale = max(np.abs(M).max(), 1.0)
    for c in range(cols):
        if r == rows:
            break
        piv = r + int(np.argmax(np.abs(M[r:, c])))
        if abs(M[piv, c]) <= tol * scale:
            continue
        M[[r, piv]] = M[[piv, r]]
        M[r + 1:] -= np.outer(M[r + 1:, c] / M[r, c], M[r])
        r += 1
        rank += 1
    return rank


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(8, 24))
def test_lora_delta_rank_bounded(seed, r, d):
    g = torch.Generator().manual_seed(seed)
    A = torch.randn(d, r, generator=g, dtype=torch.float64)
    B = torch.randn(r, d, generator=g, dtype=torch.float64)
    W = torch.randn(d, d, generator=g, dtype=torch.float64)
    dW = (effective_weight(W, A, B, 2.0 * r, r) - W).numpy()
    assert np.linalg.matrix_rank(dW) <= r
    assert _rank_row_reduction(dW, tol=1e-8) <= r


def test_prompt_shape_and_symmetry(rng):
    p = init_params(TINY)
    q = Embedding("q", rng.standard_normal(8), View.QUERY)
    c = Embedding("c", rng.standard_normal(8))
    x = assemble_prompt(q, c, p)
    assert x.shape == (TINY.seq_len, TINY.d) == (4, 16)
    assert torch.equal(x, assemble_prompt(q, c, p))
    swapped = assemble_prompt(Embedding("c", c.vector, View.QUERY), Embedding("q", q.vector), p)
    assert not torch.equal(x, swapped)
    # scale invariant because view vectors are normalised first
    assert torch.equal(x, assemble_prompt(q, Embedding("c", c.vector * 4.0), p))


def test_prompt_errors(rng):
    p = init_params(TINY)
    with pytest.raises(DimensionMismatchError):
        assemble_prompts(p, rng.standard_normal((2, 8)), rng.standard_normal((2, 7)))
    with pytest.raises(DimensionMismatchError):
        assemble_prompts(p, rng.standard_normal((2, 8)), rng.standard_normal((3, 8)))
    with pytest.raises(DataError):
        assemble_prompts(p, np.zeros(8), rng.standard_normal(8))


def test_zero_value_head_scores_zero(rng):
    p = init_params(TINY)
    prompts = assemble_prompts(p, rng.standard_normal((5, 8)), rng.standard_normal((5, 8)))
    assert torch.count_nonzero(forward_scores(p, prompts)) == 0
    assert forward_score(p, prompts[0]) == 0.0


def test_batched_scores_match_individual(rng):
    p = randomize(init_params(TINY))
    prompts = assemble_prompts(p, rng.standard_normal((7, 8)), rng.standard_normal((7, 8)))
    batched = forward_scores(p, prompts)
    single = [forward_score(p, prompts[i]) for i in range(7)]
    assert np.allclose(batched.numpy(), single, rtol=0, atol=1e-12)
    chunked = score_pairs(p, rng.standard_normal((9, 8)), rng.standard_normal((9, 8)), chunk=2)
    assert chunked.shape == (9,)


def test_scores_identical_across_thread_counts(rng):
    p = randomize(init_params(TINY))
    q, c = rng.standard_normal((6, 8)), rng.standard_normal((6, 8))
    old = torch.get_num_threads()
    try:
        torch.set_num_threads(1)
        a = score_pairs(p, q, c)
        torch.set_num_threads(2)
        b = score_pairs(p, q, c)
    finally:
        torch.set_num_threads(old)
    assert np.array_equal(a, b)


def test_a_irrelevant_while_b_zero(rng):
    p = init_params(TINY)
    p.tensors["value_head"] = torch.ones(TINY.d, dtype=torch.float64)
    prompts = assemble_prompts(p, rng.standard_normal((4, 8)), rng.standard_normal((4, 8)))
    base = forward_scores(p, prompts)
    for n in [n for n in p.trainable_names if n.endswith(".lora_A")]:
        p.tensors[n] = p.tensors[n] + 3.0
    assert torch.equal(forward_scores(p, prompts), base)


def test_dropout_only_in_training_mode(rng):
    p = randomize(init_params(TINY))
    prompts = assemble_prompts(p, rng.standard_normal((4, 8)), rng.standard_normal((4, 8)))
    eval_scores = forward_scores(p, prompts)
    g1, g2 = torch.Generator().manual_seed(5), torch.Generator().manual_seed(5)
    d1, d2 = forward_scores(p, prompts, g1), forward_scores(p, prompts, g2)
    assert torch.equal(d1, d2)
    assert not torch.equal(d1, eval_scores)


def test_checkpoint_roundtrip(tmp_path):
    p = randomize(init_params(ScorerConfig(d=16, n_heads=2, lora_rank=4, input_dim=8, lora_targets=("q", "o", "mlp"))))
    path = tmp_path / "s.sklk"
    save_checkpoint(p, path)
    back = load_checkpoint(path)
    assert back.equal(p)
    assert checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_rejects_corruption(tmp_path):
    data = checkpoint_bytes(init_params(TINY))
    with pytest.raises(DataError):
        params_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(DataError):
        params_from_bytes(data[:-100])
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.sklk")
