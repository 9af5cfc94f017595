import numpy as np
import pytest
import torch

from skyrank.embedding import Embedding, View, build_gallery
from skyrank.scorer import ScorerConfig

torch.set_num_threads(1)

TINY = ScorerConfig(d=16, n_layers=1, n_heads=2, lora_rank=4, input_dim=8, seed=3)


def random_gallery(rng: np.random.Generator, n: int, dim: int, prefix: str = "g"):
    vecs = rng.standard_normal((n, dim))
    return build_gallery(Embedding(f"{prefix}{i}", vecs[i], View.REFERENCE) for i in range(n))


def random_query(rng: np.random.Generator, dim: int, qid: str = "q"):
    return Embedding(qid, rng.standard_normal(dim), View.QUERY)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance results collected by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
