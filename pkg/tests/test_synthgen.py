import filecmp

import numpy as np
import pytest

from skyrank.curation import build_rank_dataset
from skyrank.embedding import cosine_similarity, retrieve_top_m
from skyrank.errors import DataError, ValidationError
from skyrank.evaluation import evaluate_run
from skyrank.pipeline import RunConfig
from skyrank.synthgen import WorldConfig, emit_world, generate_world, load_world, validate_world_files, view_rotation
from skyrank.training import compute_soft_labels, select_training_candidates

SMALL = dict(n_locations=60, queries_per_location=3, latent_dim=4, d_e=12)


def _retriever_r1(world, split="test"):
    qs = world.query_subset(split)
    return evaluate_run(
        [(retrieve_top_m(world.gallery, q, 1).ids, world.gt_map[q.id]) for q in qs], ks=(1,)
    ).recall_at[1]


def test_config_validation():
    for bad in (
        dict(latent_dim=40, d_e=32),
        dict(confuser_sim_target=1.0),
        dict(train_fraction=0.0),
        dict(noise_sigma=-1.0),
        dict(n_locations=1),
        dict(n_locations=3, train_fraction=0.1),
    ):
        with pytest.raises(ValidationError):
            WorldConfig(**bad)
    with pytest.raises(ValidationError):
        WorldConfig.from_dict({"bogus": 1})


def test_degenerate_world_is_perfect():
    w = generate_world(WorldConfig(**SMALL, view_gap=0.0, noise_sigma=0.0, n_confusers_per_location=0))
    assert _retriever_r1(w, "train") == 100.0 and _retriever_r1(w, "test") == 100.0


def test_structure_and_split():
    w = generate_world(WorldConfig(**SMALL, n_confusers_per_location=2))
    assert len(w.gallery) == 60 * 3
    assert len(w.queries) == 60 * 3
    assert set(w.gt_map) == {q.id for q in w.queries}
    assert all(gt in w.gallery for gt in w.gt_map.values())
    tr, te = set(w.split["train"]), set(w.split["test"])
    assert not tr & te and tr | te == set(w.gt_map)
    # splits hold whole locations
    train_locs = {w.gt_map[q] for q in tr}
    assert not train_locs & {w.gt_map[q] for q in te}
    validate_world_files(w.queries, w.gallery, w.gt_map, w.split)


def test_confuser_similarity_matches_target():
    cfg = WorldConfig(n_locations=500, queries_per_location=1, confuser_sim_target=0.95, n_confusers_per_location=2)
    w = generate_world(cfg)
    sims = [
        cosine_similarity(w.gallery[f"r{loc:05d}c{c}"].vector, w.gallery[f"r{loc:05d}"].vector)
        for loc in range(500)
        for c in (1, 2)
    ]
    assert len(sims) >= 1000
    assert abs(np.mean(sims) - 0.95) <= 0.02


def test_view_rotation_is_orthogonal():
    R = view_rotation(6, 0.7, np.random.default_rng(0))
    assert np.allclose(R @ R.T, np.eye(6), atol=1e-12)
    assert np.array_equal(view_rotation(6, 0.0, np.random.default_rng(0)), np.eye(6))


def test_view_gap_degrades_retrieval():
    means = []
    for gap in (0.0, 0.5, 1.0):
        r1 = [_retriever_r1(generate_world(WorldConfig(**SMALL, view_gap=gap, seed=s))) for s in range(5)]
        means.append(np.mean(r1))
    assert means[0] > means[1] > means[2]


def test_confusers_above_threshold_get_soft_labels():
    w = generate_world(WorldConfig(**SMALL, confuser_sim_target=0.95, noise_sigma=0.01))
    ds = build_rank_dataset(w.queries[:30], w.gallery, w.gt_map, m=10)
    rng = np.random.default_rng(0)
    for s in ds.samples:
        ids, gi = select_training_candidates(s, 7, rng)
        lab = compute_soft_labels([w.gallery[c] for c in ids], w.gallery[s.gt_id], 0.9)
        for c, l in zip(ids, lab.labels):
            if c.startswith(s.gt_id + "c"):
                assert l > 0.9
            elif c != s.gt_id:
                sim = cosine_similarity(w.gallery[c].vector, w.gallery[s.gt_id].vector)
                assert (l > 0) == (sim > 0.9)


@pytest.mark.parametrize("cfg", [WorldConfig(), RunConfig.load(env={}).world_config()], ids=["dataclass", "shipped"])
def test_default_world_calibration(cfg):
    w = generate_world(cfg)
    qs = w.query_subset("test")[::5]
    rep = evaluate_run([(retrieve_top_m(w.gallery, q, 10).ids, w.gt_map[q.id]) for q in qs], ks=(1, 10))
    assert 60.0 <= rep.recall_at[1] <= 80.0
    assert rep.recall_at[10] > 95.0


def test_emit_roundtrip_and_determinism(tmp_path):
    cfg = WorldConfig(**SMALL)
    w = generate_world(cfg)
    a = emit_world(w, tmp_path / "a")
    b = emit_world(generate_world(cfg), tmp_path / "b")
    for key in a:
        assert filecmp.cmp(a[key], b[key], shallow=False)
    back = load_world(tmp_path / "a")
    assert back.config == cfg
    assert back.gallery.ids == w.gallery.ids and np.array_equal(back.gallery.matrix, w.gallery.matrix)
    assert back.queries == w.queries and back.gt_map == w.gt_map and back.split == w.split


def test_load_world_rejects_bad_gt(tmp_path):
    w = generate_world(WorldConfig(**SMALL))
    paths = emit_world(w, tmp_path)
    paths["gt_map"].write_text('{"q00000_000": "nowhere"}')
    with pytest.raises(DataError):
        load_world(tmp_path)
