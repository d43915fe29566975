import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from redforge.nets import TOY_ARCH, Arch, init_params
from redforge.retrieval import (
    SourceCache,
    indicator_from_full,
    retrieve_otm,
    sample_sphere,
    trimmed_score,
    trimmed_scores,
    vote,
)
from redforge.shapes import build_database, generate_shape


def _field_with_norms(norms, seed=0):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(len(norms), 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True) * np.asarray(norms, float)[:, None]


def test_sphere_unit_norm_and_determinism():
    a = sample_sphere(50, 16, seed=3)
    assert np.all(np.abs(np.linalg.norm(a, axis=1) - 1) < 1e-9)
    assert np.array_equal(a, sample_sphere(50, 16, seed=3))
    assert not np.array_equal(a, sample_sphere(50, 16, seed=4))


def test_sphere_mean_concentrates():
    assert np.linalg.norm(sample_sphere(10000, 32, seed=0).mean(axis=0)) < 0.05


def test_sphere_rejects_bad_args():
    with pytest.raises(ValueError):
        sample_sphere(0, 8, 0)
    with pytest.raises(ValueError):
        sample_sphere(4, 1, 0)


def test_indicator_from_full():
    v = np.zeros(8)
    v[:2] = [3, 4]
    out = indicator_from_full(v)
    assert np.allclose(out[:2], [0.6, 0.8], atol=1e-15) and not np.any(out[2:])
    u = sample_sphere(1, 8, 0)[0]
    assert np.max(np.abs(indicator_from_full(u) - u)) < 1e-12
    with pytest.raises(ValueError):
        indicator_from_full(np.zeros(8))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40).filter(lambda v: np.linalg.norm(v) > 1e-6))
def test_indicator_always_on_sphere(v):
    assert abs(np.linalg.norm(indicator_from_full(v)) - 1) < 1e-6


def test_trimmed_hand_cases():
    R = _field_with_norms(np.arange(1, 11))
    assert trimmed_score(R, 0.1, "mean") == pytest.approx(5.0, abs=1e-12)
    assert trimmed_score(R, 0.1, "max") == pytest.approx(9.0, abs=1e-12)
    assert trimmed_score(np.zeros((10, 3)), 0.1, "mean") == 0.0
    assert trimmed_score(np.zeros((10, 3)), 0.1, "max") == 0.0


def test_trimmed_exact_on_integer_norms():
    norms = np.arange(1.0, 11.0)
    assert trimmed_scores(norms, 0.1, "mean") == 5.0
    assert trimmed_scores(norms, 0.1, "max") == 9.0
    # ceil: 0.15 * 10 = 1.5 -> 2 dropped
    assert trimmed_scores(norms, 0.15, "mean") == 4.5


def test_trim_everything_errors():
    with pytest.raises(ValueError):
        trimmed_score(np.ones((1, 3)), 0.5)
    with pytest.raises(ValueError):
        trimmed_score(np.ones((4, 3)), 1.0)
    with pytest.raises(ValueError):
        trimmed_score(np.ones((4, 3)), 0.1, "median")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3), st.sampled_from(["mean", "max"]))
def test_trimmed_permutation_and_scaling(seed, c, mode):
    rng = np.random.default_rng(seed)
    R = rng.normal(size=(30, 3))
    a = trimmed_score(R, 0.1, mode)
    assert trimmed_score(R[rng.permutation(30)], 0.1, mode) == a
    assert trimmed_score(R * c, 0.1, mode) == pytest.approx(a * c, rel=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_argmin_invariant_under_global_scaling(seed):
    rng = np.random.default_rng(seed)
    fields_ = rng.normal(size=(7, 5, 40, 3)) * rng.uniform(0.5, 2, size=(1, 5, 1, 1))
    ids = [f"s{k}" for k in range(5)]
    c = rng.uniform(0.01, 100)
    for mode in ("mean", "max"):
        norms = np.linalg.norm(fields_, axis=3)
        v1, _, t1 = vote(trimmed_scores(norms, 0.1, mode), ids, 3)
        v2, _, t2 = vote(trimmed_scores(norms * c, 0.1, mode), ids, 3)
        assert np.array_equal(v1, v2) and t1 == t2


def test_vote_ties_and_fill():
    ids = ["a", "b", "c", "d"]
    scores = np.array([[1.0, 1.0, 2.0, 3.0],   # tie -> a
                       [2.0, 0.5, 2.0, 3.0],   # b
                       [2.0, 0.5, 2.0, 3.0]])  # b
    votes, best, top = vote(scores, ids, 4)
    assert votes.tolist() == [1, 2, 0, 0] and votes.sum() == 3
    # voted first by votes, then unvoted by best score
    assert top == ["b", "a", "c", "d"]
    assert best.tolist() == [1.0, 0.5, 2.0, 3.0]


def test_vote_tie_uses_id_not_position():
    ids = ["z", "a"]
    votes, _, top = vote(np.array([[1.0, 1.0]]), ids, 1)
    assert votes.tolist() == [0, 1] and top == ["a"]


@pytest.fixture(scope="module")
def toy():
    arch = Arch(m=64, feat=8, enc_hidden=(6, 7), res_hidden=(9, 9, 7, 5), heads=4,
                reg_hidden=(6, 5), recon_hidden=(6, 7))
    return build_database(2, seed=1, m=64), init_params(arch, 0)


def test_single_source_gets_all_votes(toy):
    db, store = toy
    one = build_database(1, seed=2, m=64, categories=("table",))
    out = retrieve_otm(one, db.shapes[0].cloud, store, n_samples=25, top_k=10)
    assert out.votes.tolist() == [25] and out.top_k == one.ids


def test_votes_sum_and_json(toy):
    db, store = toy
    target = generate_shape("chair", 5, m=64).cloud
    out = retrieve_otm(db, target, store, n_samples=40, top_k=4, seed=3)
    assert out.votes.sum() == 40 and len(out.top_k) == 4
    data = json.loads(out.dumps("t0"))
    assert set(data) == {"target", "n_samples", "mode", "results", "top_k"}
    assert data["n_samples"] == 40 and len(data["results"]) == len(db)
    assert set(data["results"][0]) == {"id", "votes", "best_score"}
    assert [r["votes"] for r in data["results"]] == sorted((r["votes"] for r in data["results"]), reverse=True)


def test_cache_changes_nothing(toy):
    db, store = toy
    target = generate_shape("table", 6, m=64).cloud
    cache = SourceCache(store)
    a = retrieve_otm(db, target, store, n_samples=16, seed=1, cache=cache)
    assert len(cache) == len(db)
    b = retrieve_otm(db, target, store, n_samples=16, seed=1, cache=cache)
    c = retrieve_otm(db, target, store, n_samples=16, seed=1)
    for other in (b, c):
        assert np.array_equal(a.scores, other.scores) and a.top_k == other.top_k


def test_threads_change_nothing(toy):
    db, store = toy
    target = generate_shape("cabinet", 6, m=64).cloud
    a = retrieve_otm(db, target, store, n_samples=16, seed=2, threads=1)
    b = retrieve_otm(db, target, store, n_samples=16, seed=2, threads=3)
    assert np.array_equal(a.scores, b.scores) and a.top_k == b.top_k


def test_scores_match_single_field_path(toy):
    from redforge import autodiff as ad
    from redforge.autodiff import Tensor
    from redforge.nets import encode, predict_residual
    db, store = toy
    target = generate_shape("chair", 8, m=64).cloud
    out = retrieve_otm(db, target, store, n_samples=3, seed=5, mode="max")
    inds = sample_sphere(3, store.arch.feat, 5)
    with ad.no_grad():
        fe = encode(target, store, "enc_partial")
        gd = encode(db.shapes[2].cloud, store, "enc_source").global_
        for s in range(3):
            R = predict_residual(fe.pointwise, fe.global_, gd, inds[s], store)
            assert out.scores[s, 2] == pytest.approx(trimmed_score(R, 0.1, "max"), rel=1e-10)


def test_empty_db_rejected(toy):
    from redforge.shapes import SourceDatabase
    _, store = toy
    with pytest.raises(ValueError):
        retrieve_otm(SourceDatabase([], [], 64), np.zeros((64, 3)), store)
