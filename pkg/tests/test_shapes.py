import json

import numpy as np
import pytest

from redforge import autodiff as ad
from redforge.formats import FormatError
from redforge.geometry import chamfer_distance, reflect_bilateral
from redforge.shapes import (
    CATEGORIES,
    build_database,
    check_shape,
    generate_shape,
    load_database,
    mirror_partners,
    part_mean_pool,
    save_database,
)


@pytest.mark.parametrize("category,n_parts", [("chair", 6), ("table", 5), ("cabinet", 3)])
def test_generate_part_counts_and_invariants(category, n_parts):
    s = generate_shape(category, seed=1)
    assert s.n_parts == n_parts
    assert s.cloud.shape == (1024, 3)
    assert all(check_shape(s).values()), check_shape(s)


def test_generate_deterministic():
    a, b = generate_shape("table", 2), generate_shape("table", 2)
    assert a == b
    assert a != generate_shape("table", 3)


@pytest.mark.parametrize("seed", range(8))
@pytest.mark.parametrize("category", CATEGORIES)
def test_generated_shapes_are_symmetric(category, seed):
    s = generate_shape(category, seed, m=256)
    assert chamfer_distance(s.cloud, reflect_bilateral(s.cloud)) < 5e-3
    assert all(check_shape(s).values())


def test_connectivity_chair():
    s = generate_shape("chair", 5)
    # seat touches back and all four legs; legs touch nothing else
    assert sorted(s.connectivity) == [(0, 1), (0, 2), (0, 3), (0, 4), (0, 5)]


def test_mirror_partners_chair_legs():
    s = generate_shape("chair", 0)
    partner = mirror_partners(s.centers, s.extents)
    assert partner[0] == 0 and partner[1] == 1
    assert sorted(partner[2:]) == [2, 3, 4, 5] and all(partner[i] != i for i in range(2, 6))


def test_shape_is_normalized():
    s = generate_shape("cabinet", 4)
    lo = (s.centers - s.extents / 2).min(axis=0)
    hi = (s.centers + s.extents / 2).max(axis=0)
    assert np.isclose(((hi - lo) / 2).max(), 1.0)
    assert np.allclose((hi + lo) / 2, 0.0, atol=1e-12)


def test_part_mean_pool_constant():
    v = np.array([1.5, -2.0, 3.0])
    out = part_mean_pool(ad.Tensor(np.tile(v, (7, 1))), [0, 1, 2, 0, 1, 2, 2])
    assert np.allclose(out.data, np.tile(v, (3, 1)), atol=1e-15)


def test_part_mean_pool_two_points():
    out = part_mean_pool(ad.Tensor(np.eye(2)), [0, 0])
    assert np.allclose(out.data, [[0.5, 0.5]])


def test_part_mean_pool_matches_direct_sum():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(16, 4))
    labels = rng.integers(0, 3, size=16)
    labels[:3] = [0, 1, 2]
    out = part_mean_pool(ad.Tensor(f), labels, 3).data
    for i in range(3):
        rows = [f[j] for j in range(16) if labels[j] == i]
        direct = [sum(r[c] for r in rows) / len(rows) for c in range(4)]
        assert np.allclose(out[i], direct, atol=1e-14)


def test_part_mean_pool_empty_part():
    with pytest.raises(ValueError, match="empty part"):
        part_mean_pool(ad.Tensor(np.ones((3, 2))), [0, 0, 2], 3)


def test_database_build_and_roundtrip(tmp_path):
    db = build_database(10, seed=0, m=128)
    assert len(db) == 30 and len(set(db.ids)) == 30
    assert db.ids == sorted(db.ids)
    assert all(db.checks.values())
    save_database(db, tmp_path / "db")
    back = load_database(tmp_path / "db")
    assert back.ids == db.ids
    assert all(a == b for a, b in zip(back.shapes, db.shapes))
    assert back.checks == db.checks


def test_database_seed_changes_shapes():
    a, b = build_database(1, seed=0, m=64), build_database(1, seed=1, m=64)
    assert a.shapes[0] != b.shapes[0]


def test_database_truncated_cloud(tmp_path):
    db = build_database(1, seed=0, m=64)
    save_database(db, tmp_path)
    p = tmp_path / "clouds" / f"{db.ids[0]}.pcf"
    p.write_bytes(p.read_bytes()[:100])
    with pytest.raises(FormatError) as err:
        load_database(tmp_path)
    assert err.value.section == "points" and err.value.offset == 8


def test_database_bad_manifest(tmp_path):
    db = build_database(1, seed=0, m=64)
    save_database(db, tmp_path)
    man = tmp_path / "manifest.json"
    text = man.read_text()
    man.write_text(text[: len(text) // 2])
    with pytest.raises(FormatError) as err:
        load_database(tmp_path)
    assert err.value.section == "manifest" and err.value.offset > 0


def test_database_missing_field(tmp_path):
    db = build_database(1, seed=0, m=64)
    save_database(db, tmp_path)
    man = tmp_path / "manifest.json"
    data = json.loads(man.read_text())
    del data["shapes"][1]["parts"]
    man.write_text(json.dumps(data, indent=1))
    with pytest.raises(FormatError, match=r"manifest.shapes\[1\]"):
        load_database(tmp_path)
