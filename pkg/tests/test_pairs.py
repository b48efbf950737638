import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from radalign.geometry import Trajectory
from radalign.pairs import (
    CONSECUTIVE,
    CROSS,
    PairCandidate,
    consecutive_pairs,
    eligible_cross_pairs,
    read_pairs_csv,
    sample_pairs,
    write_pairs_csv,
)
from radalign.synthetic import DriveData, DriveSpec, FleetDataset, generate_fleet, generate_scene

from conftest import small_scene


def fleet_from_positions(tracks: dict[str, np.ndarray]) -> FleetDataset:
    scene = generate_scene(small_scene(), 0)
    drives = []
    for k, xy in tracks.items():
        n = len(xy)
        xyt = np.column_stack([xy, np.zeros(n)])
        tr = Trajectory(k, np.arange(n, dtype=float), xyt)
        drives.append(DriveData(k, tr, tr, [np.zeros((0, 2))] * n, [[] for _ in range(n)]))
    return FleetDataset(scene, drives)


def brute_force(ds: FleetDataset, dmax: float) -> set:
    out = set()
    keys, xy = [], []
    for d in ds.drives:
        for i in range(len(d)):
            keys.append((d.drive_id, i))
            xy.append(d.noisy.xyt[i, :2])
    xy = np.array(xy)
    for i in range(len(keys)):
        for j in range(i + 1, len(keys)):
            if keys[i][0] != keys[j][0] and np.hypot(*(xy[i] - xy[j])) <= dmax:
                out.add(frozenset((keys[i], keys[j])))
    return out


def test_single_drive_only_consecutive(small_fleet):
    one = FleetDataset(small_fleet.scene, small_fleet.drives[:1])
    pairs = sample_pairs(one, rate=1.0, seed=0)
    assert all(p.kind == CONSECUTIVE for p in pairs)
    assert len(pairs) == len(one.drives[0]) - 1


def test_parallel_drives_match_brute_force():
    x = np.arange(100) * 3.0
    ds = fleet_from_positions(
        {"a": np.column_stack([x, np.zeros(100)]), "b": np.column_stack([x + 1.0, np.full(100, 5.0)])}
    )
    got = {p.unordered for p in sample_pairs(ds, 20.0, 1.0, 0) if p.kind == CROSS}
    assert got == brute_force(ds, 20.0)


def test_rate_binomial_interval():
    # 100 x 100 poses in one 10 m square: every cross pair is eligible
    rng = np.random.default_rng(0)
    ds = fleet_from_positions({"a": rng.uniform(0, 10, (100, 2)), "b": rng.uniform(0, 10, (100, 2))})
    assert len(eligible_cross_pairs(ds, 20.0)) == 10_000
    n = sum(p.kind == CROSS for p in sample_pairs(ds, 20.0, 0.10, seed=3))
    assert 800 <= n <= 1200


def test_rate_validation(small_fleet):
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            sample_pairs(small_fleet, rate=bad)
    with pytest.raises(ValueError):
        sample_pairs(small_fleet, max_distance=0.0)


def test_candidate_invariants():
    with pytest.raises(ValueError):
        PairCandidate(("a", 0), ("a", 3), CROSS)
    with pytest.raises(ValueError):
        PairCandidate(("a", 0), ("a", 2), CONSECUTIVE)
    with pytest.raises(ValueError):
        PairCandidate(("a", 0), ("b", 1), CONSECUTIVE)


def test_determinism_and_seed_dependence():
    ds = generate_fleet(small_scene(400.0), [DriveSpec("a"), DriveSpec("b", "reverse"), DriveSpec("c")], 1)
    a = sample_pairs(ds, rate=0.3, seed=5)
    assert a == sample_pairs(ds, rate=0.3, seed=5)
    b = sample_pairs(ds, rate=0.3, seed=6)
    cross_a = {p for p in a if p.kind == CROSS}
    cross_b = {p for p in b if p.kind == CROSS}
    assert cross_a != cross_b
    assert [p for p in a if p.kind == CONSECUTIVE] == [p for p in b if p.kind == CONSECUTIVE]
    assert [p for p in a if p.kind == CONSECUTIVE] == consecutive_pairs(ds)


@given(
    st.lists(st.tuples(st.floats(0, 60), st.floats(-10, 10)), min_size=1, max_size=25),
    st.lists(st.tuples(st.floats(0, 60), st.floats(-10, 10)), min_size=1, max_size=25),
    st.floats(1.0, 30.0),
    st.floats(0.05, 1.0),
    st.integers(0, 1000),
)
def test_subset_and_uniqueness(pa, pb, dmax, rate, seed):
    ds = fleet_from_positions({"a": np.array(pa), "b": np.array(pb)})
    pairs = sample_pairs(ds, dmax, rate, seed)
    cross = [p for p in pairs if p.kind == CROSS]
    truth = brute_force(ds, dmax)
    assert {p.unordered for p in cross} <= truth
    if rate == 1.0:
        assert {p.unordered for p in cross} == truth
    assert len({p.unordered for p in pairs}) == len(pairs)
    for p in cross:
        assert p.a[0] != p.b[0]


def test_csv_roundtrip(tmp_path, small_fleet):
    pairs = sample_pairs(small_fleet, rate=0.5, seed=1)
    path = tmp_path / "pairs.csv"
    write_pairs_csv(pairs, path)
    assert path.read_text().splitlines()[0] == "drive_a,idx_a,drive_b,idx_b,kind"
    assert read_pairs_csv(path) == pairs


def test_grid_hash_scales():
    # a long corridor: the spatial hash keeps candidate search near linear
    x = np.arange(4000) * 2.0
    ds = fleet_from_positions({"a": np.column_stack([x, np.zeros_like(x)]), "b": np.column_stack([x, np.ones_like(x)])})
    pairs = eligible_cross_pairs(ds, 20.0)
    # each pose of a sees the poses of b within +-sqrt(399) m along x
    per = 2 * math.floor(math.sqrt(399.0) / 2.0) + 1
    assert abs(len(pairs) - 4000 * per) <= 2 * per * per
