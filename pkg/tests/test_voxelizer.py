import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from bevgrid.voxelizer import (
    NUM_SE_CLASSES,
    LabeledPointCloud,
    SemanticVoxelGrid,
    VoxelGridSpec,
    binary_occupancy,
    point_to_index,
    semantic_occupancy,
)

UNIT = VoxelGridSpec(0, 1, 0, 1, 0, 1, 0.5, 0.5, 0.5)
RESOLUTIONS = (0.1, 0.2, 0.25, 0.4, 0.5, 0.8, 1.0, 2.0)


def random_spec(rng):
    args = []
    res = []
    for _ in range(3):
        r = float(rng.choice(RESOLUTIONS))
        n = int(rng.integers(1, 11))
        lo = float(rng.uniform(-20, 20))
        args += [lo, lo + n * r]
        res.append(r)
    return VoxelGridSpec(*args, *res)


def random_cloud(rng, spec, k):
    lo, hi = spec.mins, spec.maxs
    span = hi - lo
    pts = rng.uniform(lo - 0.1 * span, hi + 0.1 * span, (k, 3))
    # put some points exactly on the faces and corners
    n_edge = k // 20
    if n_edge:
        rows = rng.integers(0, k, n_edge)
        axes = rng.integers(0, 3, n_edge)
        pick = rng.integers(0, 2, n_edge)
        pts[rows, axes] = np.where(pick == 1, hi[axes], lo[axes])
    labels = rng.integers(1, NUM_SE_CLASSES, k)
    return pts, labels


def test_point_to_index_examples():
    assert point_to_index(UNIT, (0.5, 0.5, 0.5)) == (1, 1, 1)
    assert point_to_index(UNIT, (-0.1, 0.5, 0.5)) is None
    assert point_to_index(UNIT, (1.0, 1.0, 1.0)) == (1, 1, 1)
    assert point_to_index(UNIT, (0.0, 0.0, 0.0)) == (0, 0, 0)
    assert point_to_index(UNIT, (1.0 + 1e-12, 0.5, 0.5)) is None


def test_dims_exact():
    assert UNIT.dims == (2, 2, 2)
    spec = VoxelGridSpec(-51.2, 51.2, -51.2, 51.2, -5, 3, 0.8, 0.8, 0.5)
    assert spec.dims == (128, 128, 16)
    with pytest.raises(ValueError):
        VoxelGridSpec(0, 1, 0, 1, 0, 1, 0.3, 0.5, 0.5)
    with pytest.raises(ValueError):
        VoxelGridSpec(1, 0, 0, 1, 0, 1, 0.5, 0.5, 0.5)


def test_empty_cloud():
    assert not binary_occupancy(UNIT, np.zeros((0, 3))).values.any()
    sem = semantic_occupancy(UNIT, LabeledPointCloud.empty())
    assert not sem.class_ids.any() and not sem.labeled_mask.any()


def test_one_point_per_voxel_counts():
    centers = [(0.25 + 0.5 * i, 0.25 + 0.5 * j, 0.25 + 0.5 * k) for i in range(2) for j in range(2) for k in range(2)]
    for n in range(1, 9):
        grid = binary_occupancy(UNIT, centers[:n])
        assert grid.values.sum() == n
        np.testing.assert_array_equal(grid.values, oracles.binary_grid(UNIT, centers[:n]))


def test_majority_vote_and_tie():
    p = [(0.1, 0.1, 0.1)] * 3
    sem = semantic_occupancy(UNIT, LabeledPointCloud(p, [3, 3, 7]))
    assert sem.class_ids[0, 0, 0] == 3
    sem = semantic_occupancy(UNIT, LabeledPointCloud(p[:2], [5, 2]))
    assert sem.class_ids[0, 0, 0] == 2
    assert sem.labeled_mask.sum() == 1


def test_random_cloud_matches_loop_oracle():
    rng = np.random.default_rng(7)
    spec = random_spec(rng)
    pts, labels = random_cloud(rng, spec, 10_000)
    np.testing.assert_array_equal(binary_occupancy(spec, pts).values, oracles.binary_grid(spec, pts))
    sem = semantic_occupancy(spec, LabeledPointCloud(pts, labels))
    cls, mask = oracles.semantic_grid(spec, pts, labels)
    np.testing.assert_array_equal(sem.class_ids, cls)
    np.testing.assert_array_equal(sem.labeled_mask, mask)


def test_label_out_of_range_rejected():
    with pytest.raises(ValueError):
        semantic_occupancy(UNIT, LabeledPointCloud([(0.1, 0.1, 0.1)], [0]))
    with pytest.raises(ValueError):
        semantic_occupancy(UNIT, LabeledPointCloud([(0.1, 0.1, 0.1)], [17]))


def test_semantic_grid_invariants():
    with pytest.raises(ValueError):
        SemanticVoxelGrid(np.ones((1, 1, 1), dtype=int), np.zeros((1, 1, 1), dtype=bool))


@given(st.integers(0, 2**32 - 1), st.integers(0, 300))
def test_count_bound_and_permutation_invariance(seed, k):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng)
    pts, labels = random_cloud(rng, spec, k)
    grid = binary_occupancy(spec, pts)
    assert grid.values.sum() <= min(k, int(np.prod(spec.dims)))
    perm = rng.permutation(k)
    np.testing.assert_array_equal(binary_occupancy(spec, pts[perm]).values, grid.values)
    a = semantic_occupancy(spec, LabeledPointCloud(pts, labels))
    b = semantic_occupancy(spec, LabeledPointCloud(pts[perm], labels[perm]))
    assert a == b


@given(st.integers(0, 2**32 - 1), st.integers(1, 16))
def test_uniform_label_matches_binary(seed, c):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng)
    pts, _ = random_cloud(rng, spec, 200)
    sem = semantic_occupancy(spec, LabeledPointCloud(pts, np.full(200, c)))
    occ = binary_occupancy(spec, pts).values.astype(bool)
    np.testing.assert_array_equal(sem.labeled_mask, occ)
    assert np.all(sem.class_ids[occ] == c) and np.all(sem.class_ids[~occ] == 0)


@given(st.integers(0, 2**32 - 1))
def test_dims_match_extent(seed):
    spec = random_spec(np.random.default_rng(seed))
    for lo, hi, r, n in zip(spec.mins, spec.maxs, spec.resolution, spec.dims):
        assert abs((hi - lo) / r - n) < 1e-9
