import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kinfit.core import (NearestNeighborIndex, PointCloud, RigidTransform, canonical_quaternion, chamfer,
                         compose, inverse, linear_scan_nearest, matrix_to_quat, quat_to_matrix,
                         transform_cloud)
from kinfit.errors import EmptyCloud, ValidationError


def brute_force_chamfer(a, b):
    """All-pairs double loop in plain Python floats."""
    def directed(src, dst):
        mins = []
        for p in src:
            best = math.inf
            for q in dst:
                dx, dy, dz = p[0] - q[0], p[1] - q[1], p[2] - q[2]
                best = min(best, math.sqrt(dx * dx + dy * dy + dz * dz))
            mins.append(best)
        return math.fsum(mins) / len(mins)
    a, b = a.tolist(), b.tolist()
    f, bk = directed(a, b), directed(b, a)
    return (f + bk) / 2.0, f, bk


def random_transform(rng, scale=1.0):
    return RigidTransform.from_rotvec(rng.normal(size=3), rng.normal(size=3) * scale)


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
vec3 = st.tuples(finite, finite, finite)


# --- compose / inverse / transform_cloud ----------------------------------------------------

def test_compose_identity():
    assert compose(RigidTransform.identity(), RigidTransform.identity()).allclose(RigidTransform.identity())


def test_quarter_turns_make_half_turn():
    rz = RigidTransform.from_axis_angle((0, 0, 1), math.pi / 2)
    np.testing.assert_allclose(compose(rz, rz).apply([1.0, 0, 0]), [-1.0, 0, 0], atol=1e-12)


def test_compose_applies_right_first():
    a = RigidTransform.from_translation((1, 0, 0))
    b = RigidTransform.from_axis_angle((0, 0, 1), math.pi / 2)
    np.testing.assert_allclose(compose(a, b).apply([1.0, 0, 0]), a.apply(b.apply([1.0, 0, 0])), atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(vec3, vec3)
def test_compose_with_inverse_is_identity(rv, t):
    T = RigidTransform.from_rotvec(rv, t)
    rot, trans = compose(T, inverse(T)).distance_to(RigidTransform.identity())
    assert rot < 1e-9 and trans < 1e-9
    assert abs(np.linalg.norm(compose(T, T).rotation) - 1) < 1e-9


def test_transform_cloud_examples():
    cloud = PointCloud([[0.0, 0.0, 0.0]], scene_ids=[4])
    moved = transform_cloud(RigidTransform.from_translation((0, 0, 1)), cloud)
    np.testing.assert_array_equal(moved.points, [[0, 0, 1]])
    np.testing.assert_array_equal(moved.scene_ids, [4])
    rz = RigidTransform.from_axis_angle((0, 0, 1), math.pi / 2)
    np.testing.assert_allclose(transform_cloud(rz, PointCloud([[1.0, 0, 0]])).points, [[0, 1, 0]], atol=1e-12)
    rng = np.random.default_rng(0)
    c = PointCloud(rng.normal(size=(10, 3)))
    np.testing.assert_array_equal(transform_cloud(RigidTransform.identity(), c).points, c.points)


# --- quaternions --------------------------------------------------------------------------

@settings(max_examples=300, deadline=None)
@given(st.tuples(finite, finite, finite, finite).filter(lambda q: np.linalg.norm(q) > 1e-3))
def test_quaternion_matrix_round_trip(q):
    q = canonical_quaternion(q)
    back = matrix_to_quat(quat_to_matrix(q))
    assert min(np.abs(back - q).max(), np.abs(back + q).max()) < 1e-9
    assert back[0] >= 0


def test_half_turn_round_trip():
    for axis in np.eye(3):
        q = RigidTransform.from_axis_angle(axis, math.pi).rotation
        back = matrix_to_quat(quat_to_matrix(q))
        assert min(np.abs(back - q).max(), np.abs(back + q).max()) < 1e-12


def test_from_matrix_rejects_non_rotation():
    m = np.eye(4)
    m[0, 0] = -1
    with pytest.raises(ValidationError):
        RigidTransform.from_matrix(m)


def test_point_cloud_rejects_non_finite():
    with pytest.raises(ValidationError):
        PointCloud([[0, 0, np.nan]])


# --- nearest neighbour ----------------------------------------------------------------------

def test_kdtree_matches_linear_scan():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-1, 1, size=(500, 3))
    queries = rng.uniform(-1.2, 1.2, size=(1000, 3))
    d, i = NearestNeighborIndex(pts).query(queries)
    d0, i0 = linear_scan_nearest(pts, queries)
    np.testing.assert_array_equal(i, i0)
    np.testing.assert_array_equal(d, d0)


def test_ties_go_to_lowest_index():
    # a query equidistant from many points of an integer grid, plus duplicates
    grid = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float)
    pts = np.concatenate([grid[::-1], grid])
    d, i = NearestNeighborIndex(pts).query([[0.0, 0.0, 0.0]])
    d0, i0 = linear_scan_nearest(pts, [[0.0, 0.0, 0.0]])
    assert i[0] == i0[0] == 0 and d[0] == d0[0]
    dup = np.array([[0.0, 0, 0]] * 6 + [[1.0, 0, 0]])
    _, j = NearestNeighborIndex(dup[::-1].copy()).query([[0.0, 0, 0]])
    assert j[0] == 1


def test_empty_index_raises():
    with pytest.raises(EmptyCloud):
        NearestNeighborIndex(np.empty((0, 3)))


# --- chamfer --------------------------------------------------------------------------------

def test_chamfer_self_is_zero():
    c = np.random.default_rng(2).normal(size=(50, 3))
    r = chamfer(c, c)
    assert r.symmetric_mean == r.forward_mean == r.backward_mean == 0.0


def test_chamfer_single_points():
    assert chamfer([[0.0, 0, 0]], [[0.0, 0, 2]]).symmetric_mean == 2.0


def test_chamfer_seed7_matches_brute_force():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(100, 3)), rng.normal(size=(100, 3))
    r = chamfer(a, b)
    assert (r.symmetric_mean, r.forward_mean, r.backward_mean) == brute_force_chamfer(a, b)


@pytest.mark.parametrize("case", range(20))
def test_chamfer_matches_brute_force(case):
    rng = np.random.default_rng(100 + case)
    a = rng.normal(size=(rng.integers(1, 80), 3)) * rng.uniform(0.01, 3)
    b = rng.normal(size=(rng.integers(1, 80), 3)) + rng.normal(size=3)
    if case % 4 == 0:  # quantised coordinates create many exact ties
        a, b = np.round(a, 1), np.round(b, 1)
    r = chamfer(a, b)
    assert (r.symmetric_mean, r.forward_mean, r.backward_mean) == brute_force_chamfer(a, b)


def test_chamfer_symmetric_field_is_symmetric():
    rng = np.random.default_rng(3)
    for _ in range(10):
        a, b = rng.normal(size=(40, 3)), rng.normal(size=(70, 3))
        r1, r2 = chamfer(a, b), chamfer(b, a)
        assert r1.symmetric_mean == r2.symmetric_mean
        assert r1.symmetric_mean == (r1.forward_mean + r1.backward_mean) / 2


def test_chamfer_rigid_invariance():
    rng = np.random.default_rng(4)
    for _ in range(10):
        a, b = rng.normal(size=(60, 3)), rng.normal(size=(60, 3))
        T = random_transform(rng)
        assert abs(chamfer(T.apply(a), T.apply(b)).symmetric_mean - chamfer(a, b).symmetric_mean) < 1e-9


def test_chamfer_empty_raises():
    with pytest.raises(EmptyCloud):
        chamfer(np.empty((0, 3)), [[0.0, 0, 0]])
