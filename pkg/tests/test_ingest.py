import json
from pathlib import Path

import numpy as np
import pytest

from kinfit.core import PointCloud, RigidTransform
from kinfit.errors import (InconsistentParts, MalformedPly, MissingFile, NoValidDepth, PartNotInMask,
                           SchemaError, UnsupportedFormat)
from kinfit.ingest import (CameraIntrinsics, Observation, SceneSet, backproject, load_manifest, project,
                           read_depth_pgm, read_pgm, read_ply, subsample, voxel_downsample,
                           write_depth_pgm, write_manifest, write_pgm, write_ply)

DATA = Path(__file__).parent / "data"
K = CameraIntrinsics(fx=500.0, fy=400.0, cx=3.0, cy=2.0, width=8, height=6)


def observation(depth, mask, pose=None, scene_id=0, k=K):
    return Observation(scene_id, pose or RigidTransform.identity(), np.asarray(depth, dtype=float),
                       np.asarray(mask), k)


# --- PLY -----------------------------------------------------------------------------------

def test_cube_fixture_exact():
    cloud = read_ply(DATA / "cube.ply")
    expected = np.array([[0.25, 0, -1.25], [0.75, 0, -1.25], [0.75, 0.5, -1.25], [0.25, 0.5, -1.25],
                         [0.25, 0, -0.75], [0.75, 0, -0.75], [0.75, 0.5, -0.75], [0.25, 0.5, -0.75]])
    np.testing.assert_array_equal(cloud.points, expected)


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip_three_points(tmp_path, binary):
    c = PointCloud([[0.1, -2.5, 3.0], [1e-12, 7.25, -0.3], [123.456, 0.0, 1 / 3]])
    write_ply(tmp_path / "c.ply", c, binary=binary)
    back = read_ply(tmp_path / "c.ply")
    np.testing.assert_array_equal(back.points, c.points)


def test_ply_round_trip_labels_and_order(tmp_path):
    rng = np.random.default_rng(0)
    c = PointCloud(rng.normal(size=(500, 3)), scene_ids=rng.integers(0, 3, 500), part_ids=rng.integers(1, 5, 500))
    for binary in (True, False):
        write_ply(tmp_path / "c.ply", c, binary=binary)
        back = read_ply(tmp_path / "c.ply")
        np.testing.assert_array_equal(back.points, c.points)
        np.testing.assert_array_equal(back.scene_ids, c.scene_ids)
        np.testing.assert_array_equal(back.part_ids, c.part_ids)


def test_ply_float_precision_within_float32(tmp_path):
    c = PointCloud(np.random.default_rng(1).normal(size=(50, 3)))
    write_ply(tmp_path / "f.ply", c, precision="float")
    np.testing.assert_allclose(read_ply(tmp_path / "f.ply").points, c.points, rtol=1e-7)


def test_big_endian_rejected(tmp_path):
    p = tmp_path / "be.ply"
    p.write_bytes(b"ply\nformat binary_big_endian 1.0\nelement vertex 1\nproperty float x\n"
                  b"property float y\nproperty float z\nend_header\n" + b"\0" * 12)
    with pytest.raises(UnsupportedFormat):
        read_ply(p)


def test_malformed_ply(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_bytes(b"not a ply\n")
    with pytest.raises(MalformedPly):
        read_ply(p)
    p.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
                  b"property float z\nend_header\n1 2 3\n")
    with pytest.raises(MalformedPly):
        read_ply(p)
    with pytest.raises(MissingFile):
        read_ply(tmp_path / "absent.ply")


# --- back-projection ------------------------------------------------------------------------

def test_backproject_principal_ray():
    depth = np.zeros((6, 8))
    mask = np.zeros((6, 8), dtype=int)
    depth[2, 3], mask[2, 3] = 1.0, 1
    np.testing.assert_allclose(backproject(observation(depth, mask), 1).points, [[0, 0, 1]])


def test_backproject_unit_tangent():
    k = CameraIntrinsics(fx=2.0, fy=2.0, cx=1.0, cy=1.0, width=4, height=3)
    depth = np.zeros((3, 4))
    mask = np.zeros((3, 4), dtype=int)
    depth[1, 3], mask[1, 3] = 2.0, 5  # u = cx + fx
    np.testing.assert_allclose(backproject(observation(depth, mask, k=k), 5).points, [[2, 0, 2]])


def test_backproject_four_pixels_with_translation():
    depth = np.zeros((6, 8))
    mask = np.zeros((6, 8), dtype=int)
    pixels = [(0, 0, 1.0), (5, 1, 2.0), (7, 4, 0.5), (3, 5, 1.5)]  # (u, v, d)
    for u, v, d in pixels:
        depth[v, u], mask[v, u] = d, 2
    pose = RigidTransform.from_translation((0, 0, 0.5))
    got = backproject(observation(depth, mask, pose), 2).points
    # row-major pixel order: (0,0), (5,1), (7,4), (3,5); x = (u-3)d/500, y = (v-2)d/400, z = d + 0.5
    expected = np.array([[-3 * 1.0 / 500, -2 * 1.0 / 400, 1.5],
                         [2 * 2.0 / 500, -1 * 2.0 / 400, 2.5],
                         [4 * 0.5 / 500, 2 * 0.5 / 400, 1.0],
                         [0.0, 3 * 1.5 / 400, 2.0]])
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-15)


def test_backproject_errors():
    depth = np.ones((6, 8))
    mask = np.zeros((6, 8), dtype=int)
    with pytest.raises(PartNotInMask):
        backproject(observation(depth, mask), 1)
    mask[0, 0] = 1
    depth[0, 0] = 0.0
    with pytest.raises(NoValidDepth):
        backproject(observation(depth, mask), 1)


def test_reprojection_within_half_pixel():
    rng = np.random.default_rng(2)
    k = CameraIntrinsics(fx=525.0, fy=520.0, cx=319.5, cy=239.5, width=640, height=480)
    depth = rng.uniform(0.3, 3.0, size=(480, 640))
    depth[rng.random((480, 640)) < 0.1] = 0
    mask = rng.integers(0, 4, size=(480, 640))
    pose = RigidTransform.from_rotvec((0.2, -0.4, 0.1), (0.5, -1.0, 2.0))
    obs = Observation(0, pose, depth, mask, k)
    for part in (1, 2, 3):
        pts = backproject(obs, part).points
        v, u = np.nonzero((mask == part) & (depth > 0))
        uv, z = project(pts, pose, k)
        assert np.abs(uv - np.column_stack([u, v])).max() < 0.5
        np.testing.assert_allclose(z, depth[v, u], rtol=1e-12)


# --- PGM ----------------------------------------------------------------------------------

def test_pgm_round_trips(tmp_path):
    rng = np.random.default_rng(3)
    mask = rng.integers(0, 6, size=(5, 7))
    write_pgm(tmp_path / "m.pgm", mask)
    np.testing.assert_array_equal(read_pgm(tmp_path / "m.pgm"), mask)
    depth = np.round(rng.uniform(0, 5, size=(5, 7)), 3)
    write_depth_pgm(tmp_path / "d.pgm", depth)
    np.testing.assert_allclose(read_depth_pgm(tmp_path / "d.pgm"), depth, atol=1e-12)


def test_ascii_pgm_with_comment(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P2\n# made by hand\n3 2\n9\n0 1 2\n3 4 9\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), [[0, 1, 2], [3, 4, 9]])


# --- scene sets / manifests -----------------------------------------------------------------

def two_by_two(rng):
    return SceneSet([{1: PointCloud(rng.normal(size=(20, 3))), 2: PointCloud(rng.normal(size=(30, 3)))}
                     for _ in range(2)])


def test_manifest_two_scenes_two_parts(tmp_path):
    ss = two_by_two(np.random.default_rng(4))
    write_manifest(tmp_path / "manifest.json", ss)
    loaded = load_manifest(tmp_path / "manifest.json")
    assert len(loaded) == 2 and loaded.part_ids == [1, 2]
    for s in range(2):
        for p in (1, 2):
            np.testing.assert_array_equal(loaded.cloud(s, p).points, ss.cloud(s, p).points)


def test_manifest_missing_part_raises(tmp_path):
    ss = two_by_two(np.random.default_rng(5))
    write_manifest(tmp_path / "manifest.json", ss)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    del doc["scenes"][1]["parts"]["2"]
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(InconsistentParts) as info:
        load_manifest(tmp_path / "manifest.json")
    assert info.value.details["scene"] == 1


def test_manifest_schema_errors(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"scenes": [{"id": 0, "parts": {"1": {"ply": "x.ply"}}}], "extra": 1}))
    with pytest.raises(SchemaError):
        load_manifest(p)
    p.write_text(json.dumps({"scenes": [{"id": 0}]}))
    with pytest.raises(SchemaError):
        load_manifest(p)
    with pytest.raises(MissingFile):
        load_manifest(tmp_path / "nope.json")


def test_manifest_observations_equal_backprojection(tmp_path):
    # two posed views of one scene; the manifest path must equal backproject + merge
    rng = np.random.default_rng(6)
    k = CameraIntrinsics(fx=60.0, fy=60.0, cx=15.5, cy=11.5, width=32, height=24)
    scenes, observations = [], {}
    for sid in (0, 1):
        entries = []
        for view in range(2):
            depth = np.round(rng.uniform(0.5, 2.0, size=(24, 32)), 3)
            mask = rng.integers(0, 3, size=(24, 32))
            pose = RigidTransform.from_rotvec(rng.normal(size=3) * 0.3, rng.normal(size=3))
            stem = f"s{sid}v{view}"
            write_depth_pgm(tmp_path / f"{stem}_d.pgm", depth)
            write_pgm(tmp_path / f"{stem}_m.pgm", mask)
            entries.append({"depth": f"{stem}_d.pgm", "mask": f"{stem}_m.pgm",
                            "pose": pose.matrix().ravel().tolist(),
                            "intrinsics": {"fx": 60.0, "fy": 60.0, "cx": 15.5, "cy": 11.5,
                                           "width": 32, "height": 24}})
            observations.setdefault(sid, []).append(Observation(sid, pose, depth, mask, k))
        scenes.append({"id": sid, "observations": entries})
    (tmp_path / "m.json").write_text(json.dumps({"scenes": scenes, "voxel_size_m": 0}))
    loaded = load_manifest(tmp_path / "m.json")
    for s, sid in enumerate((0, 1)):
        for part in (1, 2):
            expected = np.concatenate([backproject(o, part).points for o in observations[sid]])
            np.testing.assert_allclose(loaded.cloud(s, part).points, expected, rtol=0, atol=1e-12)


def test_voxel_downsample_centroids():
    pts = np.array([[0.001, 0.001, 0.001], [0.003, 0.003, 0.003], [0.011, 0.0, 0.0]])
    out = voxel_downsample(PointCloud(pts), 0.005)
    np.testing.assert_allclose(out.points, [[0.002, 0.002, 0.002], [0.011, 0, 0]])
    np.testing.assert_array_equal(voxel_downsample(PointCloud(pts), 0.0).points, pts)


def test_subsample_keeps_part_set_and_minimum():
    rng = np.random.default_rng(7)
    ss = SceneSet([{1: PointCloud(rng.normal(size=(2000, 3))), 2: PointCloud(rng.normal(size=(400, 3))),
                    3: PointCloud(rng.normal(size=(10, 3)))} for _ in range(3)])
    for frac in (0.05, 0.5):
        sub = subsample(ss, frac, min_points=50, seed=1)
        assert sub.part_ids == ss.part_ids and len(sub) == len(ss)
        for s in range(3):
            assert len(sub.cloud(s, 1)) == max(50, round(frac * 2000))
            assert len(sub.cloud(s, 2)) == max(50, round(frac * 400))
            assert len(sub.cloud(s, 3)) == 10
    again = subsample(ss, 0.05, seed=1)
    np.testing.assert_array_equal(again.cloud(2, 1).points, subsample(ss, 0.05, seed=1).cloud(2, 1).points)
