"""Rigid transforms, point clouds, nearest-neighbour queries and chamfer distance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud, ValidationError

_IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# Quaternion helpers (w, x, y, z)
# ---------------------------------------------------------------------------

def canonical_quaternion(q) -> np.ndarray:
    """Normalize ``q`` and flip it into the w >= 0 hemisphere.

    When w is exactly zero the first nonzero vector component is made
    positive so that equal rotations always get equal coefficients.
    """
    q = np.asarray(q, dtype=float).reshape(4)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ValidationError(f"invalid quaternion {q!r}")
    if abs(n - 1.0) > 4e-16:  # leave already-unit input untouched so round trips are exact
        q = q / n
    if q[0] < 0.0:
        q = -q
    elif q[0] == 0.0:
        for c in q[1:]:
            if c != 0.0:
                if c < 0.0:
                    q = -q
                break
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(m) -> np.ndarray:
    """Shepperd's method; picks the numerically largest pivot."""
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    diag = (tr, m[0, 0], m[1, 1], m[2, 2])
    k = int(np.argmax(diag))
    if k == 0:
        s = 2.0 * math.sqrt(max(1.0 + tr, 0.0))
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif k == 1:
        s = 2.0 * math.sqrt(max(1.0 + m[0, 0] - m[1, 1] - m[2, 2], 0.0))
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif k == 2:
        s = 2.0 * math.sqrt(max(1.0 - m[0, 0] + m[1, 1] - m[2, 2], 0.0))
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(max(1.0 - m[0, 0] - m[1, 1] + m[2, 2], 0.0))
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return canonical_quaternion(q)


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = unit(axis)
    h = 0.5 * float(angle)
    return np.concatenate([[math.cos(h)], math.sin(h) * axis])


def quat_log(q: np.ndarray) -> np.ndarray:
    """Rotation vector (axis * angle, angle in [0, pi]) of a unit quaternion."""
    q = canonical_quaternion(q)
    v = q[1:]
    s = np.linalg.norm(v)
    if s < 1e-300:
        return np.zeros(3)
    angle = 2.0 * math.atan2(s, q[0])
    return v / s * angle


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(3)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0.0:
        raise ValidationError(f"cannot normalize vector {v!r}")
    return v if abs(n - 1.0) <= 4e-16 else v / n


# ---------------------------------------------------------------------------
# RigidTransform
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Element of SE(3): ``p -> R p + translation``.

    ``rotation`` is a unit quaternion (w, x, y, z), kept canonical (w >= 0).
    """

    rotation: np.ndarray = field(default_factory=lambda: _IDENTITY_QUAT.copy())
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValidationError(f"non-finite translation {t!r}")
        q = canonical_quaternion(self.rotation)
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_matrix(cls, m, atol: float = 1e-6) -> RigidTransform:
        """From a 4x4 homogeneous matrix (or a 3x4 [R|t] block)."""
        m = np.asarray(m, dtype=float)
        if m.shape not in ((4, 4), (3, 4)):
            raise ValidationError(f"expected a 4x4 matrix, got shape {m.shape}")
        r = m[:3, :3]
        if m.shape == (4, 4) and not np.allclose(m[3], [0, 0, 0, 1], atol=atol):
            raise ValidationError("bottom row of homogeneous matrix must be [0, 0, 0, 1]")
        if not np.allclose(r @ r.T, np.eye(3), atol=atol) or np.linalg.det(r) < 0:
            raise ValidationError("rotation block is not a proper rotation")
        return cls(matrix_to_quat(r), m[:3, 3])

    @classmethod
    def from_rotation_matrix(cls, r, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
        return cls(matrix_to_quat(r), translation)

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
        return cls(axis_angle_quat(axis, angle), translation)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
        rotvec = np.asarray(rotvec, dtype=float)
        angle = float(np.linalg.norm(rotvec))
        if angle == 0.0:
            return cls(_IDENTITY_QUAT, translation)
        return cls(axis_angle_quat(rotvec / angle, angle), translation)

    @classmethod
    def from_translation(cls, translation) -> RigidTransform:
        return cls(_IDENTITY_QUAT, translation)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix
        m[:3, 3] = self.translation
        return m

    def rotvec(self) -> np.ndarray:
        return quat_log(self.rotation)

    def angle(self) -> float:
        """Rotation angle in [0, pi]."""
        w = abs(float(self.rotation[0]))
        return 2.0 * math.atan2(float(np.linalg.norm(self.rotation[1:])), w)

    def inverse(self) -> RigidTransform:
        qi = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return RigidTransform(qi, -(quat_to_matrix(qi) @ self.translation))

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self @ other``: apply ``other`` first, then ``self``."""
        q = quat_multiply(self.rotation, other.rotation)
        t = self.rotation_matrix @ other.translation + self.translation
        return RigidTransform(q, t)

    __matmul__ = compose

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.rotation_matrix.T + self.translation

    def distance_to(self, other: RigidTransform) -> tuple[float, float]:
        """(geodesic rotation angle, translation distance) between two poses."""
        return rotation_angle_between(self.rotation, other.rotation), float(
            np.linalg.norm(self.translation - other.translation))

    def allclose(self, other: RigidTransform, atol: float = 1e-9) -> bool:
        rot, trans = self.distance_to(other)
        return rot <= atol and trans <= atol

    def __repr__(self) -> str:
        q = np.array2string(self.rotation, precision=6)
        t = np.array2string(self.translation, precision=6)
        return f"RigidTransform(rotation={q}, translation={t})"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def inverse(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def rotation_angle_between(qa: np.ndarray, qb: np.ndarray) -> float:
    """Geodesic distance on SO(3) between two unit quaternions."""
    if np.array_equal(qa, qb):
        return 0.0
    # atan2 form stays accurate for tiny angles, unlike arccos
    rel = quat_multiply(qa * np.array([1.0, -1.0, -1.0, -1.0]), qb)
    return 2.0 * math.atan2(float(np.linalg.norm(rel[1:])), abs(float(rel[0])))


# ---------------------------------------------------------------------------
# Point clouds
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PointCloud:
    """An (N, 3) array of points in meters with optional per-point labels."""

    points: np.ndarray
    scene_ids: Optional[np.ndarray] = None
    part_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValidationError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        for name in ("scene_ids", "part_ids"):
            ids = getattr(self, name)
            if ids is None:
                continue
            ids = np.array(ids, dtype=np.int64).reshape(-1)
            if ids.shape[0] != pts.shape[0]:
                raise ValidationError(f"{name} length {ids.shape[0]} != point count {pts.shape[0]}")
            ids.setflags(write=False)
            object.__setattr__(self, name, ids)

    def __len__(self) -> int:
        return self.points.shape[0]

    def require_nonempty(self, what: str = "point cloud") -> PointCloud:
        if len(self) == 0:
            raise EmptyCloud(f"{what} is empty")
        return self

    def centroid(self) -> np.ndarray:
        self.require_nonempty()
        return self.points.mean(axis=0)

    def subset(self, index) -> PointCloud:
        return PointCloud(
            self.points[index],
            None if self.scene_ids is None else self.scene_ids[index],
            None if self.part_ids is None else self.part_ids[index],
        )

    def with_labels(self, scene_id: Optional[int] = None, part_id: Optional[int] = None) -> PointCloud:
        n = len(self)
        return PointCloud(
            self.points,
            self.scene_ids if scene_id is None else np.full(n, scene_id),
            self.part_ids if part_id is None else np.full(n, part_id),
        )

    @staticmethod
    def concatenate(clouds) -> PointCloud:
        clouds = list(clouds)
        if not clouds:
            return PointCloud(np.zeros((0, 3)))
        pts = np.concatenate([c.points for c in clouds])

        def _cat(name):
            if any(getattr(c, name) is None for c in clouds):
                return None
            return np.concatenate([getattr(c, name) for c in clouds])

        return PointCloud(pts, _cat("scene_ids"), _cat("part_ids"))


def transform_cloud(t: RigidTransform, c: PointCloud) -> PointCloud:
    return PointCloud(t.apply(c.points), c.scene_ids, c.part_ids)


def point_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean distance, with a fixed summation order (x, y, z)."""
    d = a - b
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


class NearestNeighborIndex:
    """Exact nearest-neighbour queries over a fixed set of 3D points.

    Backed by a balanced k-d tree. Results equal an exhaustive scan: distances
    are recomputed with `point_distances` and exact ties go to the lowest
    point index.
    """

    _K = 4
    _TIE_RTOL = 1e-9

    def __init__(self, cloud):
        pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise EmptyCloud("cannot index an empty point cloud")
        self.points = pts
        self._tree = cKDTree(pts, balanced_tree=True, compact_nodes=True)

    def __len__(self) -> int:
        return self.points.shape[0]

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Return (distance, index) of the nearest indexed point for every query."""
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        n = len(self)
        k = min(self._K, n)
        _, idx = self._tree.query(q, k=k)
        idx = idx.reshape(len(q), k)
        cand = point_distances(q[:, None, :], self.points[idx])
        best_d = cand.min(axis=1)
        # among candidates at the minimum distance pick the lowest index
        masked = np.where(cand == best_d[:, None], idx, n)
        best_i = masked.min(axis=1)
        if k < n:
            # the k-th candidate may hide further ties; resolve those rows exhaustively
            slack = best_d * (1 + self._TIE_RTOL) + 1e-300
            unsure = np.nonzero(cand[:, -1] <= slack)[0]
            for r in unsure:
                near = self._tree.query_ball_point(q[r], float(slack[r]) * (1 + 1e-12) + 1e-15)
                near = np.asarray(sorted(near), dtype=np.int64)
                d = point_distances(q[r][None, :], self.points[near])
                j = int(np.argmin(d))
                best_d[r], best_i[r] = d[j], near[j]
        return best_d, best_i.astype(np.int64)


def linear_scan_nearest(points, queries) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive nearest-neighbour search (reference implementation)."""
    pts = np.asarray(points, dtype=float)
    out_d = np.empty(len(queries))
    out_i = np.empty(len(queries), dtype=np.int64)
    for r, q in enumerate(np.asarray(queries, dtype=float)):
        d = point_distances(pts, q[None, :])
        out_i[r] = int(np.argmin(d))
        out_d[r] = d[out_i[r]]
    return out_d, out_i


@dataclass(frozen=True)
class ChamferReport:
    symmetric_mean: float
    forward_mean: float
    backward_mean: float


def _as_points(c) -> np.ndarray:
    return c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=float).reshape(-1, 3)


def chamfer(a, b, index_a: Optional[NearestNeighborIndex] = None,
            index_b: Optional[NearestNeighborIndex] = None) -> ChamferReport:
    """Mean Euclidean nearest-neighbour distance in both directions.

    Prebuilt indices may be passed in when one cloud is scored repeatedly.
    """
    pa, pb = _as_points(a), _as_points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyCloud("chamfer distance needs two nonempty clouds")
    index_b = index_b or NearestNeighborIndex(pb)
    index_a = index_a or NearestNeighborIndex(pa)
    fwd, _ = index_b.query(pa)
    bwd, _ = index_a.query(pb)
    f = math.fsum(fwd) / len(fwd)
    b_ = math.fsum(bwd) / len(bwd)
    return ChamferReport((f + b_) / 2.0, f, b_)
