"""Rigid, prismatic and revolute joint models fitted to relative pose tracks."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .core import RigidTransform, axis_angle_quat, quat_log, quat_multiply, quat_to_matrix, unit
from .errors import (AmbiguousAxisWarning, DegenerateMotion, EstimationError, MissingScene,
                     ValidationError)

MIN_REVOLUTE_ANGLE = 1e-6
MIN_PRISMATIC_SPREAD = 1e-9


class JointKind(str, Enum):
    RIGID = "Rigid"
    PRISMATIC = "Prismatic"
    REVOLUTE = "Revolute"


@dataclass(frozen=True, eq=False)
class RelativePoseTrack:
    """Pose of ``child`` in the frame of ``parent``, one entry per scene."""

    parent: int
    child: int
    poses: tuple

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        if len(self.poses) < 2:
            raise ValidationError("a pose track needs at least 2 scenes")
        if self.parent == self.child:
            raise ValidationError("parent and child must differ")

    def __len__(self) -> int:
        return len(self.poses)


@dataclass(frozen=True, eq=False)
class JointModel:
    """Child pose in the parent frame as a function of one scalar q.

    Rigid: ``origin``. Prismatic: ``origin`` shifted by ``q * axis``.
    Revolute: ``origin`` rotated by q about the line through ``pivot`` along
    ``axis``. ``axis`` and ``pivot`` live in the parent frame.
    """

    kind: JointKind
    origin: RigidTransform
    axis: Optional[np.ndarray] = None
    pivot: Optional[np.ndarray] = None
    configurations: Optional[tuple] = None

    def __post_init__(self):
        kind = JointKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is JointKind.RIGID:
            if self.axis is not None or self.configurations is not None:
                raise ValidationError("rigid joints carry no axis or configurations")
            return
        if self.axis is None:
            raise ValidationError(f"{kind.value} joint needs an axis")
        object.__setattr__(self, "axis", unit(self.axis))
        if kind is JointKind.REVOLUTE:
            pivot = np.zeros(3) if self.pivot is None else np.asarray(self.pivot, dtype=float).reshape(3)
            object.__setattr__(self, "pivot", pivot)
        else:
            object.__setattr__(self, "pivot", None)
        if self.configurations is not None:
            object.__setattr__(self, "configurations", tuple(float(q) for q in self.configurations))

    def predict(self, q: float = 0.0) -> RigidTransform:
        return predict_pose(self, q)

    def motion(self, q: float) -> RigidTransform:
        """Parent-frame motion M(q) with ``predict(q) == M(q) @ origin``."""
        if self.kind is JointKind.RIGID:
            return RigidTransform.identity()
        if self.kind is JointKind.PRISMATIC:
            return RigidTransform.from_translation(q * self.axis)
        rq = axis_angle_quat(self.axis, q)
        return RigidTransform(rq, self.pivot - quat_to_matrix(rq) @ self.pivot)

    def q_range(self) -> tuple:
        if not self.configurations:
            return (0.0, 0.0)
        return (min(self.configurations), max(self.configurations))


def predict_pose(model: JointModel, q: float = 0.0) -> RigidTransform:
    if model.kind is JointKind.RIGID:
        return model.origin
    if not math.isfinite(q):
        raise ValidationError(f"joint value must be finite, got {q!r}")
    return model.motion(q) @ model.origin


@dataclass(frozen=True, eq=False)
class JointFitReport:
    model: JointModel
    pose_residual_rot: float
    pose_residual_trans: float
    chamfer_score: Optional[float] = None
    ambiguous_axis: bool = False


# ---------------------------------------------------------------------------
# Tracks from registrations
# ---------------------------------------------------------------------------

def world_poses(registrations: Sequence, frame: Optional[RigidTransform] = None) -> list:
    """World pose of a part per scene: registration of scene s applied to its frame."""
    frame = frame or RigidTransform.identity()
    return [_transform_of(r) @ frame for r in registrations]


def _transform_of(r) -> RigidTransform:
    return r if isinstance(r, RigidTransform) else r.transform


def relative_track(registrations: dict, parent: int, child: int,
                   frames: Optional[dict] = None) -> RelativePoseTrack:
    """Per-scene pose of ``child`` in ``parent`` from per-part registrations.

    ``registrations[p][s]`` maps part p from scene 0 onto scene s;
    ``frames[p]`` is part p's canonical frame in scene-0 world coordinates
    (identity when omitted).
    """
    frames = frames or {}
    for p in (parent, child):
        if p not in registrations:
            raise MissingScene(f"part {p} has no registrations", part=p)
    rp, rc = registrations[parent], registrations[child]
    if len(rp) != len(rc):
        missing = min(len(rp), len(rc))
        raise MissingScene(f"parts {parent} and {child} are registered in a different number of "
                           f"scenes ({len(rp)} vs {len(rc)})", scene=missing)
    wp = world_poses(rp, frames.get(parent))
    wc = world_poses(rc, frames.get(child))
    return RelativePoseTrack(parent, child, [a.inverse() @ b for a, b in zip(wp, wc)])


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def mean_rotation(quats) -> np.ndarray:
    """Chordal quaternion mean: sign-align to the first, average, renormalize."""
    qs = np.array([np.asarray(q, dtype=float) for q in quats])
    ref = qs[0]
    signs = np.where(qs @ ref < 0, -1.0, 1.0)
    total = (qs * signs[:, None]).sum(axis=0)
    return total / np.linalg.norm(total)


def pose_residuals(model: JointModel, track: RelativePoseTrack) -> tuple:
    """(mean geodesic rotation error, mean translation error) of the model's predictions."""
    qs = model.configurations or (0.0,) * len(track)
    rot, trans = [], []
    for q, pose in zip(qs, track.poses):
        r, t = predict_pose(model, q).distance_to(pose)
        rot.append(r)
        trans.append(t)
    return math.fsum(rot) / len(rot), math.fsum(trans) / len(trans)


def _report(model: JointModel, track: RelativePoseTrack, **kw) -> JointFitReport:
    rot, trans = pose_residuals(model, track)
    return JointFitReport(model, rot, trans, **kw)


def fit_rigid(track: RelativePoseTrack) -> JointFitReport:
    q = mean_rotation([p.rotation for p in track.poses])
    t = np.mean([p.translation for p in track.poses], axis=0)
    return _report(JointModel(JointKind.RIGID, RigidTransform(q, t)), track)


def _orient_by_first_motion(axis: np.ndarray, displacement: np.ndarray) -> np.ndarray:
    """Flip ``axis`` so the first clearly nonzero motion away from scene 0 is positive.

    ``displacement[s]`` is the signed motion of scene s relative to scene 0
    along ``axis``; "clearly" means at least 10% of the largest one.
    """
    big = np.max(np.abs(displacement))
    for d in displacement:
        if abs(d) > 0.1 * big:
            return axis if d > 0 else -axis
    return axis


def fit_prismatic(track: RelativePoseTrack) -> JointFitReport:
    q = mean_rotation([p.rotation for p in track.poses])
    ts = np.array([p.translation for p in track.poses])
    mean_t = ts.mean(axis=0)
    centered = ts - mean_t
    if np.max(np.linalg.norm(centered, axis=1)) < MIN_PRISMATIC_SPREAD:
        raise DegenerateMotion("translation does not vary across scenes; prismatic axis undefined",
                               parent=track.parent, child=track.child)
    _, _, vt = np.linalg.svd(centered)
    axis = _orient_by_first_motion(vt[0], (ts - ts[0]) @ vt[0])
    configs = centered @ axis
    model = JointModel(JointKind.PRISMATIC, RigidTransform(q, mean_t), axis, None, configs)
    return _report(model, track)


def _twist_angle(q: np.ndarray, axis: np.ndarray) -> float:
    """Signed rotation angle of ``q`` about ``axis`` (swing-twist), in (-pi, pi]."""
    a = 2.0 * math.atan2(float(np.dot(q[1:], axis)), float(q[0]))
    if a > math.pi:
        a -= 2 * math.pi
    elif a <= -math.pi:
        a += 2 * math.pi
    return a


def fit_revolute(track: RelativePoseTrack) -> JointFitReport:
    r0 = track.poses[0]
    q0_inv = r0.rotation * np.array([1.0, -1.0, -1.0, -1.0])
    rel = [quat_multiply(p.rotation, q0_inv) for p in track.poses]  # R_s R_0^T
    logs = np.array([quat_log(r) for r in rel])
    angles = np.linalg.norm(logs, axis=1)
    if angles.max() < MIN_REVOLUTE_ANGLE:
        raise DegenerateMotion("relative rotation is below the revolute threshold",
                               parent=track.parent, child=track.child)
    vals, vecs = np.linalg.eigh(logs.T @ logs)
    axis = vecs[:, -1]
    moving = angles[1:] > MIN_REVOLUTE_ANGLE
    ambiguous = bool(np.all(angles[1:][moving] > math.pi - 1e-3))
    if ambiguous:
        warnings.warn(f"parts {track.parent}->{track.child}: all rotations are near a half turn, "
                      "the revolute axis sign is arbitrary", AmbiguousAxisWarning, stacklevel=2)
        axis = axis if axis[np.argmax(np.abs(axis))] > 0 else -axis
    else:
        axis = _orient_by_first_motion(axis, np.array([_twist_angle(r, axis) for r in rel]))
    configs = np.array([_twist_angle(r, axis) for r in rel])
    configs[0] = 0.0

    # pivot: every measured motion P_s P_0^-1 fixes the axis line, (I - R) p = t.
    # Using the measured rotation rather than the fitted one keeps the solve frame-equivariant.
    rows, rhs = [], []
    r0_inv = r0.inverse()
    for pose in track.poses[1:]:
        d = pose @ r0_inv
        rows.append(np.eye(3) - d.rotation_matrix)
        rhs.append(d.translation)
    proj = np.eye(3) - np.outer(axis, axis)
    a_mat = np.vstack([proj @ m for m in rows])
    b_vec = np.concatenate([proj @ b for b in rhs])
    pivot, *_ = np.linalg.lstsq(a_mat, b_vec, rcond=None)
    pivot = pivot - np.dot(pivot, axis) * axis  # point of the line closest to the parent origin
    model = JointModel(JointKind.REVOLUTE, r0, axis, pivot, configs)
    return _report(model, track, ambiguous_axis=ambiguous)


def reverse_model(model: JointModel) -> JointModel:
    """The same joint seen from the other side: parent pose in the child frame.

    Configuration values are kept; the axis flips so that ``q`` means the same
    physical displacement.
    """
    inv = model.origin.inverse()
    if model.kind is JointKind.RIGID:
        return JointModel(JointKind.RIGID, inv)
    axis = -(inv.rotation_matrix @ model.axis)
    pivot = None if model.pivot is None else inv.apply(model.pivot)
    return JointModel(model.kind, inv, axis, pivot, model.configurations)


FITTERS = {
    JointKind.RIGID: fit_rigid,
    JointKind.PRISMATIC: fit_prismatic,
    JointKind.REVOLUTE: fit_revolute,
}


def fit_all(track: RelativePoseTrack) -> tuple:
    """Fit every joint family. Returns (reports by kind, errors by kind)."""
    reports, errors = {}, {}
    for kind, fit in FITTERS.items():
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", AmbiguousAxisWarning)
                reports[kind] = fit(track)
        except EstimationError as exc:
            errors[kind] = exc
    return reports, errors


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def model_to_dict(model: JointModel) -> dict:
    d = {
        "kind": model.kind.value,
        "origin": {"rotation_wxyz": [float(x) for x in model.origin.rotation],
                   "translation": [float(x) for x in model.origin.translation]},
    }
    if model.axis is not None:
        d["axis"] = [float(x) for x in model.axis]
    if model.pivot is not None:
        d["pivot"] = [float(x) for x in model.pivot]
    if model.configurations is not None:
        d["configurations"] = [float(x) for x in model.configurations]
    return d


def model_from_dict(d: dict) -> JointModel:
    try:
        origin = RigidTransform(d["origin"]["rotation_wxyz"], d["origin"]["translation"])
        return JointModel(JointKind(d["kind"]), origin, d.get("axis"), d.get("pivot"),
                          d.get("configurations"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed joint record: {exc}") from None
