"""Kinematic structure: chamfer scoring of joint fits, spanning-tree connectivity,
forward kinematics, rendering and URDF."""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import NearestNeighborIndex, PointCloud, RigidTransform, chamfer
from .errors import InvalidTree, MissingJointValue, MissingPairScore, ValidationError
from .joints import (JointFitReport, JointKind, JointModel, model_from_dict, model_to_dict,
                     predict_pose, reverse_model, world_poses)

LIMIT_MARGIN = 0.05  # per side, as a fraction of the observed range


# ---------------------------------------------------------------------------
# Canonical frames
# ---------------------------------------------------------------------------

def canonical_frames(scene_set) -> dict:
    """Per part: translation to its scene-0 centroid (world axes)."""
    return {p: RigidTransform.from_translation(scene_set.cloud(0, p).centroid())
            for p in scene_set.part_ids}


def canonical_clouds(scene_set, frames: dict) -> dict:
    return {p: PointCloud(frames[p].inverse().apply(scene_set.cloud(0, p).points))
            for p in scene_set.part_ids}


# ---------------------------------------------------------------------------
# Pair scoring
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PairScore:
    """Scene-averaged symmetric chamfer of each fitted joint family for one ordered pair."""

    parent: int
    child: int
    chamfer: dict  # JointKind -> meters
    best_kind: Optional[JointKind]
    best_chamfer: float
    reports: dict = field(default_factory=dict)  # JointKind -> JointFitReport
    errors: dict = field(default_factory=dict)  # JointKind -> message

    @property
    def best_model(self) -> JointModel:
        return self.reports[self.best_kind].model


def score_pair(scene_set, reports: dict, registrations: dict, parent: int, child: int,
               frames: Optional[dict] = None, clouds: Optional[dict] = None,
               observed_index: Optional[dict] = None, errors: Optional[dict] = None) -> PairScore:
    """Chamfer between the observed child cloud and the one each joint model predicts.

    The child's canonical cloud is placed at ``W_parent(s) @ predict_pose(model, q_s)``
    in every scene s and compared with the child cloud observed there.
    """
    frames = frames or canonical_frames(scene_set)
    clouds = clouds or canonical_clouds(scene_set, frames)
    observed_index = observed_index if observed_index is not None else {}
    parent_world = world_poses(registrations[parent], frames[parent])
    child_pts = clouds[child].points
    scores, filled = {}, {}
    for kind in (JointKind.RIGID, JointKind.PRISMATIC, JointKind.REVOLUTE):
        if kind not in reports:
            continue
        report = reports[kind]
        model = report.model
        per_scene = []
        for s in range(len(scene_set)):
            q = model.configurations[s] if model.configurations else 0.0
            placed = (parent_world[s] @ predict_pose(model, q)).apply(child_pts)
            key = (child, s)
            if key not in observed_index:
                observed_index[key] = NearestNeighborIndex(scene_set.cloud(s, child))
            per_scene.append(chamfer(placed, scene_set.cloud(s, child),
                                     index_b=observed_index[key]).symmetric_mean)
        scores[kind] = math.fsum(per_scene) / len(per_scene)
        filled[kind] = JointFitReport(model, report.pose_residual_rot, report.pose_residual_trans,
                                      scores[kind], report.ambiguous_axis)
    if scores:
        best = min(scores, key=lambda k: scores[k])  # dict order breaks ties: Rigid first
        best_value = scores[best]
    else:
        best, best_value = None, math.inf
    msgs = {k: str(v) for k, v in (errors or {}).items()}
    return PairScore(parent, child, scores, best, best_value, filled, msgs)


# ---------------------------------------------------------------------------
# Trees
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TreeEdge:
    parent: int
    child: int
    model: JointModel
    chamfer: Optional[float] = None


@dataclass(frozen=True, eq=False)
class KinematicTree:
    """Rooted spanning tree of parts. Edges are in breadth-first order from the root.

    ``canonical_frames[p]`` is part p's frame in scene-0 world coordinates and
    ``canonical_clouds[p]`` its scene-0 points in that frame.
    """

    root: int
    edges: tuple
    canonical_clouds: dict = field(default_factory=dict)
    canonical_frames: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(self.edges))
        parts = {self.root} | {e.parent for e in self.edges} | {e.child for e in self.edges}
        children = [e.child for e in self.edges]
        if len(set(children)) != len(children) or self.root in children:
            raise InvalidTree("every part except the root needs exactly one parent")
        if len(self.edges) != len(parts) - 1:
            raise InvalidTree("edge count must be part count - 1")
        reached = {self.root}
        for e in self.edges:
            if e.parent not in reached:
                raise InvalidTree("edges must be ordered parent before child and reachable from the root")
            reached.add(e.child)

    @property
    def parts(self) -> list:
        return sorted({self.root} | {e.child for e in self.edges})

    def configuration_at_scene(self, s: int) -> dict:
        return {i: e.model.configurations[s] for i, e in enumerate(self.edges)
                if e.model.kind is not JointKind.RIGID}


class _UnionFind:
    def __init__(self, items):
        self.parent = {i: i for i in items}

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[max(ra, rb)] = min(ra, rb)
        return True


def undirected_weights(scores: dict, parts) -> dict:
    """Edge weight per unordered pair: the lower best chamfer of its two orientations."""
    weights = {}
    parts = sorted(parts)
    for i, a in enumerate(parts):
        for b in parts[i + 1:]:
            cands = [scores[k].best_chamfer for k in ((a, b), (b, a))
                     if k in scores and scores[k].best_kind is not None]
            if not cands:
                raise MissingPairScore(f"no usable score for parts {a} and {b}", pair=[a, b])
            weights[(a, b)] = min(cands)
    return weights


def minimum_spanning_tree(parts, weights: dict) -> list:
    """Kruskal. Ties are broken by (lower first id, lower second id)."""
    uf = _UnionFind(parts)
    chosen = []
    for (a, b), _ in sorted(weights.items(), key=lambda kv: (kv[1], kv[0][0], kv[0][1])):
        if uf.union(a, b):
            chosen.append((a, b))
    if len(chosen) != len(parts) - 1:
        raise MissingPairScore("weights do not connect all parts")
    return chosen


def _orient(root, undirected) -> list:
    adj = {}
    for a, b in undirected:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    out, seen, queue = [], {root}, deque([root])
    while queue:
        u = queue.popleft()
        for v in sorted(adj.get(u, ())):
            if v not in seen:
                seen.add(v)
                out.append((u, v))
                queue.append(v)
    return out


def build_tree(scores: dict, clouds: dict, frames: Optional[dict] = None,
               root_hint: Optional[int] = None) -> KinematicTree:
    """Minimum spanning tree over all parts, rooted and labelled with joints.

    ``scores`` maps ordered (parent, child) pairs to `PairScore`. The root is
    ``root_hint`` or else the part with the most canonical points (lowest id on ties).
    """
    parts = sorted(clouds)
    if len(parts) < 2:
        raise ValidationError("at least two parts are needed to build a tree")
    if root_hint is not None:
        if root_hint not in clouds:
            raise ValidationError(f"root part {root_hint} is not a known part", part=root_hint)
        root = root_hint
    else:
        root = min(parts, key=lambda p: (-len(clouds[p]), p))
    weights = undirected_weights(scores, parts)
    edges = []
    for parent, child in _orient(root, minimum_spanning_tree(parts, weights)):
        fwd = scores.get((parent, child))
        if fwd is not None and fwd.best_kind is not None:
            edges.append(TreeEdge(parent, child, fwd.best_model, fwd.best_chamfer))
        else:
            rev = scores[(child, parent)]
            edges.append(TreeEdge(parent, child, reverse_model(rev.best_model), rev.best_chamfer))
    return KinematicTree(root, edges, dict(clouds), dict(frames or {}))


# ---------------------------------------------------------------------------
# Forward kinematics and rendering
# ---------------------------------------------------------------------------

def forward_kinematics(tree: KinematicTree, config: dict) -> dict:
    """Pose of every part's canonical frame in the root's canonical frame.

    ``config`` maps edge index to q; rigid edges need no entry.
    """
    poses = {tree.root: RigidTransform.identity()}
    for i, e in enumerate(tree.edges):
        if e.model.kind is JointKind.RIGID:
            q = 0.0
        else:
            if i not in config:
                raise MissingJointValue(f"no value for joint {i} ({e.parent}->{e.child})", joint=i)
            q = float(config[i])
        poses[e.child] = poses[e.parent] @ predict_pose(e.model, q)
    return poses


def render_cloud(tree: KinematicTree, config: dict, base: Optional[RigidTransform] = None) -> PointCloud:
    """Union of all canonical clouds posed by `forward_kinematics`, tagged by part id.

    ``base`` places the root; by default the output is in the root's frame.
    """
    poses = forward_kinematics(tree, config)
    base = base or RigidTransform.identity()
    pieces = []
    for p in tree.parts:
        pts = (base @ poses[p]).apply(tree.canonical_clouds[p].points)
        pieces.append(PointCloud(pts, part_ids=np.full(len(pts), p)))
    return PointCloud.concatenate(pieces)


# ---------------------------------------------------------------------------
# URDF
# ---------------------------------------------------------------------------

def matrix_to_rpy(r: np.ndarray) -> tuple:
    """Fixed-axis roll, pitch, yaw with R = Rz(yaw) Ry(pitch) Rx(roll)."""
    cy = math.hypot(r[0, 0], r[1, 0])
    pitch = math.atan2(-r[2, 0], cy)
    if cy > 1e-12:
        roll = math.atan2(r[2, 1], r[2, 2])
        yaw = math.atan2(r[1, 0], r[0, 0])
    else:
        roll = 0.0
        yaw = math.atan2(-r[0, 1], r[1, 1])
    return roll, pitch, yaw


def rpy_to_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


def _num(x: float) -> str:
    x = float(x)
    return "0.0" if x == 0.0 else repr(x)


def _vec(v) -> str:
    return " ".join(_num(x) for x in v)


def _origin_attrs(t: RigidTransform) -> dict:
    return {"xyz": _vec(t.translation), "rpy": _vec(matrix_to_rpy(t.rotation_matrix))}


def joint_limits(model: JointModel) -> tuple:
    lo, hi = model.q_range()
    pad = LIMIT_MARGIN * (hi - lo)
    return lo - pad, hi + pad


def urdf_frames(tree: KinematicTree) -> tuple:
    """URDF joint origins and per-link visual offsets for ``tree``.

    URDF rotates about the joint frame origin, so a revolute child's link
    frame sits on its axis; the visual origin then carries the offset from
    the link frame to the part's canonical frame. Returns
    (joint origin and axis per edge, link-to-canonical transform per part).
    """
    offsets = {tree.root: RigidTransform.identity()}
    joints = []
    for e in tree.edges:
        m = e.model
        if m.kind is JointKind.REVOLUTE:
            rot = RigidTransform(m.origin.rotation)
            frame = RigidTransform(m.origin.rotation, m.pivot)
            axis = rot.inverse().apply(m.axis)
            offsets[e.child] = frame.inverse() @ m.origin
        else:
            frame = m.origin
            axis = None if m.axis is None else RigidTransform(m.origin.rotation).inverse().apply(m.axis)
            offsets[e.child] = RigidTransform.identity()
        joints.append((offsets[e.parent] @ frame, axis))
    return joints, offsets


def joint_name(parent: int, child: int) -> str:
    return f"part_{parent}_to_part_{child}"


def emit_urdf(tree: KinematicTree, object_name: str, mesh_pattern: str = "part_{id}.ply") -> str:
    """URDF document for ``tree``: links named part_<id>, one joint per edge.

    Non-fixed joints get limits spanning the fitted configurations plus 5%
    of that range on each side. Output is byte-stable for identical trees.
    """
    joints, offsets = urdf_frames(tree)
    robot = ET.Element("robot", {"name": object_name})
    order = [tree.root] + [e.child for e in tree.edges]
    for p in order:
        link = ET.SubElement(robot, "link", {"name": f"part_{p}"})
        inertial = ET.SubElement(link, "inertial")
        ET.SubElement(inertial, "origin", {"xyz": "0.0 0.0 0.0", "rpy": "0.0 0.0 0.0"})
        ET.SubElement(inertial, "mass", {"value": "1.0"})
        ET.SubElement(inertial, "inertia", {"ixx": "1.0", "ixy": "0.0", "ixz": "0.0",
                                            "iyy": "1.0", "iyz": "0.0", "izz": "1.0"})
        visual = ET.SubElement(link, "visual")
        ET.SubElement(visual, "origin", _origin_attrs(offsets[p]))
        geom = ET.SubElement(visual, "geometry")
        ET.SubElement(geom, "mesh", {"filename": mesh_pattern.format(id=p)})
    types = {JointKind.RIGID: "fixed", JointKind.PRISMATIC: "prismatic", JointKind.REVOLUTE: "revolute"}
    for e, (origin, axis) in zip(tree.edges, joints):
        j = ET.SubElement(robot, "joint", {"name": joint_name(e.parent, e.child),
                                           "type": types[e.model.kind]})
        ET.SubElement(j, "parent", {"link": f"part_{e.parent}"})
        ET.SubElement(j, "child", {"link": f"part_{e.child}"})
        ET.SubElement(j, "origin", _origin_attrs(origin))
        if e.model.kind is not JointKind.RIGID:
            ET.SubElement(j, "axis", {"xyz": _vec(axis)})
            lo, hi = joint_limits(e.model)
            ET.SubElement(j, "limit", {"lower": _num(lo), "upper": _num(hi),
                                       "effort": "1.0", "velocity": "1.0"})
    ET.indent(robot, space="  ")
    body = ET.tostring(robot, encoding="unicode")
    return '<?xml version="1.0" encoding="UTF-8"?>\n' + body + "\n"


@dataclass(frozen=True, eq=False)
class UrdfJoint:
    name: str
    type: str
    parent: str
    child: str
    origin: RigidTransform
    axis: Optional[np.ndarray]
    limits: Optional[tuple]


@dataclass(frozen=True, eq=False)
class UrdfModel:
    name: str
    root: str
    joints: tuple  # parent before child
    visual_origins: dict  # link -> RigidTransform
    meshes: dict  # link -> filename

    def movable_joints(self) -> list:
        return [j for j in self.joints if j.type != "fixed"]


def _parse_origin(el) -> RigidTransform:
    if el is None:
        return RigidTransform.identity()
    xyz = [float(v) for v in el.get("xyz", "0 0 0").split()]
    rpy = [float(v) for v in el.get("rpy", "0 0 0").split()]
    return RigidTransform.from_rotation_matrix(rpy_to_matrix(*rpy), xyz)


def parse_urdf(text: str) -> UrdfModel:
    """Parse the subset of URDF that `emit_urdf` writes (any tree of fixed,
    prismatic, revolute and continuous joints)."""
    try:
        robot = ET.fromstring(text.encode("utf-8") if isinstance(text, str) else text)
    except ET.ParseError as exc:
        raise ValidationError(f"URDF is not well-formed XML: {exc}") from None
    if robot.tag != "robot":
        raise ValidationError("URDF root element must be <robot>")
    links = [l.get("name") for l in robot.findall("link")]
    visual_origins, meshes = {}, {}
    for l in robot.findall("link"):
        vis = l.find("visual")
        visual_origins[l.get("name")] = _parse_origin(None if vis is None else vis.find("origin"))
        mesh = None if vis is None else vis.find("geometry/mesh")
        if mesh is not None:
            meshes[l.get("name")] = mesh.get("filename")
    raw = []
    for j in robot.findall("joint"):
        axis_el = j.find("axis")
        axis = None
        if j.get("type") != "fixed":
            axis = np.array([float(v) for v in (axis_el.get("xyz") if axis_el is not None else "1 0 0").split()])
        lim = j.find("limit")
        limits = None if lim is None else (float(lim.get("lower", 0)), float(lim.get("upper", 0)))
        if j.get("type") not in ("fixed", "prismatic", "revolute", "continuous"):
            raise ValidationError(f"unsupported joint type {j.get('type')!r}")
        raw.append(UrdfJoint(j.get("name"), j.get("type"), j.find("parent").get("link"),
                             j.find("child").get("link"), _parse_origin(j.find("origin")), axis, limits))
    children = {j.child for j in raw}
    roots = [l for l in links if l not in children]
    if len(roots) != 1:
        raise ValidationError(f"URDF must have exactly one root link, found {roots}")
    # parent-before-child order
    by_parent = {}
    for j in raw:
        by_parent.setdefault(j.parent, []).append(j)
    ordered, queue = [], deque([roots[0]])
    while queue:
        u = queue.popleft()
        for j in by_parent.get(u, ()):
            ordered.append(j)
            queue.append(j.child)
    if len(ordered) != len(raw):
        raise ValidationError("URDF joints do not form a tree")
    return UrdfModel(robot.get("name", ""), roots[0], tuple(ordered), visual_origins, meshes)


def urdf_forward_kinematics(model: UrdfModel, values: dict) -> dict:
    """Link poses in the root link frame; ``values`` maps joint name to q."""
    poses = {model.root: RigidTransform.identity()}
    for j in model.joints:
        if j.type == "fixed":
            motion = RigidTransform.identity()
        else:
            if j.name not in values:
                raise MissingJointValue(f"no value for joint {j.name}", joint=j.name)
            q = float(values[j.name])
            if j.type == "prismatic":
                motion = RigidTransform.from_translation(q * np.asarray(j.axis))
            else:
                motion = RigidTransform.from_axis_angle(j.axis, q)
        poses[j.child] = poses[j.parent] @ j.origin @ motion
    return poses


def urdf_visual_poses(model: UrdfModel, values: dict) -> dict:
    """Pose of each link's visual frame (the part's canonical frame) in the root link frame."""
    poses = urdf_forward_kinematics(model, values)
    return {l: poses[l] @ model.visual_origins.get(l, RigidTransform.identity()) for l in poses}


# ---------------------------------------------------------------------------
# JSON report
# ---------------------------------------------------------------------------

def _pose_dict(t: RigidTransform) -> dict:
    return {"rotation_wxyz": [float(x) for x in t.rotation],
            "translation": [float(x) for x in t.translation]}


def _pose_from(d: dict) -> RigidTransform:
    return RigidTransform(d["rotation_wxyz"], d["translation"])


def structure_report(tree: KinematicTree, scores: dict, scene_count: int) -> dict:
    pairs = []
    for (p, c) in sorted(scores):
        s = scores[(p, c)]
        pairs.append({
            "parent": p, "child": c,
            "chamfer": {k.value: float(v) for k, v in s.chamfer.items()},
            "residuals": {k.value: {"rotation": float(r.pose_residual_rot),
                                    "translation": float(r.pose_residual_trans)}
                          for k, r in s.reports.items()},
            "errors": {k.value: m for k, m in s.errors.items()},
            "best_kind": None if s.best_kind is None else s.best_kind.value,
            "best_chamfer": float(s.best_chamfer) if s.best_kind is not None else None,
        })
    return {
        "format": "kinfit-structure",
        "version": 1,
        "scene_count": int(scene_count),
        "root": int(tree.root),
        "parts": {str(p): {"frame": _pose_dict(tree.canonical_frames.get(p, RigidTransform())),
                           "point_count": len(tree.canonical_clouds.get(p, ())) if tree.canonical_clouds else 0}
                  for p in tree.parts},
        "edges": [{"index": i, "parent": e.parent, "child": e.child,
                   "urdf_joint": joint_name(e.parent, e.child),
                   "chamfer": None if e.chamfer is None else float(e.chamfer),
                   "joint": model_to_dict(e.model)} for i, e in enumerate(tree.edges)],
        "pairs": pairs,
    }


def tree_from_report(report: dict, clouds: Optional[dict] = None) -> KinematicTree:
    try:
        edges = [TreeEdge(int(e["parent"]), int(e["child"]), model_from_dict(e["joint"]), e.get("chamfer"))
                 for e in sorted(report["edges"], key=lambda e: e["index"])]
        frames = {int(p): _pose_from(v["frame"]) for p, v in report["parts"].items()}
        return KinematicTree(int(report["root"]), edges, dict(clouds or {}), frames)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed structure report: {exc}") from None
