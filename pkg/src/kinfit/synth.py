"""Procedural articulated objects with ground truth, presets, and evaluation metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from .core import PointCloud, RigidTransform, unit
from .errors import InvalidSpec, PartSetMismatch, ValidationError
from .ingest import SceneSet, write_manifest
from .joints import JointKind, JointModel
from .structure import KinematicTree, TreeEdge


# ---------------------------------------------------------------------------
# Spec
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Shape:
    """A box (``size`` = x, y, z edge lengths) or a cylinder (``size`` = radius,
    length; axis along local z), placed by ``pose`` in the part frame."""

    kind: str
    size: tuple
    pose: RigidTransform = field(default_factory=RigidTransform)

    def area(self) -> float:
        if self.kind == "box":
            x, y, z = self.size
            return 2 * (x * y + y * z + x * z)
        r, length = self.size
        return 2 * math.pi * r * length + 2 * math.pi * r * r


@dataclass(frozen=True, eq=False)
class PartSpec:
    id: int
    shapes: tuple
    points: int = 2000


@dataclass(frozen=True, eq=False)
class JointSpec:
    """Child frame = parent frame @ ``origin`` @ motion(q); ``axis`` is in the joint frame."""

    parent: int
    child: int
    kind: JointKind
    axis: tuple = (0.0, 0.0, 1.0)
    origin: RigidTransform = field(default_factory=RigidTransform)
    q: tuple = ()

    def motion(self, q: float) -> RigidTransform:
        kind = JointKind(self.kind)
        if kind is JointKind.RIGID:
            return RigidTransform.identity()
        if kind is JointKind.PRISMATIC:
            return RigidTransform.from_translation(q * unit(self.axis))
        return RigidTransform.from_axis_angle(self.axis, q)


@dataclass(frozen=True, eq=False)
class SynthSpec:
    parts: tuple
    joints: tuple
    scene_count: int
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    seed: int = 0
    base_pose: RigidTransform = field(default_factory=RigidTransform)

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))
        object.__setattr__(self, "joints", tuple(self.joints))
        validate_spec(self)

    @property
    def root(self) -> int:
        children = {j.child for j in self.joints}
        return next(p.id for p in self.parts if p.id not in children)


def validate_spec(spec: SynthSpec) -> None:
    ids = [p.id for p in spec.parts]
    if not ids or len(set(ids)) != len(ids) or min(ids) < 1:
        raise InvalidSpec("part ids must be unique integers >= 1")
    if spec.scene_count < 1:
        raise InvalidSpec("scene_count must be >= 1")
    if not 0 <= spec.outlier_fraction < 1:
        raise InvalidSpec("outlier_fraction must lie in [0, 1)")
    if spec.noise_sigma < 0:
        raise InvalidSpec("noise_sigma must be >= 0")
    for p in spec.parts:
        if p.points < 3 or not p.shapes:
            raise InvalidSpec(f"part {p.id} needs at least one shape and 3 points")
        for s in p.shapes:
            if s.kind not in ("box", "cylinder") or len(s.size) != (3 if s.kind == "box" else 2) \
                    or min(s.size) <= 0:
                raise InvalidSpec(f"part {p.id}: bad shape {s.kind} {s.size}")
    known = set(ids)
    children = [j.child for j in spec.joints]
    if len(spec.joints) != len(ids) - 1 or len(set(children)) != len(children):
        raise InvalidSpec("joints must form a tree: one parent per non-root part")
    for j in spec.joints:
        if j.parent not in known or j.child not in known or j.parent == j.child:
            raise InvalidSpec(f"joint {j.parent}->{j.child} references unknown parts")
        try:
            kind = JointKind(j.kind)
        except ValueError:
            raise InvalidSpec(f"unknown joint kind {j.kind!r}") from None
        if kind is not JointKind.RIGID and len(j.q) != spec.scene_count:
            raise InvalidSpec(f"joint {j.parent}->{j.child} needs {spec.scene_count} q values")
    # acyclic and connected: walk up from every part
    parent_of = {j.child: j.parent for j in spec.joints}
    for p in ids:
        seen = {p}
        while p in parent_of:
            p = parent_of[p]
            if p in seen:
                raise InvalidSpec("joints contain a cycle")
            seen.add(p)
    roots = [p for p in ids if p not in parent_of]
    if len(roots) != 1:
        raise InvalidSpec("joints must connect all parts")


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _sample_box(rng, size, n):
    x, y, z = (s / 2 for s in size)
    faces = np.array([y * z, y * z, x * z, x * z, x * y, x * y])
    face = rng.choice(6, size=n, p=faces / faces.sum())
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    half = np.array([x, y, z])
    pts = np.empty((n, 3))
    for f in range(6):
        sel = face == f
        ax = f // 2
        others = [a for a in range(3) if a != ax]
        pts[sel, ax] = half[ax] if f % 2 == 0 else -half[ax]
        pts[np.ix_(sel, others)] = uv[sel] * half[others]
    return pts


def _sample_cylinder(rng, size, n):
    r, length = size
    areas = np.array([2 * math.pi * r * length, math.pi * r * r, math.pi * r * r])
    region = rng.choice(3, size=n, p=areas / areas.sum())
    theta = rng.uniform(0, 2 * math.pi, n)
    rad = np.where(region == 0, r, r * np.sqrt(rng.uniform(0, 1, n)))
    z = np.where(region == 0, rng.uniform(-length / 2, length / 2, n),
                 np.where(region == 1, length / 2, -length / 2))
    return np.column_stack([rad * np.cos(theta), rad * np.sin(theta), z])


def sample_part(part: PartSpec, rng) -> np.ndarray:
    """Area-weighted uniform surface samples of a part, in its own frame."""
    areas = np.array([s.area() for s in part.shapes])
    counts = rng.multinomial(part.points, areas / areas.sum())
    pieces = []
    for shape, n in zip(part.shapes, counts):
        if n == 0:
            continue
        local = _sample_box(rng, shape.size, n) if shape.kind == "box" else _sample_cylinder(rng, shape.size, n)
        pieces.append(shape.pose.apply(local))
    return np.concatenate(pieces)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GroundTruth:
    """``joints``: per joint parent, child, kind, axis and pivot in the parent
    frame, the joint origin and q per scene. ``part_poses[s][p]``: world pose."""

    joints: tuple
    part_poses: tuple
    part_samples: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format": "kinfit-ground-truth",
            "version": 1,
            "joints": [dict(j, kind=j["kind"].value, axis=list(map(float, j["axis"])),
                            pivot=list(map(float, j["pivot"])), q=list(map(float, j["q"])),
                            origin=_pose_dict(j["origin"])) for j in self.joints],
            "part_poses": [{str(p): _pose_dict(t) for p, t in sorted(scene.items())}
                           for scene in self.part_poses],
        }

    @classmethod
    def from_dict(cls, d: dict) -> GroundTruth:
        try:
            joints = tuple(dict(j, kind=JointKind(j["kind"]), axis=np.array(j["axis"], dtype=float),
                                pivot=np.array(j["pivot"], dtype=float), q=tuple(j["q"]),
                                origin=_pose_from(j["origin"])) for j in d["joints"])
            poses = tuple({int(p): _pose_from(t) for p, t in scene.items()} for scene in d["part_poses"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed ground truth: {exc}") from None
        return cls(joints, poses)


def _pose_dict(t: RigidTransform) -> dict:
    return {"rotation_wxyz": [float(x) for x in t.rotation],
            "translation": [float(x) for x in t.translation]}


def _pose_from(d: dict) -> RigidTransform:
    return RigidTransform(d["rotation_wxyz"], d["translation"])


def part_world_poses(spec: SynthSpec, scene: int) -> dict:
    poses = {spec.root: spec.base_pose}
    pending = list(spec.joints)
    while pending:
        rest = []
        for j in pending:
            if j.parent in poses:
                q = j.q[scene] if JointKind(j.kind) is not JointKind.RIGID else 0.0
                poses[j.child] = poses[j.parent] @ j.origin @ j.motion(q)
            else:
                rest.append(j)
        pending = rest
    return poses


def generate(spec: SynthSpec) -> tuple:
    """(SceneSet, GroundTruth) for ``spec``; bit-identical for a fixed seed.

    Every part is sampled once; scene s places the samples by the
    ground-truth pose, adds Gaussian noise and swaps a fraction of points for
    uniform outliers drawn from the scene bounding box scaled by 1.5.
    """
    validate_spec(spec)
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.scene_count + 1)
    shape_rng = np.random.default_rng(seeds[0])
    samples = {p.id: sample_part(p, shape_rng) for p in sorted(spec.parts, key=lambda p: p.id)}
    scenes, poses = [], []
    for s in range(spec.scene_count):
        rng = np.random.default_rng(seeds[s + 1])
        world = part_world_poses(spec, s)
        placed = {p: world[p].apply(samples[p]) for p in samples}
        allpts = np.concatenate(list(placed.values()))
        lo, hi = allpts.min(axis=0), allpts.max(axis=0)
        center, half = (lo + hi) / 2, (hi - lo) / 2 * 1.5
        scene = {}
        for p in sorted(placed):
            pts = placed[p].copy()
            if spec.noise_sigma > 0:
                pts += rng.normal(0.0, spec.noise_sigma, pts.shape)
            k = int(round(spec.outlier_fraction * len(pts)))
            if k:
                idx = rng.choice(len(pts), size=k, replace=False)
                pts[idx] = rng.uniform(center - half, center + half, size=(k, 3))
            scene[p] = PointCloud(pts, scene_ids=np.full(len(pts), s))
        scenes.append(scene)
        poses.append(world)
    joints = []
    for j in spec.joints:
        kind = JointKind(j.kind)
        axis = j.origin.rotation_matrix @ unit(j.axis)
        joints.append({"parent": j.parent, "child": j.child, "kind": kind, "axis": axis,
                       "pivot": np.array(j.origin.translation), "origin": j.origin,
                       "q": tuple(j.q) if kind is not JointKind.RIGID else ()})
    return SceneSet(scenes), GroundTruth(tuple(joints), tuple(poses), samples)


def truth_tree(truth: GroundTruth) -> KinematicTree:
    """The ground truth as a `KinematicTree` (canonical frames = part frames at scene 0)."""
    children = {j["child"] for j in truth.joints}
    parents = {j["parent"] for j in truth.joints}
    roots = sorted(parents - children) or sorted(truth.part_poses[0])
    edges, reached, pending = [], {roots[0]}, sorted(truth.joints, key=lambda j: j["child"])
    while pending:
        rest = []
        for j in pending:
            if j["parent"] in reached:
                if j["kind"] is JointKind.RIGID:
                    model = JointModel(JointKind.RIGID, j["origin"])
                else:
                    model = JointModel(j["kind"], j["origin"], j["axis"],
                                       j["pivot"] if j["kind"] is JointKind.REVOLUTE else None, j["q"])
                edges.append(TreeEdge(j["parent"], j["child"], model))
                reached.add(j["child"])
            else:
                rest.append(j)
        pending = rest
    clouds = {p: PointCloud(x) for p, x in truth.part_samples.items()}
    return KinematicTree(roots[0], edges, clouds, dict(truth.part_poses[0]))


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def _at(x, y, z, rotvec=(0.0, 0.0, 0.0)) -> RigidTransform:
    return RigidTransform.from_rotvec(rotvec, (x, y, z))


_ALONG_X = (0.0, math.pi / 2, 0.0)  # rotates a cylinder's z axis onto x
_ALONG_Y = (-math.pi / 2, 0.0, 0.0)


def clamp_spec(points: int = 2000, scene_count: int = 3, angles_deg=None, **kw) -> SynthSpec:
    """Two jaws on a hinge along z; the moving jaw opens by 0/30/60 degrees."""
    angles = angles_deg if angles_deg is not None else np.linspace(0.0, 60.0, scene_count)
    fixed = PartSpec(1, (
        Shape("box", (0.18, 0.03, 0.04), _at(0.11, -0.035, 0.0)),
        Shape("box", (0.04, 0.08, 0.05), _at(0.04, -0.09, 0.0)),
        Shape("cylinder", (0.014, 0.10), _at(-0.03, -0.11, 0.0, _ALONG_X)),
        Shape("cylinder", (0.01, 0.04), _at(0.17, -0.06, 0.02)),
    ), points)
    moving = PartSpec(2, (
        Shape("box", (0.18, 0.03, 0.04), _at(0.11, 0.035, 0.0)),
        Shape("box", (0.05, 0.06, 0.03), _at(0.06, 0.075, 0.015)),
        Shape("cylinder", (0.012, 0.05), _at(0.16, 0.06, 0.03)),
    ), points)
    hinge = JointSpec(1, 2, JointKind.REVOLUTE, (0.0, 0.0, 1.0), _at(0.0, 0.0, 0.0),
                      tuple(math.radians(a) for a in angles))
    return SynthSpec((fixed, moving), (hinge,), len(angles), **kw)


def slider_spec(points: int = 2000, scene_count: int = 3, travel: float = 0.10, **kw) -> SynthSpec:
    """A carriage sliding 10 cm along a rail."""
    rail = PartSpec(1, (
        Shape("box", (0.40, 0.05, 0.02), _at(0.0, 0.0, 0.0)),
        Shape("box", (0.02, 0.07, 0.06), _at(0.21, 0.01, 0.02)),
        Shape("cylinder", (0.01, 0.05), _at(-0.18, 0.04, 0.02)),
    ), points)
    carriage = PartSpec(2, (
        Shape("box", (0.08, 0.06, 0.03), _at(0.0, 0.0, 0.0)),
        Shape("cylinder", (0.012, 0.04), _at(0.02, 0.015, 0.035)),
    ), points)
    q = tuple(np.linspace(0.0, travel, scene_count))
    joint = JointSpec(1, 2, JointKind.PRISMATIC, (1.0, 0.0, 0.0), _at(-0.08, 0.0, 0.03), q)
    return SynthSpec((rail, carriage), (joint,), len(q), **kw)


def arm6_spec(points: int = 2000, scene_count: int = 4, **kw) -> SynthSpec:
    """A 6-revolute serial arm (base + 6 links) loosely shaped like a desktop cobot."""
    def link(pid, length, knob_side):
        return PartSpec(pid, (
            Shape("box", (0.04, 0.03, length), _at(0.0, 0.0, length / 2)),
            Shape("cylinder", (0.012, 0.03), _at(knob_side * 0.035, 0.0, length * 0.7, _ALONG_X)),
            Shape("box", (0.02, 0.05, 0.02), _at(0.0, 0.02, length * 0.2)),
        ), points)

    base = PartSpec(1, (
        Shape("cylinder", (0.06, 0.05), _at(0.0, 0.0, 0.025)),
        Shape("box", (0.05, 0.03, 0.02), _at(0.07, 0.0, 0.01)),
    ), points)
    lengths = [0.08, 0.12, 0.10, 0.07, 0.06]
    links = [link(i + 2, L, 1 if i % 2 else -1) for i, L in enumerate(lengths)]
    flange = PartSpec(7, (
        Shape("cylinder", (0.025, 0.02), _at(0.0, 0.0, 0.01)),
        Shape("box", (0.05, 0.01, 0.03), _at(0.02, 0.0, 0.035)),
    ), points)
    axes = [(0, 0, 1), (0, 1, 0), (0, 1, 0), (0, 1, 0), (0, 0, 1), (1, 0, 0)]
    tops = [0.05] + lengths
    amp = [0.5, 0.35, 0.4, 0.45, 0.6, 0.7]
    pattern = np.array([0.0, 1.0, -0.6, 0.5, -1.0, 0.8])[:scene_count]
    joints = []
    for j in range(6):
        # each joint follows its own phase of the pattern so no two move in lockstep
        q = tuple(float(amp[j] * pattern[(np.arange(scene_count) + j) % scene_count][s]
                        - amp[j] * pattern[j % scene_count]) for s in range(scene_count))
        joints.append(JointSpec(j + 1, j + 2, JointKind.REVOLUTE, axes[j], _at(0.0, 0.0, tops[j]), q))
    return SynthSpec((base, *links, flange), tuple(joints), scene_count, **kw)


PRESETS = {"clamp": clamp_spec, "slider": slider_spec, "arm6": arm6_spec}


def preset(name: str, **kw) -> SynthSpec:
    try:
        return PRESETS[name](**kw)
    except KeyError:
        raise InvalidSpec(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# JSON schema for specs
# ---------------------------------------------------------------------------

_POSE = {"type": "object", "additionalProperties": False,
         "properties": {"rotation_wxyz": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
                        "translation": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}}}

SPEC_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["parts", "joints", "scene_count"],
    "properties": {
        "scene_count": {"type": "integer", "minimum": 1},
        "noise_sigma": {"type": "number", "minimum": 0},
        "outlier_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "base_pose": _POSE,
        "parts": {"type": "array", "minItems": 1, "items": {
            "type": "object", "additionalProperties": False, "required": ["id", "shapes"],
            "properties": {
                "id": {"type": "integer", "minimum": 1},
                "points": {"type": "integer", "minimum": 3},
                "shapes": {"type": "array", "minItems": 1, "items": {
                    "type": "object", "additionalProperties": False, "required": ["kind", "size"],
                    "properties": {"kind": {"enum": ["box", "cylinder"]},
                                   "size": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                                   "pose": _POSE}}}}}},
        "joints": {"type": "array", "items": {
            "type": "object", "additionalProperties": False, "required": ["parent", "child", "kind"],
            "properties": {"parent": {"type": "integer"}, "child": {"type": "integer"},
                           "kind": {"enum": [k.value for k in JointKind]},
                           "axis": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
                           "origin": _POSE,
                           "q": {"type": "array", "items": {"type": "number"}}}}},
    },
}


def _pose_or_identity(d) -> RigidTransform:
    if not d:
        return RigidTransform.identity()
    return RigidTransform(d.get("rotation_wxyz", (1, 0, 0, 0)), d.get("translation", (0, 0, 0)))


def spec_from_dict(d: dict) -> SynthSpec:
    try:
        jsonschema.validate(d, SPEC_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise InvalidSpec(f"synth spec invalid: {exc.message}") from None
    try:
        parts = tuple(PartSpec(p["id"], tuple(Shape(s["kind"], tuple(s["size"]), _pose_or_identity(s.get("pose")))
                                              for s in p["shapes"]), p.get("points", 2000)) for p in d["parts"])
        joints = tuple(JointSpec(j["parent"], j["child"], JointKind(j["kind"]), tuple(j.get("axis", (0, 0, 1))),
                                 _pose_or_identity(j.get("origin")), tuple(j.get("q", ())))
                       for j in d["joints"])
        return SynthSpec(parts, joints, d["scene_count"], d.get("noise_sigma", 0.0),
                         d.get("outlier_fraction", 0.0), d.get("seed", 0), _pose_or_identity(d.get("base_pose")))
    except ValidationError as exc:
        raise InvalidSpec(str(exc)) from None


def spec_to_dict(spec: SynthSpec) -> dict:
    return {
        "scene_count": spec.scene_count, "noise_sigma": spec.noise_sigma,
        "outlier_fraction": spec.outlier_fraction, "seed": spec.seed,
        "base_pose": _pose_dict(spec.base_pose),
        "parts": [{"id": p.id, "points": p.points,
                   "shapes": [{"kind": s.kind, "size": list(map(float, s.size)), "pose": _pose_dict(s.pose)}
                              for s in p.shapes]} for p in spec.parts],
        "joints": [{"parent": j.parent, "child": j.child, "kind": JointKind(j.kind).value,
                    "axis": list(map(float, j.axis)), "origin": _pose_dict(j.origin),
                    "q": list(map(float, j.q))} for j in spec.joints],
    }


def export_dataset(spec: SynthSpec, out_dir) -> dict:
    """Write manifest.json, per-scene PLYs, ground_truth.json and spec.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene_set, truth = generate(spec)
    write_manifest(out / "manifest.json", scene_set, voxel_size=0.0)
    (out / "ground_truth.json").write_text(json.dumps(truth.to_dict(), indent=2) + "\n")
    (out / "spec.json").write_text(json.dumps(spec_to_dict(spec), indent=2) + "\n")
    return {"manifest": str(out / "manifest.json"), "ground_truth": str(out / "ground_truth.json"),
            "spec": str(out / "spec.json")}


# ---------------------------------------------------------------------------
# Corrupted registration benchmark
# ---------------------------------------------------------------------------

def _corrupt(pts, rng, noise_sigma, outlier_fraction):
    pts = pts + rng.normal(0.0, noise_sigma, pts.shape)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center, half = (lo + hi) / 2, (hi - lo) / 2 * 1.5
    k = int(round(outlier_fraction * len(pts)))
    idx = rng.choice(len(pts), size=k, replace=False)
    pts[idx] = rng.uniform(center - half, center + half, size=(k, 3))
    return pts


def registration_benchmark(seed: int = 0, cases: int = 10, points: int = 500,
                           max_angle_deg: float = 20.0, max_shift: float = 0.04,
                           noise_sigma: float = 0.001, outlier_fraction: float = 0.3) -> list:
    """(source, target, true transform) triples built from the clamp's moving jaw.

    Source and target are independently corrupted copies of one sampling:
    Gaussian noise, then a fraction of points replaced by uniform outliers in
    the cloud's bounding box scaled by 1.5. Corrupting both sides matters:
    with a clean source almost no nearest-neighbour query lands on an outlier.
    """
    shape = clamp_spec(points=points).parts[1]
    root = np.random.SeedSequence(seed)
    out = []
    for child in root.spawn(cases):
        rng = np.random.default_rng(child)
        clean = sample_part(shape, rng)
        clean = clean - clean.mean(axis=0)
        axis = unit(rng.normal(size=3))
        angle = math.radians(rng.uniform(0.5, 1.0) * max_angle_deg)
        shift = unit(rng.normal(size=3)) * rng.uniform(0.5, 1.0) * max_shift
        truth = RigidTransform.from_axis_angle(axis, angle, shift)
        src = _corrupt(clean, rng, noise_sigma, outlier_fraction)
        tgt = _corrupt(truth.apply(clean), rng, noise_sigma, outlier_fraction)
        out.append((PointCloud(src), PointCloud(tgt), truth))
    return out


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JointEval:
    parent: int
    child: int
    kind: str
    estimated_kind: Optional[str]
    kind_correct: bool
    axis_angle_error: Optional[float]
    axis_line_distance: Optional[float]
    config_rmse: Optional[float]


@dataclass(frozen=True)
class EvalReport:
    joints: tuple
    tree_edge_f1: float

    def to_dict(self) -> dict:
        return {"tree_edge_f1": self.tree_edge_f1, "joints": [vars(j) for j in self.joints]}

    def table(self) -> str:
        def f(x):
            return "-" if x is None else f"{x:.3e}"
        rows = [f"{'joint':<10} {'kind':<10} {'estimate':<10} {'ok':<3} {'axis_err_rad':>12} "
                f"{'line_dist_m':>12} {'config_rmse':>12}"]
        for j in self.joints:
            rows.append(f"{f'{j.parent}->{j.child}':<10} {j.kind:<10} {str(j.estimated_kind or '-'):<10} "
                        f"{'y' if j.kind_correct else 'n':<3} {f(j.axis_angle_error):>12} "
                        f"{f(j.axis_line_distance):>12} {f(j.config_rmse):>12}")
        rows.append(f"tree edge F1: {self.tree_edge_f1:.3f}")
        return "\n".join(rows)


def _angle_between_lines(a: np.ndarray, b: np.ndarray) -> float:
    """Sign-invariant angle between two directions, accurate near zero."""
    return math.atan2(float(np.linalg.norm(np.cross(a, b))), abs(float(np.dot(a, b))))


def _line_distance(p1, a, p2, b) -> float:
    """Closest distance between the lines p1 + t a and p2 + s b (unit a, b)."""
    d = np.asarray(p2, dtype=float) - p1
    n = np.cross(a, b)
    norm = float(np.linalg.norm(n))
    if norm < 1e-9:
        return float(np.linalg.norm(d - np.dot(d, a) * a))
    return abs(float(np.dot(d, n))) / norm


def _gauge_rmse(est, true) -> float:
    """RMSE after the best constant offset and global sign."""
    est, true = np.asarray(est, dtype=float), np.asarray(true, dtype=float)
    best = math.inf
    for sign in (1.0, -1.0):
        diff = est - sign * true
        best = min(best, math.sqrt(float(np.mean((diff - diff.mean()) ** 2))))
    return best


def evaluate(estimated: KinematicTree, truth: GroundTruth) -> EvalReport:
    """Compare an estimated tree with ground truth.

    Joints are matched by undirected edge. Axes and axis lines are compared
    in scene-0 world coordinates.
    """
    true_parts = set(truth.part_poses[0])
    if set(estimated.parts) != true_parts:
        raise PartSetMismatch(f"estimated parts {sorted(estimated.parts)} != true parts {sorted(true_parts)}")
    est_by_pair = {frozenset((e.parent, e.child)): e for e in estimated.edges}
    rows, hits = [], 0
    for j in truth.joints:
        key = frozenset((j["parent"], j["child"]))
        e = est_by_pair.get(key)
        kind = j["kind"]
        if e is None:
            rows.append(JointEval(j["parent"], j["child"], kind.value, None, False, None, None, None))
            continue
        hits += 1
        m = e.model
        correct = m.kind is kind
        axis_err = line = cfg = None
        if kind is not JointKind.RIGID and m.kind is not JointKind.RIGID:
            parent_world = truth.part_poses[0][j["parent"]]
            true_axis = parent_world.rotation_matrix @ j["axis"]
            true_point = parent_world.apply(j["pivot"])
            frame = estimated.canonical_frames.get(e.parent, RigidTransform.identity())
            est_axis = frame.rotation_matrix @ m.axis
            axis_err = _angle_between_lines(true_axis, est_axis)
            if kind is JointKind.REVOLUTE and m.kind is JointKind.REVOLUTE:
                line = _line_distance(true_point, unit(true_axis), frame.apply(m.pivot), unit(est_axis))
            if m.configurations is not None and len(m.configurations) == len(j["q"]):
                cfg = _gauge_rmse(m.configurations, j["q"])
        rows.append(JointEval(j["parent"], j["child"], kind.value, m.kind.value, correct, axis_err, line, cfg))
    n_true, n_est = len(truth.joints), len(estimated.edges)
    precision = hits / n_est if n_est else 1.0
    recall = hits / n_true if n_true else 1.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return EvalReport(tuple(rows), f1)


__all__ = [
    "Shape", "PartSpec", "JointSpec", "SynthSpec", "GroundTruth", "generate", "truth_tree",
    "clamp_spec", "slider_spec", "arm6_spec", "preset", "PRESETS", "spec_from_dict", "spec_to_dict",
    "export_dataset", "registration_benchmark", "JointEval", "EvalReport", "evaluate",
]
