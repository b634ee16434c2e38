"""Dataset loading: PLY and PGM files, depth back-projection and JSON manifests."""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import jsonschema
import numpy as np

from .core import PointCloud, RigidTransform
from .errors import (InconsistentParts, MalformedImage, MalformedPly, MissingFile, MissingPart,
                     NoValidDepth, PartNotInMask, SchemaError, UnsupportedFormat, ValidationError)

PathLike = Union[str, os.PathLike]

DEFAULT_VOXEL_SIZE = 0.005


# ---------------------------------------------------------------------------
# Camera model and observations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point lies outside the image")


@dataclass(frozen=True, eq=False)
class Observation:
    """One posed depth image with a per-pixel part-id mask (0 = background)."""

    scene_id: int
    camera_pose: RigidTransform  # camera-to-world
    depth: np.ndarray  # meters, 0 = invalid
    part_mask: np.ndarray
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        shape = (self.intrinsics.height, self.intrinsics.width)
        if self.depth.shape != shape or self.part_mask.shape != shape:
            raise ValidationError(
                f"depth {self.depth.shape} / mask {self.part_mask.shape} do not match "
                f"intrinsics {shape}", scene=self.scene_id)
        if np.any(self.depth < 0) or not np.all(np.isfinite(self.depth)):
            raise ValidationError("depth values must be finite and >= 0", scene=self.scene_id)
        if self.scene_id < 0:
            raise ValidationError("scene id must be >= 0")


def backproject(obs: Observation, part_id: int) -> PointCloud:
    """World-frame points of every pixel labelled ``part_id`` with valid depth."""
    k = obs.intrinsics
    sel = obs.part_mask == part_id
    if not np.any(sel):
        raise PartNotInMask(f"part {part_id} does not appear in the mask", scene=obs.scene_id,
                            part=part_id)
    sel &= obs.depth > 0
    if not np.any(sel):
        raise NoValidDepth(f"no valid depth under the mask of part {part_id}",
                           scene=obs.scene_id, part=part_id)
    v, u = np.nonzero(sel)
    d = obs.depth[v, u].astype(float)
    cam = np.column_stack([(u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d])
    return PointCloud(obs.camera_pose.apply(cam), scene_ids=np.full(len(d), obs.scene_id))


def project(points, camera_pose: RigidTransform, intrinsics: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of `backproject`: returns pixel coordinates (u, v) and depth."""
    cam = camera_pose.inverse().apply(np.asarray(points, dtype=float))
    z = cam[:, 2]
    u = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
    v = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    return np.column_stack([u, v]), z


# ---------------------------------------------------------------------------
# Scene sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SceneSet:
    """Per-scene, per-part world-frame clouds. Scene index 0 is the reference."""

    scenes: list  # list[dict[int, PointCloud]]
    scene_ids: Optional[list] = None

    def __post_init__(self):
        ids = list(range(len(self.scenes))) if self.scene_ids is None else list(self.scene_ids)
        if len(ids) != len(self.scenes):
            raise ValidationError("scene_ids length does not match scenes")
        object.__setattr__(self, "scene_ids", ids)
        if not self.scenes:
            raise ValidationError("scene set is empty")
        reference = set(self.scenes[0])
        for sid, scene in zip(ids, self.scenes):
            parts = set(scene)
            if parts != reference:
                missing = sorted(reference - parts)
                extra = sorted(parts - reference)
                raise InconsistentParts(
                    f"scene {sid}: part set differs from scene {ids[0]} "
                    f"(missing {missing}, unexpected {extra})", scene=sid, missing=missing,
                    unexpected=extra)
            for pid, cloud in scene.items():
                if int(pid) < 1:
                    raise ValidationError(f"part ids must be >= 1, got {pid}", scene=sid)
                if len(cloud) == 0:
                    raise ValidationError(f"scene {sid}: part {pid} has no points", scene=sid, part=pid)

    @property
    def part_ids(self) -> list:
        return sorted(self.scenes[0])

    def __len__(self) -> int:
        return len(self.scenes)

    def cloud(self, scene_index: int, part_id: int) -> PointCloud:
        try:
            return self.scenes[scene_index][part_id]
        except KeyError:
            raise MissingPart(f"part {part_id} missing from scene {self.scene_ids[scene_index]}",
                              scene=self.scene_ids[scene_index], part=part_id) from None

    def merged(self, scene_index: int) -> PointCloud:
        scene = self.scenes[scene_index]
        return PointCloud.concatenate(scene[p].with_labels(part_id=p) for p in sorted(scene))

    def map_clouds(self, fn) -> SceneSet:
        """New scene set with ``fn(scene_index, part_id, cloud)`` applied to every cloud."""
        return SceneSet([{p: fn(s, p, c) for p, c in sc.items()} for s, sc in enumerate(self.scenes)],
                        self.scene_ids)


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Replace the points of each occupied voxel by their centroid.

    Output is ordered by voxel key so the result does not depend on input order.
    Labels are taken from the lowest-index point of each voxel.
    """
    if voxel_size is None or voxel_size <= 0 or len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel_size).astype(np.int64)
    _, first, inv = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inv = inv.reshape(-1)
    counts = np.bincount(inv).astype(float)
    pts = np.column_stack([np.bincount(inv, weights=cloud.points[:, i]) for i in range(3)])
    pts /= counts[:, None]
    # np.unique's first index is the earliest occurrence, so labels stay deterministic
    return PointCloud(
        pts,
        None if cloud.scene_ids is None else cloud.scene_ids[first],
        None if cloud.part_ids is None else cloud.part_ids[first],
    )


def subsample(scene_set: SceneSet, fraction: float, min_points: int = 50, seed: int = 0) -> SceneSet:
    """Keep a random ``fraction`` of every cloud (at least ``min_points``).

    Each (scene, part) cloud draws from its own derived stream, so clouds of
    different scenes keep different points.
    """
    if not 0 < fraction <= 1:
        raise ValidationError("fraction must be in (0, 1]")
    def pick(s, p, cloud):
        rng = np.random.default_rng(np.random.SeedSequence([seed, s, p]))
        n = len(cloud)
        k = min(n, max(min_points, int(round(fraction * n))))
        idx = np.sort(rng.choice(n, size=k, replace=False))
        return cloud.subset(idx)

    return scene_set.map_clouds(pick)


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(f):
    magic = f.readline()
    if magic.strip() != b"ply":
        raise MalformedPly("missing 'ply' magic line")
    fmt = None
    elements = []  # (name, count, [(prop, dtype or None for lists)])
    while True:
        raw = f.readline()
        if not raw:
            raise MalformedPly("header is not terminated by end_header")
        line = raw.decode("ascii", errors="replace").strip()
        if not line or line.startswith(("comment", "obj_info")):
            continue
        tok = line.split()
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            if len(tok) < 2:
                raise MalformedPly(f"bad format line {line!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise MalformedPly(f"bad element line {line!r}")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise MalformedPly("property before any element")
            if len(tok) >= 2 and tok[1] == "list":
                if len(tok) != 5:
                    raise MalformedPly(f"bad list property {line!r}")
                elements[-1][2].append((tok[4], None))
            else:
                if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                    raise MalformedPly(f"bad property line {line!r}")
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise MalformedPly(f"unexpected header line {line!r}")
    if fmt is None:
        raise MalformedPly("missing format line")
    if fmt not in ("ascii", "binary_little_endian"):
        raise UnsupportedFormat(f"PLY format {fmt!r} is not supported")
    return fmt, elements


def read_ply(path: PathLike) -> PointCloud:
    """Read the vertex element of an ASCII or binary little-endian PLY file.

    Integer vertex properties ``scene_id`` / ``part_id`` become cloud labels.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such file: {path}", path=str(path))
    with open(path, "rb") as f:
        fmt, elements = _parse_ply_header(f)
        names = [e[0] for e in elements]
        if "vertex" not in names:
            raise MalformedPly("no vertex element")
        before = elements[:names.index("vertex")]
        vname, count, props = elements[names.index("vertex")]
        prop_names = [p for p, _ in props]
        if not {"x", "y", "z"} <= set(prop_names):
            raise MalformedPly("vertex element lacks x, y, z")
        if any(dt is None for _, dt in props):
            raise UnsupportedFormat("list properties on vertices are not supported")
        if fmt == "ascii":
            for _, n, _ in before:
                for _ in range(n):
                    f.readline()
            rows = []
            for _ in range(count):
                line = f.readline()
                if not line:
                    raise MalformedPly("file ends before all vertices were read")
                vals = line.split()
                if len(vals) < len(props):
                    raise MalformedPly(f"vertex row has {len(vals)} values, expected {len(props)}")
                rows.append(vals[:len(props)])
            try:
                table = {p: np.array([r[i] for r in rows], dtype=dt) for i, (p, dt) in enumerate(props)}
            except ValueError as exc:
                raise MalformedPly(f"bad vertex value: {exc}") from None
        else:
            for ename, n, eprops in before:
                if any(dt is None for _, dt in eprops):
                    raise UnsupportedFormat(f"cannot skip list element {ename!r} preceding vertices")
                f.read(n * np.dtype([(p, "<" + dt) for p, dt in eprops]).itemsize)
            dtype = np.dtype([(p, "<" + dt) for p, dt in props])
            buf = f.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise MalformedPly("file ends before all vertices were read")
            arr = np.frombuffer(buf, dtype=dtype)
            table = {p: arr[p] for p in prop_names}
    pts = np.column_stack([table[c].astype(float) for c in "xyz"]) if count else np.zeros((0, 3))
    labels = {k: table[k].astype(np.int64) for k in ("scene_id", "part_id") if k in table}
    return PointCloud(pts, labels.get("scene_id"), labels.get("part_id"))


def write_ply(path: PathLike, cloud: PointCloud, binary: bool = True, precision: str = "double") -> None:
    """Write ``cloud`` as PLY (binary little-endian by default).

    ``precision='double'`` makes the round trip exact; ``'float'`` halves the size.
    """
    if precision not in ("double", "float"):
        raise ValueError("precision must be 'double' or 'float'")
    n = len(cloud)
    props = [(c, precision) for c in "xyz"]
    if cloud.scene_ids is not None:
        props.append(("scene_id", "int"))
    if cloud.part_ids is not None:
        props.append(("part_id", "int"))
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {n}"]
    header += [f"property {t} {p}" for p, t in props]
    header.append("end_header")
    cols = {"x": cloud.points[:, 0], "y": cloud.points[:, 1], "z": cloud.points[:, 2],
            "scene_id": cloud.scene_ids, "part_id": cloud.part_ids}
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            dtype = np.dtype([(p, "<" + _PLY_TYPES[t]) for p, t in props])
            arr = np.empty(n, dtype=dtype)
            for p, _ in props:
                arr[p] = cols[p]
            f.write(arr.tobytes())
        else:
            def fmt(p, v):
                return str(int(v)) if p in ("scene_id", "part_id") else repr(float(np.float32(v)) if precision == "float" else float(v))
            lines = (" ".join(fmt(p, cols[p][i]) for p, _ in props) for i in range(n))
            f.write("".join(line + "\n" for line in lines).encode("ascii"))


# ---------------------------------------------------------------------------
# PGM (depth in millimeters as 16-bit, part masks as 8-bit)
# ---------------------------------------------------------------------------

def read_pgm(path: PathLike) -> np.ndarray:
    """Read a binary (P5) or ASCII (P2) PGM image into an integer array."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such file: {path}", path=str(path))
    data = path.read_bytes()
    # header: magic, width, height, maxval, with '#' comments allowed between tokens
    tokens = []
    pos = 0
    pattern = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")
    for _ in range(4):
        m = pattern.match(data, pos)
        if not m:
            raise MalformedImage(f"{path}: truncated PGM header")
        tokens.append(m.group(2))
        pos = m.end()
    magic = tokens[0]
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise MalformedImage(f"{path}: bad PGM header") from None
    if magic not in (b"P5", b"P2") or not (0 < maxval < 65536) or width <= 0 or height <= 0:
        raise MalformedImage(f"{path}: not a supported PGM image")
    if magic == b"P2":
        vals = data[pos:].split()
        if len(vals) < width * height:
            raise MalformedImage(f"{path}: truncated pixel data")
        return np.array(vals[:width * height], dtype=np.int64).reshape(height, width)
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    if len(data) - pos < need:
        raise MalformedImage(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=dtype, count=width * height, offset=pos).reshape(height, width).astype(np.int64)


def write_pgm(path: PathLike, image, maxval: Optional[int] = None) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM images are 2D")
    if maxval is None:
        maxval = 65535 if img.max(initial=0) > 255 else 255
    if img.min(initial=0) < 0 or img.max(initial=0) > maxval:
        raise ValueError("pixel values out of range")
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii"))
        f.write(img.astype(dtype).tobytes())


def read_depth_pgm(path: PathLike) -> np.ndarray:
    return read_pgm(path).astype(float) / 1000.0


def write_depth_pgm(path: PathLike, depth_m) -> None:
    mm = np.rint(np.asarray(depth_m, dtype=float) * 1000.0)
    write_pgm(path, mm.astype(np.int64), maxval=65535)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["scenes"],
    "additionalProperties": False,
    "properties": {
        "voxel_size_m": {"type": ["number", "null"], "minimum": 0},
        "scenes": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id"],
                "additionalProperties": False,
                "anyOf": [{"required": ["parts"]}, {"required": ["observations"]}],
                "properties": {
                    "id": {"type": "integer", "minimum": 0},
                    "parts": {
                        "type": "object",
                        "propertyNames": {"pattern": "^[1-9][0-9]*$"},
                        "additionalProperties": {
                            "type": "object",
                            "required": ["ply"],
                            "additionalProperties": False,
                            "properties": {"ply": {"type": "string"}},
                        },
                    },
                    "observations": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["depth", "mask", "pose", "intrinsics"],
                            "additionalProperties": False,
                            "properties": {
                                "depth": {"type": "string"},
                                "mask": {"type": "string"},
                                "pose": {"type": "array", "items": {"type": "number"},
                                         "minItems": 16, "maxItems": 16},
                                "intrinsics": {
                                    "type": "object",
                                    "required": ["fx", "fy", "cx", "cy", "width", "height"],
                                    "additionalProperties": False,
                                    "properties": {
                                        "fx": {"type": "number"}, "fy": {"type": "number"},
                                        "cx": {"type": "number"}, "cy": {"type": "number"},
                                        "width": {"type": "integer"}, "height": {"type": "integer"},
                                    },
                                },
                            },
                        },
                    },
                },
            },
        },
    },
}


def validate_manifest(doc) -> None:
    try:
        jsonschema.validate(doc, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"manifest invalid at {where}: {exc.message}", where=where) from None
    ids = [s["id"] for s in doc["scenes"]]
    if len(set(ids)) != len(ids):
        raise SchemaError("scene ids must be unique")


def load_observation(entry: dict, scene_id: int, base: Path) -> Observation:
    k = entry["intrinsics"]
    try:
        intr = CameraIntrinsics(k["fx"], k["fy"], k["cx"], k["cy"], k["width"], k["height"])
        pose = RigidTransform.from_matrix(np.array(entry["pose"], dtype=float).reshape(4, 4))
    except ValidationError as exc:
        raise SchemaError(f"scene {scene_id}: {exc}", scene=scene_id) from None
    depth = read_depth_pgm(base / entry["depth"])
    mask = read_pgm(base / entry["mask"])
    try:
        return Observation(scene_id, pose, depth, mask, intr)
    except ValidationError as exc:
        raise SchemaError(str(exc), scene=scene_id) from None


def load_manifest(path: PathLike, voxel_size: Optional[float] = None) -> SceneSet:
    """Load a manifest into a `SceneSet`, scenes ordered by id.

    ``voxel_size`` overrides the manifest's ``voxel_size_m``; when neither is
    given the default leaf of 5 mm is used, and 0 disables downsampling.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such manifest: {path}", path=str(path))
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"manifest is not valid JSON: {exc}") from None
    validate_manifest(doc)
    base = path.parent
    if voxel_size is None:
        voxel_size = doc.get("voxel_size_m", DEFAULT_VOXEL_SIZE)
        if voxel_size is None:
            voxel_size = 0.0

    scenes, ids = [], []
    for entry in sorted(doc["scenes"], key=lambda s: s["id"]):
        sid = entry["id"]
        pieces: dict = {}
        for pid, ref in sorted(entry.get("parts", {}).items(), key=lambda kv: int(kv[0])):
            cloud = read_ply(base / ref["ply"])
            pieces.setdefault(int(pid), []).append(cloud)
        for obs_entry in entry.get("observations", []):
            obs = load_observation(obs_entry, sid, base)
            for pid in np.unique(obs.part_mask):
                if pid == 0:
                    continue
                try:
                    pieces.setdefault(int(pid), []).append(backproject(obs, int(pid)))
                except NoValidDepth:
                    continue
        scene = {}
        for pid, clouds in sorted(pieces.items()):
            merged = PointCloud.concatenate(
                PointCloud(c.points, np.full(len(c), sid)) for c in clouds)
            merged = voxel_downsample(merged, voxel_size)
            scene[pid] = merged
        scenes.append(scene)
        ids.append(sid)
    return SceneSet(scenes, ids)


def write_manifest(path: PathLike, scene_set: SceneSet, voxel_size: Optional[float] = 0.0,
                   ply_dir: str = "clouds") -> dict:
    """Export ``scene_set`` as PLY files plus a manifest next to ``path``."""
    path = Path(path)
    (path.parent / ply_dir).mkdir(parents=True, exist_ok=True)
    doc_scenes = []
    for sid, scene in zip(scene_set.scene_ids, scene_set.scenes):
        parts = {}
        for pid in sorted(scene):
            rel = f"{ply_dir}/scene_{sid}_part_{pid}.ply"
            write_ply(path.parent / rel, PointCloud(scene[pid].points))
            parts[str(pid)] = {"ply": rel}
        doc_scenes.append({"id": int(sid), "parts": parts})
    doc = {"scenes": doc_scenes, "voxel_size_m": voxel_size}
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return doc
