"""Command-line front end: synth, register, estimate, render, eval, ablate.

Every output is written to a temporary file and renamed into place. Exit code
0 means success, 2 a validation error and 3 an estimation failure; errors are
reported as one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import shutil
import sys
import tempfile
from dataclasses import asdict, fields, replace
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .core import PointCloud
from .errors import EstimationError, KinfitError, MissingFile, SchemaError, ValidationError
from .ingest import SceneSet, load_manifest, read_ply, write_ply
from .pipeline import ablate_cases, ablate_scene_set, estimate_structure, format_ablation, _workers
from .registration import Method, RegistrationParams, register_all, result_from_dict, result_to_dict
from .structure import emit_urdf, parse_urdf, structure_report, tree_from_report, urdf_visual_poses
from .synth import GroundTruth, evaluate, export_dataset, preset, registration_benchmark, spec_from_dict

EXIT_OK, EXIT_VALIDATION, EXIT_ESTIMATION = 0, 2, 3

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "registration": {
            "type": "object",
            "additionalProperties": False,
            "properties": {f.name: {"type": "integer" if f.type in ("int", int) else "number",
                                    "exclusiveMinimum": 0}
                           for f in fields(RegistrationParams)},
        },
        "voxel_size_m": {"type": ["number", "null"], "minimum": 0},
        "root_part": {"type": ["integer", "null"], "minimum": 1},
        "out": {"type": "string"},
        "jobs": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "object_name": {"type": "string", "minLength": 1},
    },
}


class Config:
    """Merged settings: defaults < config file < command-line flags."""

    def __init__(self, doc: dict | None = None):
        doc = doc or {}
        try:
            jsonschema.validate(doc, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise SchemaError(f"config invalid at {'/'.join(map(str, exc.absolute_path)) or '<root>'}: "
                              f"{exc.message}") from None
        self.registration = RegistrationParams(**doc.get("registration", {}))
        self.voxel_size = doc.get("voxel_size_m")
        self.root_part = doc.get("root_part")
        self.out = doc.get("out")
        self.jobs = doc.get("jobs", 1)
        self.seed = doc.get("seed")
        self.object_name = doc.get("object_name", "object")

    @classmethod
    def load(cls, path) -> Config:
        return cls(_read_json(path, "config") if path else None)

    def apply(self, args) -> Config:
        for flag, attr in (("out", "out"), ("jobs", "jobs"), ("seed", "seed"), ("root_part", "root_part")):
            v = getattr(args, flag, None)
            if v is not None:
                setattr(self, attr, v)
        return self


# ---------------------------------------------------------------------------
# I/O helpers
# ---------------------------------------------------------------------------

def _read_json(path, what: str):
    p = Path(path)
    if not p.is_file():
        raise MissingFile(f"no such {what} file: {p}", path=str(p))
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{what} file {p} is not valid JSON: {exc}", path=str(p)) from None


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path, doc) -> None:
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def atomic_write_ply(path, cloud: PointCloud) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        write_ply(tmp, cloud)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _move_tree(src: Path, dst: Path) -> list:
    """Rename every file under ``src`` into ``dst``, one atomic rename per file."""
    written = []
    for f in sorted(p for p in src.rglob("*") if p.is_file()):
        target = dst / f.relative_to(src)
        target.parent.mkdir(parents=True, exist_ok=True)
        os.replace(f, target)
        written.append(str(target))
    return written


def _out_dir(cfg: Config) -> Path:
    if not cfg.out:
        raise ValidationError("an output location is required (--out or config 'out')")
    return Path(cfg.out)


def _load_scenes(args, cfg: Config) -> SceneSet:
    if not args.manifest:
        raise ValidationError("--manifest is required")
    return load_manifest(args.manifest, cfg.voxel_size)


# ---------------------------------------------------------------------------
# Registrations file
# ---------------------------------------------------------------------------

def registrations_doc(scene_set: SceneSet, registrations: dict, params: RegistrationParams) -> dict:
    return {
        "format": "kinfit-registrations",
        "version": 1,
        "reference_scene": int(scene_set.scene_ids[0]),
        "scene_ids": [int(s) for s in scene_set.scene_ids],
        "params": asdict(params),
        "parts": {str(p): [result_to_dict(r) for r in registrations[p]] for p in sorted(registrations)},
    }


def registrations_from_doc(doc: dict, scene_set: SceneSet) -> dict:
    if not isinstance(doc, dict) or doc.get("format") != "kinfit-registrations":
        raise SchemaError("not a registrations file")
    if [int(s) for s in doc.get("scene_ids", [])] != [int(s) for s in scene_set.scene_ids]:
        raise ValidationError("registrations were computed for different scenes than the manifest",
                              expected=list(map(int, scene_set.scene_ids)), found=doc.get("scene_ids"))
    parts = {int(p): [result_from_dict(r) for r in rs] for p, rs in doc.get("parts", {}).items()}
    if sorted(parts) != scene_set.part_ids:
        raise ValidationError("registrations cover different parts than the manifest",
                              expected=scene_set.part_ids, found=sorted(parts))
    return parts


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg: Config) -> dict:
    if bool(args.spec) == bool(args.preset):
        raise ValidationError("give exactly one of --spec or --preset")
    if args.spec:
        spec = spec_from_dict(_read_json(args.spec, "synth spec"))
        if cfg.seed is not None:
            spec = replace(spec, seed=cfg.seed)
    else:
        kw = {}
        if cfg.seed is not None:
            kw["seed"] = cfg.seed
        for name in ("points", "scene_count"):
            if getattr(args, name) is not None:
                kw[name] = getattr(args, name)
        if args.noise is not None:
            kw["noise_sigma"] = args.noise
        if args.outliers is not None:
            kw["outlier_fraction"] = args.outliers
        spec = preset(args.preset, **kw)
    out = _out_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(dir=out, prefix=".synth."))
    try:
        export_dataset(spec, staging)
        written = _move_tree(staging, out)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    return {"outputs": written}


def cmd_register(args, cfg: Config) -> dict:
    scene_set = _load_scenes(args, cfg)
    regs = register_all(scene_set, cfg.registration, Method.ICP_THEN_ROBUST, _workers(cfg.jobs))
    path = _out_dir(cfg) / "registrations.json"
    atomic_write_json(path, registrations_doc(scene_set, regs, cfg.registration))
    return {"outputs": [str(path)]}


def cmd_estimate(args, cfg: Config) -> dict:
    scene_set = _load_scenes(args, cfg)
    if len(scene_set) < 2:
        raise ValidationError("joint estimation needs at least 2 scenes", scenes=len(scene_set))
    if args.registrations:
        regs = registrations_from_doc(_read_json(args.registrations, "registrations"), scene_set)
    else:
        regs = register_all(scene_set, cfg.registration, Method.ICP_THEN_ROBUST, _workers(cfg.jobs))
    tree, scores = estimate_structure(scene_set, regs, cfg.root_part, cfg.jobs)
    out = _out_dir(cfg)
    report = structure_report(tree, scores, len(scene_set))
    written = []
    for p in tree.parts:
        path = out / f"part_{p}.ply"
        atomic_write_ply(path, tree.canonical_clouds[p])
        written.append(str(path))
    atomic_write_json(out / "structure.json", report)
    atomic_write_text(out / f"{cfg.object_name}.urdf", emit_urdf(tree, cfg.object_name))
    written += [str(out / "structure.json"), str(out / f"{cfg.object_name}.urdf")]
    return {"outputs": written,
            "edges": [{"parent": e.parent, "child": e.child, "kind": e.model.kind.value}
                      for e in tree.edges]}


def _parse_q(values: list, joint_names: list) -> dict:
    named = [v for v in values if "=" in v]
    if named and len(named) != len(values):
        raise ValidationError("--q values must be all NAME=VALUE or all positional")
    try:
        if named:
            q = {k: float(v) for k, v in (s.split("=", 1) for s in values)}
            unknown = sorted(set(q) - set(joint_names))
            if unknown:
                raise ValidationError(f"unknown joints {unknown}", known=joint_names)
            return q
        if len(values) != len(joint_names):
            raise ValidationError(f"expected {len(joint_names)} positional --q values "
                                  f"(joint order {joint_names}), got {len(values)}")
        return {n: float(v) for n, v in zip(joint_names, values)}
    except ValueError as exc:
        raise ValidationError(f"bad --q value: {exc}") from None


def cmd_render(args, cfg: Config) -> dict:
    urdf_path = Path(args.urdf)
    if not urdf_path.is_file():
        raise MissingFile(f"no such URDF: {urdf_path}", path=str(urdf_path))
    model = parse_urdf(urdf_path.read_text())
    names = [j.name for j in model.movable_joints()]
    q = _parse_q(args.q or [], names)
    poses = urdf_visual_poses(model, q)
    base = None
    if args.structure:
        report = _read_json(args.structure, "structure report")
        base = tree_from_report(report).canonical_frames[int(report["root"])]
    cloud_dir = Path(args.clouds) if args.clouds else urdf_path.parent
    pieces = []
    for link in [model.root] + [j.child for j in model.joints]:
        mesh = model.meshes.get(link)
        if mesh is None:
            continue
        cloud = read_ply(cloud_dir / mesh)
        pose = poses[link] if base is None else base @ poses[link]
        m = re.fullmatch(r"part_(\d+)", link)
        pid = int(m.group(1)) if m else 0
        pts = pose.apply(cloud.points)
        pieces.append(PointCloud(pts, part_ids=np.full(len(pts), pid)))
    if not pieces:
        raise ValidationError("URDF references no meshes to render")
    if not args.out and not cfg.out:
        raise ValidationError("an output location is required (--out or config 'out')")
    out = Path(args.out or cfg.out)
    if out.suffix.lower() != ".ply":
        out = out / "render.ply"
    atomic_write_ply(out, PointCloud.concatenate(pieces))
    return {"outputs": [str(out)], "q": q}


def cmd_eval(args, cfg: Config) -> dict:
    report = _read_json(args.structure, "structure report")
    truth = GroundTruth.from_dict(_read_json(args.ground_truth, "ground truth"))
    result = evaluate(tree_from_report(report), truth)
    out = _out_dir(cfg)
    atomic_write_json(out / "eval.json", result.to_dict())
    table = result.table()
    atomic_write_text(out / "eval.txt", table + "\n")
    print(table)
    return {"outputs": [str(out / "eval.json"), str(out / "eval.txt")],
            "tree_edge_f1": result.tree_edge_f1}


def cmd_ablate(args, cfg: Config) -> dict:
    if args.manifest:
        scene_set = _load_scenes(args, cfg)
        truth = None
        if args.ground_truth:
            truth = list(GroundTruth.from_dict(_read_json(args.ground_truth, "ground truth")).part_poses)
        table = ablate_scene_set(scene_set, cfg.registration, truth)
        source = {"manifest": str(args.manifest)}
    else:
        seed = cfg.seed if cfg.seed is not None else 0
        table = ablate_cases(registration_benchmark(seed, cases=args.cases), cfg.registration)
        source = {"benchmark_seed": seed, "cases": args.cases}
    out = _out_dir(cfg)
    text = format_ablation(table)
    atomic_write_json(out / "ablation.json", {"source": source, "methods": table})
    atomic_write_text(out / "ablation.txt", text + "\n")
    print(text)
    return {"outputs": [str(out / "ablation.json"), str(out / "ablation.txt")]}


COMMANDS = {"synth": cmd_synth, "register": cmd_register, "estimate": cmd_estimate,
            "render": cmd_render, "eval": cmd_eval, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output directory (render: a .ply path or a directory)")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--jobs", type=int, help="worker threads; 0 = one per CPU")
    common.add_argument("--root-part", dest="root_part", type=int, help="part id to use as the tree root")
    common.add_argument("--manifest", help="dataset manifest JSON")

    parser = argparse.ArgumentParser(prog="kinfit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--spec", help="synth spec JSON file")
    p.add_argument("--preset", help="built-in preset: clamp, slider or arm6")
    p.add_argument("--points", type=int, help="points per part (preset only)")
    p.add_argument("--scene-count", dest="scene_count", type=int, help="number of scenes (preset only)")
    p.add_argument("--noise", type=float, help="noise sigma in meters (preset only)")
    p.add_argument("--outliers", type=float, help="outlier fraction (preset only)")

    sub.add_parser("register", parents=[common], help="register every part from scene 0 onto each scene")

    p = sub.add_parser("estimate", parents=[common], help="fit joints, build the tree, write URDF")
    p.add_argument("--registrations", help="registrations.json from `register` (computed if omitted)")

    p = sub.add_parser("render", parents=[common], help="pose the object at given joint values")
    p.add_argument("--urdf", required=True)
    p.add_argument("--clouds", help="directory holding the part meshes (default: next to the URDF)")
    p.add_argument("--structure", help="structure.json; places the output in the world frame")
    p.add_argument("--q", nargs="*", help="joint values, NAME=VALUE or positional in URDF order")

    p = sub.add_parser("eval", parents=[common], help="compare a structure report with ground truth")
    p.add_argument("--structure", required=True)
    p.add_argument("--ground-truth", dest="ground_truth", required=True)

    p = sub.add_parser("ablate", parents=[common], help="compare IcpOnly, RobustOnly and IcpThenRobust")
    p.add_argument("--ground-truth", dest="ground_truth", help="ground truth for --manifest datasets")
    p.add_argument("--cases", type=int, default=10, help="benchmark cases when no manifest is given")
    return parser


def _diagnostic(exc: BaseException, code: int) -> str:
    doc = {"status": "error", "exit_code": code, "error": type(exc).__name__, "message": str(exc)}
    details = getattr(exc, "details", None)
    if details:
        doc["details"] = details
    return json.dumps(doc, default=str)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = Config.load(args.config).apply(args)
        summary = COMMANDS[args.command](args, cfg)
    except ValidationError as exc:
        print(_diagnostic(exc, EXIT_VALIDATION), file=sys.stderr)
        return EXIT_VALIDATION
    except EstimationError as exc:
        print(_diagnostic(exc, EXIT_ESTIMATION), file=sys.stderr)
        return EXIT_ESTIMATION
    except KinfitError as exc:
        print(_diagnostic(exc, EXIT_VALIDATION), file=sys.stderr)
        return EXIT_VALIDATION
    print(json.dumps({"status": "ok", "command": args.command, **summary}, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
