"""Kinematic structure estimation for articulated objects from per-part point clouds."""

__version__ = "0.1.0"

from .core import PointCloud, RigidTransform, chamfer
from .ingest import SceneSet, load_manifest
from .joints import JointKind, JointModel
from .pipeline import run
from .registration import Method, RegistrationParams, register
from .structure import KinematicTree, emit_urdf, forward_kinematics, render_cloud
from .synth import evaluate, generate, preset

__all__ = [
    "PointCloud", "RigidTransform", "chamfer", "SceneSet", "load_manifest", "JointKind",
    "JointModel", "run", "Method", "RegistrationParams", "register", "KinematicTree",
    "emit_urdf", "forward_kinematics", "render_cloud", "evaluate", "generate", "preset",
]
