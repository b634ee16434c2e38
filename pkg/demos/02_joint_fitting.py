"""Fitting rigid, prismatic and revolute models to a relative pose track."""
import math

import numpy as np

from kinfit.core import RigidTransform
from kinfit.joints import RelativePoseTrack, fit_all

rng = np.random.default_rng(0)
axis = np.array([0.0, 0.6, 0.8])
pivot = np.array([0.05, 0.0, 0.02])
origin = RigidTransform.from_rotvec((0.1, 0.2, 0.0), (0.1, 0.0, 0.0))

poses = []
for q in np.radians([0, 20, 45, 70]):
    r = RigidTransform.from_axis_angle(axis, q)
    motion = RigidTransform(r.rotation, pivot - r.rotation_matrix @ pivot)
    noise = RigidTransform.from_rotvec(rng.normal(0, math.radians(0.3), 3), rng.normal(0, 0.0005, 3))
    poses.append(noise @ motion @ origin)

reports, errors = fit_all(RelativePoseTrack(1, 2, poses))
for kind, rep in reports.items():
    print(f"{kind.value:<10} rot residual {math.degrees(rep.pose_residual_rot):6.3f} deg, "
          f"trans residual {rep.pose_residual_trans * 1000:6.2f} mm")
for kind, err in errors.items():
    print(f"{kind.value:<10} not fitted: {err}")

hinge = reports[[k for k in reports if k.value == "Revolute"][0]].model
print("axis", np.round(hinge.axis, 4), "true", axis)
print("q (deg)", np.round(np.degrees(hinge.configurations), 2))
