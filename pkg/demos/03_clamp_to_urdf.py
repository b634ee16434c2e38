"""Clamp: three scans at 0/30/60 degrees to a URDF, then a counterfactual render."""
import numpy as np
from scipy.spatial import cKDTree

from kinfit import emit_urdf, evaluate, generate, preset, render_cloud, run

scenes, truth = generate(preset("clamp", noise_sigma=0.002, outlier_fraction=0.1, seed=0))
result = run(scenes)
print(evaluate(result.tree, truth).table())

for (parent, child), score in sorted(result.scores.items()):
    cells = ", ".join(f"{k.value} {v * 1000:.2f} mm" for k, v in score.chamfer.items())
    print(f"{parent}->{child}: {cells}")

print()
print(emit_urdf(result.tree, "clamp"))

# closing the jaw back towards the scan-0 pose
for q in np.radians([60, 40, 20, 0]):
    cloud = render_cloud(result.tree, {0: q})
    a, b = cloud.points[cloud.part_ids == 1], cloud.points[cloud.part_ids == 2]
    print(f"q {np.degrees(q):5.1f} deg: min gap {cKDTree(a).query(b)[0].min() * 1000:.1f} mm")
