"""How few points can the clamp hinge be recovered from?"""
import math

from kinfit import evaluate, generate, preset, run
from kinfit.ingest import subsample

scenes, truth = generate(preset("clamp"))
for fraction in (1.0, 0.2, 0.05, 0.02):
    sparse = subsample(scenes, fraction, min_points=50, seed=0)
    j = evaluate(run(sparse).tree, truth).joints[0]
    n = len(sparse.cloud(0, 1))
    err = "-" if j.axis_angle_error is None else f"{math.degrees(j.axis_angle_error):.2f} deg"
    print(f"{fraction:5.0%}: {n:4d} points per part, {j.estimated_kind}, axis error {err}")
