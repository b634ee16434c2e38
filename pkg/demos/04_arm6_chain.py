"""A 6-revolute serial arm recovered from four scans."""
import time

import numpy as np

from kinfit import evaluate, generate, preset, run

scenes, truth = generate(preset("arm6"))
t0 = time.perf_counter()
result = run(scenes, jobs=0)
print(f"{len(scenes.part_ids)} parts, {len(scenes)} scenes, {time.perf_counter() - t0:.1f} s")
for e in result.tree.edges:
    print(f"  {e.parent}->{e.child} {e.model.kind.value:<9} axis {np.round(e.model.axis, 3)}")
print(evaluate(result.tree, truth).table())
