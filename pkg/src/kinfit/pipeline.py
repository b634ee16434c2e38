"""End-to-end estimation: registrations -> joint fits -> scores -> kinematic tree."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import NearestNeighborIndex, RigidTransform, chamfer
from .errors import KinfitError
from .joints import fit_all, relative_track
from .registration import Method, RegistrationParams, register, register_all, transform_error
from .structure import build_tree, canonical_clouds, canonical_frames, score_pair


def _workers(jobs: int) -> int:
    if jobs == 0:
        return os.cpu_count() or 1
    return max(1, jobs)


def score_all_pairs(scene_set, registrations: dict, frames: dict, clouds: dict, jobs: int = 1) -> dict:
    """`PairScore` for every ordered pair of distinct parts."""
    observed = {(p, s): NearestNeighborIndex(scene_set.cloud(s, p))
                for p in scene_set.part_ids for s in range(len(scene_set))}
    pairs = [(a, b) for a in scene_set.part_ids for b in scene_set.part_ids if a != b]

    def one(pair):
        a, b = pair
        track = relative_track(registrations, a, b, frames)
        reports, errors = fit_all(track)
        return score_pair(scene_set, reports, registrations, a, b, frames, clouds, observed, errors)

    workers = _workers(jobs)
    if workers == 1:
        results = [one(p) for p in pairs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, pairs))
    return dict(zip(pairs, results))


def estimate_structure(scene_set, registrations: dict, root_hint: Optional[int] = None,
                       jobs: int = 1) -> tuple:
    """Returns (KinematicTree, pair scores)."""
    frames = canonical_frames(scene_set)
    clouds = canonical_clouds(scene_set, frames)
    scores = score_all_pairs(scene_set, registrations, frames, clouds, jobs)
    return build_tree(scores, clouds, frames, root_hint), scores


@dataclass(frozen=True, eq=False)
class PipelineResult:
    registrations: dict
    tree: object
    scores: dict


def run(scene_set, params: Optional[RegistrationParams] = None, root_hint: Optional[int] = None,
        jobs: int = 1) -> PipelineResult:
    registrations = register_all(scene_set, params, Method.ICP_THEN_ROBUST, _workers(jobs))
    tree, scores = estimate_structure(scene_set, registrations, root_hint, jobs)
    return PipelineResult(registrations, tree, scores)


ABLATION_METHODS = (Method.ICP_ONLY, Method.ROBUST_ONLY, Method.ICP_THEN_ROBUST)


def ablate_cases(cases, params: Optional[RegistrationParams] = None) -> dict:
    """Mean transform error per method over (source, target, true transform) cases.

    The error of one case is the RMS displacement between the estimated and
    true transforms over the source points. A solver failure counts as the
    error of the identity transform.
    """
    params = params or RegistrationParams()
    table = {}
    for method in ABLATION_METHODS:
        errors, failures = [], 0
        for source, target, truth in cases:
            try:
                est = register(source, target, params, method).transform
            except KinfitError:  # failures are part of the comparison
                failures += 1
                est = RigidTransform.identity()
            errors.append(transform_error(est, truth, source))
        table[method.value] = {"mean_error_m": math.fsum(errors) / len(errors),
                               "median_error_m": float(np.median(errors)),
                               "failures": failures, "cases": len(errors)}
    return table


def ablate_scene_set(scene_set, params: Optional[RegistrationParams] = None,
                     truth_poses: Optional[list] = None) -> dict:
    """Per-method registration quality on a dataset.

    With ``truth_poses`` (per scene, part -> world pose) errors are transform
    errors; otherwise the symmetric chamfer between the registered scene-0
    cloud and the target cloud is reported.
    """
    params = params or RegistrationParams()
    table = {}
    for method in ABLATION_METHODS:
        errors, failures = [], 0
        for p in scene_set.part_ids:
            src = scene_set.cloud(0, p)
            for s in range(1, len(scene_set)):
                tgt = scene_set.cloud(s, p)
                try:
                    est = register(src, tgt, params, method).transform
                except KinfitError:
                    failures += 1
                    est = RigidTransform.identity()
                if truth_poses is not None:
                    true_t = truth_poses[s][p] @ truth_poses[0][p].inverse()
                    errors.append(transform_error(est, true_t, src))
                else:
                    errors.append(chamfer(est.apply(src.points), tgt).symmetric_mean)
        table[method.value] = {
            "mean_error_m": math.fsum(errors) / len(errors) if errors else 0.0,
            "median_error_m": float(np.median(errors)) if errors else 0.0,
            "failures": failures, "cases": len(errors),
            "metric": "transform_rms" if truth_poses is not None else "chamfer",
        }
    return table


def format_ablation(table: dict) -> str:
    lines = [f"{'method':<15} {'mean_error_m':>14} {'median_error_m':>15} {'failures':>9} {'cases':>6}"]
    for name, row in table.items():
        lines.append(f"{name:<15} {row['mean_error_m']:>14.6g} {row['median_error_m']:>15.6g} "
                     f"{row['failures']:>9d} {row['cases']:>6d}")
    return "\n".join(lines)
