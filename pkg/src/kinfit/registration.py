"""Cross-scene rigid registration of part clouds.

Three solvers share one correspondence model (nearest neighbour in the
target): point-to-point ICP, a graduated non-convexity (GNC) truncated
least-squares refinement over fixed correspondences, and the two chained.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np

from .core import NearestNeighborIndex, PointCloud, RigidTransform
from .errors import (AllOutliers, DegenerateCloud, EstimationError, KinfitError, MissingPart,
                     NoCorrespondences, ValidationError)


class Method(str, Enum):
    ICP_ONLY = "IcpOnly"
    ROBUST_ONLY = "RobustOnly"
    ICP_THEN_ROBUST = "IcpThenRobust"


@dataclass(frozen=True)
class RegistrationParams:
    max_icp_iterations: int = 50
    convergence_eps: float = 1e-6
    max_correspondence_dist: float = 0.05
    robust_noise_bound: float = 0.01
    gnc_mu_update_factor: float = 1.4
    max_gnc_iterations: int = 100
    # IcpThenRobust re-queries correspondences under the refined pose up to this many times
    robust_rounds: int = 10

    def __post_init__(self):
        for name in ("max_icp_iterations", "convergence_eps", "max_correspondence_dist",
                     "robust_noise_bound", "gnc_mu_update_factor", "max_gnc_iterations",
                     "robust_rounds"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValidationError(f"registration parameter {name} must be positive, got {v!r}")
        if self.gnc_mu_update_factor <= 1:
            raise ValidationError("gnc_mu_update_factor must be > 1")


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    """Transform taking the source cloud onto the target cloud.

    For ICP, ``rmse`` is the gated correspondence RMSE: source points without
    a partner inside the gate count at the gate distance. For the robust
    solver it is the RMSE over inliers.
    """

    transform: RigidTransform
    rmse: float
    inlier_count: int
    converged: bool
    method: Method
    correspondence_count: int = 0
    iterations: int = 0
    rmse_history: tuple = ()


def _points(c) -> np.ndarray:
    return c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=float).reshape(-1, 3)


def check_cloud(points: np.ndarray, what: str = "cloud") -> None:
    """Require at least three non-collinear points."""
    if len(points) < 3:
        raise DegenerateCloud(f"{what} has {len(points)} points; at least 3 are needed")
    s = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if s[0] == 0.0 or s[1] <= 1e-12 * s[0]:
        raise DegenerateCloud(f"{what} is collinear")


def fit_rigid_transform(source, target, weights=None) -> RigidTransform:
    """Weighted least-squares SE(3) fit of paired points (Kabsch with reflection fix)."""
    p = np.asarray(source, dtype=float)
    q = np.asarray(target, dtype=float)
    w = np.ones(len(p)) if weights is None else np.asarray(weights, dtype=float)
    total = w.sum()
    if len(p) == 0 or total <= 0:
        raise DegenerateCloud("no weighted correspondences to fit")
    pc = w @ p / total
    qc = w @ q / total
    h = (p - pc).T @ ((q - qc) * w[:, None])
    u, s, vt = np.linalg.svd(h)
    if s[0] == 0.0 or s[1] <= 1e-12 * s[0]:
        raise DegenerateCloud("cross-covariance is rank deficient")
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform.from_rotation_matrix(r, qc - r @ pc)


def _gated_cost(dist: np.ndarray, gate: float) -> float:
    return float(np.mean(np.minimum(dist, gate) ** 2))


def icp(source, target, init: Optional[RigidTransform] = None,
        params: Optional[RegistrationParams] = None,
        target_index: Optional[NearestNeighborIndex] = None) -> RegistrationResult:
    """Point-to-point ICP with a hard correspondence gate.

    A step is only accepted when it does not increase the gated RMSE, which
    makes the recorded history non-increasing.
    """
    params = params or RegistrationParams()
    src, tgt = _points(source), _points(target)
    check_cloud(src, "source")
    check_cloud(tgt, "target")
    index = target_index or NearestNeighborIndex(tgt)
    gate = params.max_correspondence_dist
    t = init or RigidTransform.identity()

    dist, idx = index.query(t.apply(src))
    mask = dist <= gate
    if not mask.any():
        raise NoCorrespondences(f"no source point has a target neighbour within {gate} m")
    cost = _gated_cost(dist, gate)
    history = [math.sqrt(cost)]
    converged = False
    it = 0
    for it in range(1, params.max_icp_iterations + 1):
        try:
            candidate = fit_rigid_transform(src[mask], tgt[idx[mask]])
        except DegenerateCloud:
            if it == 1:
                raise
            break
        new_dist, new_idx = index.query(candidate.apply(src))
        new_cost = _gated_cost(new_dist, gate)
        if new_cost > cost:
            converged = True
            break
        t, dist, idx, mask = candidate, new_dist, new_idx, new_dist <= gate
        step = history[-1] - math.sqrt(new_cost)
        cost = new_cost
        history.append(math.sqrt(cost))
        if step < params.convergence_eps:
            converged = True
            break
    return RegistrationResult(t, history[-1], int(mask.sum()), converged, Method.ICP_ONLY,
                              correspondence_count=len(src), iterations=it,
                              rmse_history=tuple(history))


def _tls_weights(r2: np.ndarray, c2: float, mu: float) -> np.ndarray:
    upper = (mu + 1.0) / mu * c2
    lower = mu / (mu + 1.0) * c2
    w = np.zeros_like(r2)
    w[r2 <= lower] = 1.0
    mid = (r2 > lower) & (r2 < upper)
    w[mid] = np.sqrt(c2 * mu * (mu + 1.0) / r2[mid]) - mu
    return np.clip(w, 0.0, 1.0)


def _residuals2(t: RigidTransform, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    d = t.apply(p) - q
    return np.einsum("ij,ij->i", d, d)


def robust_refine(source, target, init: Optional[RigidTransform] = None,
                  params: Optional[RegistrationParams] = None,
                  target_index: Optional[NearestNeighborIndex] = None) -> RegistrationResult:
    """Truncated least squares over nearest-neighbour correspondences fixed at ``init``.

    Solved by graduated non-convexity: the control parameter mu starts where
    the surrogate is convex and grows until the weights are binary. The final
    transform is refit on the inliers (residual <= ``robust_noise_bound``).
    """
    params = params or RegistrationParams()
    src, tgt = _points(source), _points(target)
    check_cloud(src, "source")
    check_cloud(tgt, "target")
    index = target_index or NearestNeighborIndex(tgt)
    init = init or RigidTransform.identity()
    _, idx = index.query(init.apply(src))
    p, q = src, tgt[idx]
    c2 = params.robust_noise_bound ** 2

    t = init
    r2 = _residuals2(t, p, q)
    converged = True
    iterations = 0
    max_r2 = float(r2.max())
    if max_r2 > c2:
        mu = 1.0 / (2.0 * max_r2 / c2 - 1.0)
        converged = False
        prev_cost = math.inf
        for iterations in range(1, params.max_gnc_iterations + 1):
            w = _tls_weights(r2, c2, mu)
            if np.count_nonzero(w) < 3:
                raise AllOutliers("every correspondence was rejected as an outlier")
            try:
                t = fit_rigid_transform(p, q, w)
            except DegenerateCloud:
                raise AllOutliers("the surviving correspondences do not determine a pose") from None
            r2 = _residuals2(t, p, q)
            cost = float(w @ r2)
            binary = np.all((w < 1e-9) | (w > 1.0 - 1e-9))
            if binary or abs(prev_cost - cost) < 1e-12:
                converged = True
                break
            prev_cost = cost
            mu *= params.gnc_mu_update_factor
        inliers = _tls_weights(r2, c2, mu) >= 0.5
    else:
        inliers = np.ones(len(p), dtype=bool)

    for _ in range(10):
        if inliers.sum() < 3:
            raise AllOutliers(f"only {int(inliers.sum())} correspondences fall within "
                              f"{params.robust_noise_bound} m of the solution")
        try:
            t = fit_rigid_transform(p[inliers], q[inliers])
        except DegenerateCloud:
            raise AllOutliers("the inlier correspondences do not determine a pose") from None
        r2 = _residuals2(t, p, q)
        updated = r2 <= c2
        if np.array_equal(updated, inliers):
            break
        inliers = updated
    if inliers.sum() < 3:
        raise AllOutliers("every correspondence was rejected as an outlier")
    rmse = math.sqrt(float(r2[inliers].mean()))
    return RegistrationResult(t, rmse, int(inliers.sum()), converged, Method.ROBUST_ONLY,
                              correspondence_count=len(p), iterations=iterations)


def initial_guesses(source, target, previous: Optional[RigidTransform] = None) -> list:
    """Candidate starting poses: centroid alignment, a previous solution, PCA frames."""
    src, tgt = _points(source), _points(target)
    cs, ct = src.mean(axis=0), tgt.mean(axis=0)
    out = [RigidTransform.from_translation(ct - cs)]
    if previous is not None:
        r = previous.rotation_matrix
        out.append(RigidTransform.from_rotation_matrix(r, ct - r @ cs))
        out.append(previous)
    es = _principal_axes(src - cs)
    et = _principal_axes(tgt - ct)
    for sx, sy in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
        d = np.diag([sx, sy, sx * sy])
        r = et @ d @ es.T
        if np.linalg.det(r) < 0:
            r = et @ np.diag([sx, sy, -sx * sy]) @ es.T
        out.append(RigidTransform.from_rotation_matrix(r, ct - r @ cs))
    return out


def _principal_axes(centered: np.ndarray) -> np.ndarray:
    _, vecs = np.linalg.eigh(centered.T @ centered)
    axes = vecs[:, ::-1]
    # fix the sign of the first two axes by the third moment so the frames are repeatable
    for k in range(2):
        proj = centered @ axes[:, k]
        if np.sum(proj ** 3) < 0:
            axes[:, k] = -axes[:, k]
    axes[:, 2] = np.cross(axes[:, 0], axes[:, 1])
    return axes


def icp_candidates(source, target, params: RegistrationParams, previous: Optional[RigidTransform] = None,
                   target_index: Optional[NearestNeighborIndex] = None) -> list:
    """ICP from every `initial_guesses` candidate, near-duplicate results dropped.

    Each candidate first runs with a gate as wide as the source cloud's RMS
    radius, then with the configured gate.
    """
    src, tgt = _points(source), _points(target)
    index = target_index or NearestNeighborIndex(tgt)
    radius = math.sqrt(float(np.mean(np.sum((src - src.mean(axis=0)) ** 2, axis=1))))
    coarse = replace(params, max_correspondence_dist=max(params.max_correspondence_dist, radius))
    found = []
    last_error = None
    for guess in initial_guesses(src, tgt, previous):
        try:
            rough = icp(src, tgt, guess, coarse, index)
            res = icp(src, tgt, rough.transform, params, index)
        except (NoCorrespondences, DegenerateCloud) as exc:
            last_error = exc
            continue
        if not any(max(res.transform.distance_to(r.transform)) < 1e-6 for r in found):
            found.append(res)
    if not found:
        raise last_error
    return found


def best_icp(source, target, params: RegistrationParams, previous: Optional[RigidTransform] = None,
             target_index: Optional[NearestNeighborIndex] = None) -> RegistrationResult:
    """The `icp_candidates` result with the lowest gated RMSE."""
    best = None
    for res in icp_candidates(source, target, params, previous, target_index):
        if best is None or res.rmse < best.rmse - 1e-9:
            best = res
    return best


def truncated_cost(source, target_index: NearestNeighborIndex, t: RigidTransform, bound: float) -> float:
    """Mean of min(r, bound)^2 over nearest-neighbour residuals under ``t``."""
    d, _ = target_index.query(t.apply(_points(source)))
    return float(np.mean(np.minimum(d, bound) ** 2))


def _robust_rounds(source, tgt, t, params, index):
    # each round fixes correspondences under the previous round's pose; stop at the fixed point
    iterations = 0
    for _ in range(params.robust_rounds):
        res = robust_refine(source, tgt, t, params, index)
        iterations += res.iterations
        rot, trans = res.transform.distance_to(t)
        t = res.transform
        if rot < 1e-9 and trans < 1e-9:
            break
    return res, iterations


def register(source, target, params: Optional[RegistrationParams] = None,
             method: Method = Method.ICP_THEN_ROBUST, init: Optional[RigidTransform] = None,
             previous: Optional[RigidTransform] = None) -> RegistrationResult:
    """Register one cloud pair with the requested method.

    ``RobustOnly`` starts from ``init`` (identity by default). The ICP-based
    methods search over `initial_guesses` unless ``init`` is given.
    """
    params = params or RegistrationParams()
    method = Method(method)
    tgt = _points(target)
    index = NearestNeighborIndex(tgt)
    if method is Method.ROBUST_ONLY:
        res = robust_refine(source, tgt, init or RigidTransform.identity(), params, index)
        return res
    if init is not None:
        candidates = [icp(source, tgt, init, params, index)]
    elif method is Method.ICP_ONLY:
        return best_icp(source, tgt, params, previous, index)
    else:
        candidates = icp_candidates(source, tgt, params, previous, index)
    if method is Method.ICP_ONLY:
        return candidates[0]
    # refine every ICP basin robustly; the truncated cost, unlike the gated RMSE, is not
    # swamped by outliers when choosing between them
    best = None
    for first in candidates:
        try:
            res, iterations = _robust_rounds(source, tgt, first.transform, params, index)
        except AllOutliers as exc:
            last_error = exc
            continue
        cost = truncated_cost(source, index, res.transform, params.robust_noise_bound)
        if best is None or cost < best[0] - 1e-15:
            best = (cost, first, res, iterations)
    if best is None:
        raise last_error
    _, first, res, iterations = best
    return RegistrationResult(res.transform, res.rmse, res.inlier_count,
                              first.converged and res.converged, Method.ICP_THEN_ROBUST,
                              res.correspondence_count, first.iterations + iterations, first.rmse_history)


def register_part_across_scenes(scene_set, part_id: int, params: Optional[RegistrationParams] = None,
                                method: Method = Method.ICP_THEN_ROBUST) -> list:
    """Registration of one part from scene 0 onto every scene (list by scene index).

    Scene 0 maps to the identity. Earlier solutions seed later scenes, so the
    scenes of one part are processed in order.
    """
    params = params or RegistrationParams()
    for s, sid in enumerate(scene_set.scene_ids):
        if part_id not in scene_set.scenes[s]:
            raise MissingPart(f"part {part_id} missing from scene {sid}", scene=sid, part=part_id)
    source = scene_set.cloud(0, part_id)
    results = [RegistrationResult(RigidTransform.identity(), 0.0, len(source), True, Method(method),
                                  len(source))]
    previous = None
    for s in range(1, len(scene_set)):
        sid = scene_set.scene_ids[s]
        try:
            res = register(source, scene_set.cloud(s, part_id), params, method, previous=previous)
        except KinfitError as exc:
            raise type(exc)(f"part {part_id}, scene {sid}: {exc}", scene=sid, part=part_id) from exc
        results.append(res)
        previous = res.transform
    return results


def register_all(scene_set, params: Optional[RegistrationParams] = None,
                 method: Method = Method.ICP_THEN_ROBUST, jobs: int = 1) -> dict:
    """`register_part_across_scenes` for every part; parts run on a thread pool."""
    parts = scene_set.part_ids
    if jobs == 1 or len(parts) == 1:
        return {p: register_part_across_scenes(scene_set, p, params, method) for p in parts}
    with ThreadPoolExecutor(max_workers=jobs or None) as pool:
        futures = {p: pool.submit(register_part_across_scenes, scene_set, p, params, method)
                   for p in parts}
        return {p: futures[p].result() for p in parts}


def transform_error(estimate: RigidTransform, truth: RigidTransform, points) -> float:
    """RMS displacement between two transforms over ``points``, in meters."""
    pts = _points(points)
    d = estimate.apply(pts) - truth.apply(pts)
    return math.sqrt(float(np.mean(np.einsum("ij,ij->i", d, d))))


def result_to_dict(res: RegistrationResult) -> dict:
    return {
        "rotation_wxyz": [float(x) for x in res.transform.rotation],
        "translation": [float(x) for x in res.transform.translation],
        "rmse": float(res.rmse),
        "inlier_count": int(res.inlier_count),
        "correspondence_count": int(res.correspondence_count),
        "converged": bool(res.converged),
        "method": Method(res.method).value,
        "iterations": int(res.iterations),
    }


def result_from_dict(d: dict) -> RegistrationResult:
    try:
        return RegistrationResult(
            RigidTransform(d["rotation_wxyz"], d["translation"]), float(d["rmse"]),
            int(d["inlier_count"]), bool(d["converged"]), Method(d["method"]),
            int(d.get("correspondence_count", 0)), int(d.get("iterations", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed registration record: {exc}") from None


__all__ = [
    "Method", "RegistrationParams", "RegistrationResult", "check_cloud", "fit_rigid_transform",
    "icp", "robust_refine", "initial_guesses", "best_icp", "register",
    "register_part_across_scenes", "register_all", "transform_error", "EstimationError",
]
