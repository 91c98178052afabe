"""Initial pose from a retrieved submap plus yaw, ICP refinement, top-k fallback."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .database import DescriptorDatabase, SubmapRecord
from .formats import rotation_to_quaternion
from .geometry import (Pose, PointCloud, compose, rotation_angle, transform_points, voxel_downsample,
                       voxel_subsample, yaw_rotation)
from .projection import ProjectionParams, project

log = logging.getLogger(__name__)

ICP_SOURCE_VOXEL = 0.2
ICP_COARSE_VOXEL = 0.3


@dataclass(frozen=True)
class InitialEstimate:
    T0: Pose
    candidate: int
    dtheta: float
    distance: float


@dataclass(frozen=True)
class RefinedPose:
    T: Pose
    fitness: float
    inlier_rmse: float
    iterations: int
    converged: bool

    def __post_init__(self):
        if not 0.0 <= self.fitness <= 1.0:
            raise ValueError("fitness must lie in [0, 1]")
        if self.inlier_rmse < 0:
            raise ValueError("rmse must be >= 0")


def initial_pose(candidate: SubmapRecord, dtheta: float, distance: float = 0.0) -> InitialEstimate:
    """``T0 = origin o yaw(dtheta)``: the yaw acts in the candidate's own frame."""
    return InitialEstimate(compose(candidate.origin, yaw_rotation(dtheta)), candidate.index,
                           float(dtheta), float(distance))


def correspondence_threshold(distance: float, cfg) -> float:
    if distance < 0:
        raise ValueError("descriptor distance must be >= 0")
    thr = cfg.icp_base_distance + cfg.icp_distance_slope * distance
    return float(np.clip(thr, cfg.icp_min_distance, cfg.icp_max_distance))


def rigid_fit(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rotation and translation taking ``src`` onto ``dst``."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return Pose.from_matrix(np.block([[R, (mu_d - R @ mu_s)[:, None]], [np.zeros((1, 3)), 1.0]]))


@dataclass(frozen=True)
class _Eval:
    T: Pose
    fitness: float
    rmse: float
    cost: float
    ok: np.ndarray
    nn: np.ndarray


def _evaluate(tree, src, T, max_corr) -> _Eval:
    d, j = tree.query(transform_points(src, T), distance_upper_bound=max_corr)
    ok = np.isfinite(d)
    n = int(np.count_nonzero(ok))
    rmse = float(np.sqrt(np.mean(d[ok] ** 2))) if n else np.inf
    # truncated squared error: an unmatched point costs max_corr^2
    cost = float(np.mean(np.where(ok, d, max_corr) ** 2))
    return _Eval(T, n / len(src), rmse, cost, ok, j)


def _shifted(T: Pose, dt: np.ndarray) -> Pose:
    return Pose(T.rotation, T.translation + dt)


def _icp_stage(tree, src, tgt, T0, max_corr, max_iter, tol, best=None):
    """One point-to-point ICP run; returns (best, iterations, converged).

    ``best`` is the incumbent to beat; iterates with a higher inlier RMSE
    than it never replace it.
    """
    cur = _evaluate(tree, src, T0, max_corr)
    if best is None:
        best = cur
    elif cur.rmse <= best.rmse and cur.cost < best.cost:
        best = cur
    rmse_ref = best.rmse
    prev_step = None
    converged = False
    it = 0
    if not cur.ok.any():
        return best, 0, False
    for it in range(1, max_iter + 1):
        if np.count_nonzero(cur.ok) < 3:
            break
        delta = rigid_fit(transform_points(src[cur.ok], cur.T), tgt[cur.nn[cur.ok]])
        nxt = _evaluate(tree, src, compose(delta, cur.T), max_corr)
        step = delta.translation
        if prev_step is not None and _aligned(step, prev_step):
            m = 1.0
            while m < 64:
                trial = _evaluate(tree, src, _shifted(nxt.T, m * step), max_corr)
                if trial.cost >= nxt.cost:
                    break
                nxt = trial
                m *= 2
        prev_step = step
        cur = nxt
        if cur.rmse <= rmse_ref and cur.cost < best.cost:
            best = cur
        if np.linalg.norm(delta.translation) < tol and rotation_angle(delta.rotation) < tol:
            converged = True
            break
        if not cur.ok.any():
            break
    return best, it, converged


def icp_refine(source: PointCloud, target: PointCloud, T0: Pose, max_corr: float,
               max_iter: int = 60, tol: float = 1e-4, target_tree: cKDTree | None = None,
               coarse_voxel: float | None = ICP_COARSE_VOXEL) -> RefinedPose:
    """Point-to-point ICP of ``source`` onto ``target`` starting at ``T0``.

    Each iteration pairs every source point with its nearest target point
    within ``max_corr`` and solves the rigid update in closed form. When
    two successive translation steps point the same way, the step is
    extrapolated by doubling while the truncated squared error keeps
    falling; this covers the slow drift along weakly constrained corridor
    axes. Stops once both increments fall below ``tol``.

    With ``coarse_voxel`` set, a first pass registers against the voxel
    centroids of the target. Centroids smooth out the scan-line pattern
    of a ring LiDAR, whose self-similarity one line spacing apart is
    otherwise a local minimum; the second pass then runs on the full
    target from the coarse estimate.

    The returned pose is the iterate with the lowest truncated error among
    those whose inlier RMSE does not exceed that of ``T0``.
    """
    source.require_points()
    target.require_points()
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    if coarse_voxel is not None and coarse_voxel <= 0:
        raise ValueError("coarse_voxel must be positive")
    src = source.xyz
    tgt = target.xyz
    tree = target_tree if target_tree is not None else cKDTree(tgt)
    start = _evaluate(tree, src, T0, max_corr)
    if not start.ok.any():
        return RefinedPose(T0, 0.0, 0.0, 0, False)
    used = 0
    T = T0
    if coarse_voxel is not None:
        coarse = voxel_downsample(tgt, coarse_voxel)
        cbest, used, _ = _icp_stage(cKDTree(coarse), src, coarse, T0, max_corr, max_iter, tol)
        T = cbest.T
    best, it, converged = _icp_stage(tree, src, tgt, T, max_corr, max_iter, tol, start)
    return RefinedPose(best.T, float(best.fitness), float(best.rmse), used + it, converged)


def _aligned(a: np.ndarray, b: np.ndarray, min_cos: float = 0.9) -> bool:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return na > 0 and nb > 0 and float(a @ b) / (na * nb) > min_cos


def _icp_target(cloud: PointCloud, reach: float) -> PointCloud:
    # map points the scan cannot overlap only slow the neighbor search down
    near = np.linalg.norm(cloud.xyz, axis=1) <= reach
    return PointCloud(cloud.xyz[near]) if near.any() else cloud


@dataclass(frozen=True)
class CandidateResult:
    rank: int
    estimate: InitialEstimate
    refined: RefinedPose
    threshold: float
    accepted: bool
    reason: str


@dataclass
class ReLocResult:
    candidates: list[CandidateResult]
    chosen: int
    T: Pose
    success: bool
    ranked: list[tuple[int, float]] = field(default_factory=list)
    timings_ms: dict = field(default_factory=dict)

    def to_report(self) -> dict:
        def pose_doc(T: Pose):
            return {"matrix": T.matrix().tolist(), "translation": T.translation.tolist(),
                    "quaternion_xyzw": rotation_to_quaternion(T.rotation).tolist(),
                    "yaw": T.yaw}

        return {
            "success": self.success,
            "chosen": self.chosen,
            "ranked": [{"index": i, "distance": d} for i, d in self.ranked],
            "pose": pose_doc(self.T),
            "candidates": [{
                "rank": c.rank, "index": c.estimate.candidate,
                "descriptor_distance": c.estimate.distance, "yaw": c.estimate.dtheta,
                "initial_pose": pose_doc(c.estimate.T0), "refined_pose": pose_doc(c.refined.T),
                "fitness": c.refined.fitness, "inlier_rmse": c.refined.inlier_rmse,
                "iterations": c.refined.iterations, "converged": c.refined.converged,
                "correspondence_threshold": c.threshold, "accepted": c.accepted,
                "reason": c.reason,
            } for c in self.candidates],
            "timings_ms": dict(self.timings_ms),
        }


def relocalize(scan: PointCloud, db: DescriptorDatabase, backend, cfg,
               params: ProjectionParams | None = None) -> ReLocResult:
    """Retrieve top-k submaps and register the scan against them in rank order.

    The first candidate passing the fitness and RMSE gates wins; otherwise
    the best candidate by fitness is returned with ``success=False``.
    """
    params = params or ProjectionParams.from_config(cfg)
    t_start = time.perf_counter()
    desc = backend.describe(project(scan, params))
    t_desc = time.perf_counter()
    ranked = db.query_top_k(desc.q, cfg.top_k)
    t_query = time.perf_counter()
    reach = float(np.max(np.linalg.norm(scan.xyz, axis=1)))
    source = PointCloud(voxel_subsample(scan.xyz, ICP_SOURCE_VOXEL))
    yaw_s = icp_s = 0.0
    results: list[CandidateResult] = []
    chosen = None
    for rank, (index, dist) in enumerate(ranked):
        rec = db.record(index)
        if rec.submap is None:
            raise ValueError(f"database record {index} carries no submap points")
        t0 = time.perf_counter()
        dtheta = backend.estimate_yaw(desc.w, rec.w)
        est = initial_pose(rec, dtheta, dist)
        t1 = time.perf_counter()
        thr = correspondence_threshold(dist, cfg)
        local = icp_refine(source, _icp_target(rec.submap.cloud, reach + thr), yaw_rotation(dtheta),
                           thr, cfg.icp_max_iterations, cfg.icp_tolerance)
        refined = RefinedPose(compose(rec.origin, local.T), local.fitness, local.inlier_rmse,
                              local.iterations, local.converged)
        t2 = time.perf_counter()
        yaw_s += t1 - t0
        icp_s += t2 - t1
        if refined.fitness < cfg.min_fitness:
            reason = f"fitness {refined.fitness:.3f} < {cfg.min_fitness}"
        elif refined.inlier_rmse > cfg.max_rmse:
            reason = f"rmse {refined.inlier_rmse:.3f} > {cfg.max_rmse}"
        else:
            reason = "accepted"
        accepted = reason == "accepted"
        results.append(CandidateResult(rank, est, refined, thr, accepted, reason))
        if accepted:
            chosen = index
            break
        log.info("candidate %d (rank %d) rejected: %s", index, rank, reason)
    success = chosen is not None
    if success:
        final = results[-1].refined.T
    else:
        best = max(results, key=lambda c: (c.refined.fitness, -c.rank))
        chosen, final = best.estimate.candidate, best.refined.T
    t_end = time.perf_counter()
    timings = {"descriptor": 1e3 * (t_desc - t_start), "query": 1e3 * (t_query - t_desc),
               "yaw": 1e3 * yaw_s, "icp": 1e3 * icp_s, "total": 1e3 * (t_end - t_start)}
    return ReLocResult(results, chosen, final, success, ranked, timings)
