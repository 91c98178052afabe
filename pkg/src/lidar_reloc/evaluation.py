"""Batch re-localization metrics: recall@k, yaw error, pose error, timing."""

from __future__ import annotations

import csv
import resource
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose, compose, inverse, wrap_angle
from .registration import relocalize

SUCCESS_RADIUS = 3.0
STAGES = ("descriptor", "query", "yaw", "icp", "total")


@dataclass(frozen=True, eq=False)
class QueryRecord:
    """One query: ground truth, ranked candidate positions and the outcome.

    ``yaw_est`` / ``yaw_gt`` refer to the frame of the chosen candidate.
    """

    query: int
    gt: Pose
    candidates: tuple[tuple[int, float], ...]
    candidate_positions: np.ndarray
    final: Pose | None = None
    success: bool = False
    yaw_est: float | None = None
    yaw_gt: float | None = None
    timings_ms: dict = field(default_factory=dict)

    def __post_init__(self):
        pos = np.asarray(self.candidate_positions, dtype=float).reshape(-1, 3)
        if len(pos) != len(self.candidates):
            raise ValueError("one position per candidate is required")
        object.__setattr__(self, "candidate_positions", pos)
        object.__setattr__(self, "candidates", tuple(self.candidates))


@dataclass
class EvalRun:
    records: list[QueryRecord]

    def __len__(self) -> int:
        return len(self.records)


def _require(run: EvalRun):
    if not run.records:
        raise ValueError("evaluation run has no queries")


def recall_at_k(run: EvalRun, success_radius: float = SUCCESS_RADIUS, k_max: int = 5) -> np.ndarray:
    """Entry ``k-1``: share of queries with a top-``k`` candidate within the radius."""
    if success_radius <= 0:
        raise ValueError("success radius must be > 0")
    _require(run)
    hits = np.zeros((len(run.records), k_max), dtype=bool)
    for i, r in enumerate(run.records):
        if len(r.candidates) == 0:
            continue
        d = np.linalg.norm(r.candidate_positions[:k_max] - r.gt.translation, axis=1)
        hits[i, :len(d)] = d <= success_radius
    return np.mean(np.logical_or.accumulate(hits, axis=1), axis=0)


def yaw_errors_deg(run: EvalRun) -> np.ndarray:
    recs = [r for r in run.records if r.yaw_est is not None and r.yaw_gt is not None]
    return np.array([abs(np.degrees(wrap_angle(r.yaw_est - r.yaw_gt))) for r in recs])


def yaw_stats(run: EvalRun) -> tuple[float, float]:
    """Mean and population standard deviation of absolute wrapped yaw error (deg)."""
    e = yaw_errors_deg(run)
    if len(e) == 0:
        raise ValueError("no yaw records")
    return float(np.mean(e)), float(np.std(e))


def translation_errors(run: EvalRun, accepted_only: bool = False) -> np.ndarray:
    recs = [r for r in run.records if r.final is not None and (r.success or not accepted_only)]
    return np.array([np.linalg.norm(r.final.translation - r.gt.translation) for r in recs])


def pose_stats(run: EvalRun, accepted_only: bool = False) -> tuple[float, float]:
    e = translation_errors(run, accepted_only)
    if len(e) == 0:
        raise ValueError("no pose records")
    return float(np.mean(e)), float(np.std(e))


def timing_stats(run: EvalRun) -> dict[str, float]:
    _require(run)
    return {s: float(np.mean([r.timings_ms.get(s, 0.0) for r in run.records])) for s in STAGES}


def record_from_result(query: int, gt: Pose, result, db) -> QueryRecord:
    positions = [db.record(i).origin.translation for i, _ in result.ranked]
    yaw_est = yaw_gt = None
    chosen = [c for c in result.candidates if c.estimate.candidate == result.chosen]
    if chosen:
        origin = db.record(result.chosen).origin
        yaw_est = chosen[0].estimate.dtheta
        yaw_gt = compose(inverse(origin), gt).yaw
    return QueryRecord(query, gt, tuple(result.ranked), np.array(positions), result.T,
                       result.success, yaw_est, yaw_gt, dict(result.timings_ms))


def evaluate(samples, db, backend, cfg) -> EvalRun:
    """Re-localize each sample's scan and compare against its pose."""
    records = []
    for i, s in enumerate(samples):
        res = relocalize(s.cloud, db, backend, cfg)
        records.append(record_from_result(i, s.pose, res, db))
    return EvalRun(records)


def peak_rss_mb() -> float:
    kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return kb / (1024.0 * 1024.0) if sys.platform == "darwin" else kb / 1024.0


def report(run: EvalRun, cfg=None, backend_name: str = "", success_radius: float = SUCCESS_RADIUS,
           k_max: int | None = None) -> dict:
    k_max = k_max or (cfg.top_k if cfg is not None else 5)
    rec = recall_at_k(run, success_radius, k_max)
    doc = {
        "backend": backend_name,
        "queries": len(run),
        "relocalized": int(sum(r.success for r in run.records)),
        "success_radius_m": success_radius,
        "success_radius_note": "inferred radius; matches the 3 m training similarity radius",
        "recall_at_k": {str(k + 1): float(v) for k, v in enumerate(rec)},
        "per_query": [{
            "query": r.query, "success": r.success,
            "top": [i for i, _ in r.candidates],
            "translation_error_m": (float(np.linalg.norm(r.final.translation - r.gt.translation))
                                    if r.final is not None else None),
            "yaw_error_deg": (abs(float(np.degrees(wrap_angle(r.yaw_est - r.yaw_gt))))
                              if r.yaw_est is not None else None),
        } for r in run.records],
        "timings_ms": timing_stats(run),
        "resources": {"peak_rss_mb": peak_rss_mb()},
    }
    if len(yaw_errors_deg(run)):
        mae, std = yaw_stats(run)
        doc["yaw_error_deg"] = {"mae": mae, "std": std}
    if len(translation_errors(run)):
        mean, std = pose_stats(run)
        doc["translation_error_m"] = {"mean": mean, "std": std}
    if cfg is not None:
        doc["config"] = cfg.to_dict()
    return doc


def write_recall_csv(recall: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "recall"])
        for k, v in enumerate(recall, 1):
            w.writerow([k, repr(float(v))])


def write_gnuplot(recall: np.ndarray, path) -> None:
    lines = ["# k recall"] + [f"{k} {float(v)!r}" for k, v in enumerate(recall, 1)]
    Path(path).write_text("\n".join(lines) + "\n")
