"""Split a global map into per-pose submaps expressed in the robot frame."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, PointCloud, Trajectory, inverse, transform_points

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MapBundle:
    map: PointCloud
    trajectory: Trajectory
    map_path: str | None = None
    trajectory_path: str | None = None

    def __post_init__(self):
        self.map.require_points()
        lo = self.map.xyz.min(axis=0) - 10.0
        hi = self.map.xyz.max(axis=0) + 10.0
        P = self.trajectory.positions
        outside = np.any((P < lo) | (P > hi), axis=1)
        if np.any(outside):
            i = int(np.flatnonzero(outside)[0])
            raise ValueError(f"trajectory pose {self.trajectory[i].index} lies outside the "
                             "map bounding box expanded by 10 m")


class MapIndex:
    """Map-frame points with a k-d tree for radius crops."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self._tree: cKDTree | None = None

    def __len__(self) -> int:
        return len(self.points)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree

    def crop(self, center, radius: float) -> np.ndarray:
        """Sorted indices of the points within ``radius`` of ``center``."""
        if np.isinf(radius):
            return np.arange(len(self.points))
        center = np.asarray(center, dtype=float)
        idx = np.asarray(self.tree.query_ball_point(center, radius), dtype=np.int64)
        idx.sort()
        # ball query is inclusive up to rounding; enforce the predicate exactly
        d = np.linalg.norm(self.points[idx] - center, axis=1)
        return idx[d <= radius]


@dataclass(frozen=True, eq=False)
class Submap:
    """Map points within ``radius`` of one trajectory pose.

    Only the pose and radius are stored; the crop is recomputed against the
    shared map on access and moved into the robot frame, so hundreds of
    overlapping submaps cost no extra memory.
    """

    index: int
    origin: Pose
    source: MapIndex
    radius: float

    @classmethod
    def from_cloud(cls, index: int, origin: Pose, cloud: PointCloud) -> Submap:
        """Wrap a cloud that is already in the robot frame of ``origin``."""
        cloud.require_points()
        return cls(index, origin, MapIndex(transform_points(cloud.xyz, origin)), np.inf)

    @property
    def point_indices(self) -> np.ndarray:
        return self.source.crop(self.origin.translation, self.radius)

    def __len__(self) -> int:
        return len(self.point_indices)

    @property
    def map_points(self) -> np.ndarray:
        return self.source.points[self.point_indices]

    @property
    def cloud(self) -> PointCloud:
        return PointCloud(transform_points(self.map_points, inverse(self.origin)))


def partition_map(bundle: MapBundle, crop_radius: float = 100.0, stride: int = 1,
                  min_points: int = 100) -> list[Submap]:
    """One submap per ``stride``-th trajectory pose.

    Each submap holds the map points within ``crop_radius`` of the pose
    position, re-expressed through the inverse pose. Submaps with fewer than
    ``min_points`` points are skipped.
    """
    if crop_radius <= 0:
        raise ValueError("crop_radius must be > 0")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    source = MapIndex(bundle.map.xyz)
    out = []
    for entry in list(bundle.trajectory)[::stride]:
        sm = Submap(entry.index, entry.pose, source, float(crop_radius))
        n = len(sm)
        if n < min_points:
            log.info("submap %d skipped: %d points < %d", entry.index, n, min_points)
            continue
        out.append(sm)
    if not out:
        raise ValueError("map partitioning produced no submaps")
    return out


def pack_submaps(submaps) -> dict[str, np.ndarray]:
    """Arrays describing ``submaps``; each distinct source map is stored once."""
    sources: list[MapIndex] = []
    which = []
    for s in submaps:
        for k, src in enumerate(sources):
            if src is s.source:
                which.append(k)
                break
        else:
            sources.append(s.source)
            which.append(len(sources) - 1)
    offsets = np.cumsum([0] + [len(src) for src in sources])
    return {
        "submap_points": np.concatenate([src.points for src in sources]),
        "submap_point_offsets": offsets,
        "submap_source": np.array(which, dtype=np.int64),
        "submap_radius": np.array([s.radius for s in submaps], dtype=float),
        "submap_index": np.array([s.index for s in submaps], dtype=np.int64),
        "submap_origins": np.array([s.origin.matrix() for s in submaps]),
    }


def unpack_submaps(z) -> list[Submap]:
    pts, offs = z["submap_points"], z["submap_point_offsets"]
    sources = [MapIndex(pts[offs[k]:offs[k + 1]]) for k in range(len(offs) - 1)]
    return [Submap(int(i), Pose.from_matrix(T), sources[int(w)], float(r))
            for i, T, w, r in zip(z["submap_index"], z["submap_origins"], z["submap_source"],
                                  z["submap_radius"])]


def save_submaps(submaps: list[Submap], path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, **pack_submaps(submaps))


def load_submaps(path) -> list[Submap]:
    with np.load(path) as z:
        return unpack_submaps(z)
