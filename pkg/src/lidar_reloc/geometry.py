"""Rigid-body types: poses in SE(3), point clouds and trajectories.

All values are immutable once built. Rotations are only created through
validated constructors so the orthonormality invariant holds everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

ORTHO_TOL = 1e-9
MAX_POINTS = 20_000_000


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Pose:
    """Homogeneous rigid transform ``x -> R @ x + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"bad pose shapes: rotation {R.shape}, translation {t.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, t) -> Pose:
        return cls(np.eye(3), np.asarray(t, dtype=float))

    @classmethod
    def from_yaw(cls, theta: float, translation=(0.0, 0.0, 0.0)) -> Pose:
        if not np.isfinite(theta):
            raise ValueError("yaw must be finite")
        c, s = np.cos(theta), np.sin(theta)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(R, np.asarray(translation, dtype=float))

    @classmethod
    def from_quaternion(cls, q, translation=(0.0, 0.0, 0.0), tol: float = 1e-3) -> Pose:
        """Build from a quaternion given as ``(qx, qy, qz, qw)``.

        The quaternion must have unit norm within ``tol``; it is then
        renormalized exactly before conversion.
        """
        q = np.asarray(q, dtype=float)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or abs(n - 1.0) > tol:
            raise ValueError(f"quaternion norm {n:.6f} is not 1 within {tol}")
        x, y, z, w = q / n
        R = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
            ]
        )
        return cls(project_to_so3(R), np.asarray(translation, dtype=float))

    @classmethod
    def from_matrix(cls, T) -> Pose:
        T = np.asarray(T, dtype=float)
        if T.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {T.shape}")
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def __matmul__(self, other: Pose) -> Pose:
        return compose(self, other)


def project_to_so3(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def compose(a: Pose, b: Pose) -> Pose:
    """``a * b``: apply ``b`` first, then ``a``."""
    R = project_to_so3(a.rotation @ b.rotation)
    return Pose(R, a.rotation @ b.translation + a.translation)


def inverse(t: Pose) -> Pose:
    Rt = t.rotation.T
    return Pose(Rt, -Rt @ t.translation)


def yaw_rotation(theta: float) -> Pose:
    """Rotation about +z by ``theta`` radians, no translation."""
    return Pose.from_yaw(theta)


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(theta, dtype=float) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def rotation_angle(R: np.ndarray) -> float:
    """Angle of the axis-angle representation of ``R``."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ``(N, 3)`` array of points in meters with optional intensity.

    Intensity is carried through I/O but ignored by the pipeline.
    """

    xyz: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        xyz = _frozen(self.xyz)
        if xyz.size == 0:
            xyz = xyz.reshape(0, 3)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ValueError(f"point array must be (N, 3), got {xyz.shape}")
        if len(xyz) > MAX_POINTS:
            raise ValueError(f"{len(xyz)} points exceeds cap of {MAX_POINTS}")
        if not np.all(np.isfinite(xyz)):
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "xyz", xyz)
        if self.intensity is not None:
            inten = _frozen(self.intensity).reshape(-1)
            if len(inten) != len(xyz):
                raise ValueError("intensity length does not match point count")
            object.__setattr__(self, "intensity", inten)

    def __len__(self) -> int:
        return len(self.xyz)

    def require_points(self) -> None:
        if len(self.xyz) == 0:
            raise ValueError("operation requires a non-empty point cloud")


def transform_points(xyz: np.ndarray, t: Pose) -> np.ndarray:
    return xyz @ t.rotation.T + t.translation


def voxel_downsample(xyz: np.ndarray, voxel: float) -> np.ndarray:
    """Centroid of the points in each occupied voxel, voxels in sorted order."""
    keys = np.floor(xyz / voxel).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    out = np.zeros((len(counts), 3))
    np.add.at(out, inv, xyz)
    return out / counts[:, None]


def voxel_subsample(xyz: np.ndarray, voxel: float) -> np.ndarray:
    """One measured point per occupied voxel: the one closest to the voxel centroid.

    Unlike centroids, the kept points lie on the sampled surface exactly.
    """
    keys = np.floor(xyz / voxel).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    cent = np.zeros((len(counts), 3))
    np.add.at(cent, inv, xyz)
    cent /= counts[:, None]
    d = np.linalg.norm(xyz - cent[inv], axis=1)
    order = np.lexsort((np.arange(len(xyz)), d, inv))
    first = np.r_[True, inv[order][1:] != inv[order][:-1]]
    return xyz[order[first]]


def transform_cloud(cloud: PointCloud, t: Pose) -> PointCloud:
    """Map every point by ``R p + t``; count and order preserved."""
    return PointCloud(transform_points(cloud.xyz, t), cloud.intensity)


@dataclass(frozen=True)
class StampedPose:
    index: int
    pose: Pose
    timestamp: float | None = None


@dataclass(frozen=True)
class Trajectory:
    entries: tuple[StampedPose, ...] = field(default_factory=tuple)

    def __post_init__(self):
        entries = tuple(self.entries)
        if not entries:
            raise ValueError("trajectory needs at least one pose")
        idx = [e.index for e in entries]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("trajectory indices must be strictly increasing")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i) -> StampedPose:
        return self.entries[i]

    @property
    def poses(self) -> list[Pose]:
        return [e.pose for e in self.entries]

    @property
    def positions(self) -> np.ndarray:
        return np.array([e.pose.translation for e in self.entries]).reshape(-1, 3)

    @classmethod
    def from_poses(cls, poses: Iterable[Pose], timestamps: Sequence[float] | None = None) -> Trajectory:
        poses = list(poses)
        ts = list(timestamps) if timestamps is not None else [None] * len(poses)
        return cls(tuple(StampedPose(i, p, t) for i, (p, t) in enumerate(zip(poses, ts))))

    @classmethod
    def from_positions(cls, positions, timestamps: Sequence[float] | None = None) -> Trajectory:
        """Position-only trajectory with yaw synthesized from the path tangent.

        Heading of pose k is the direction of ``p[k+1] - p[k]``; the last
        pose reuses the previous heading. Roll and pitch are zero.
        """
        P = np.asarray(positions, dtype=float).reshape(-1, 3)
        return cls.from_poses(
            [Pose.from_yaw(y, p) for y, p in zip(tangent_yaws(P), P)], timestamps
        )


def tangent_yaws(P: np.ndarray) -> np.ndarray:
    n = len(P)
    yaws = np.zeros(n)
    last = 0.0
    for k in range(n - 1):
        d = P[k + 1, :2] - P[k, :2]
        if np.hypot(*d) > 0:
            last = float(np.arctan2(d[1], d[0]))
        yaws[k] = last
    if n > 1:
        yaws[-1] = yaws[-2]
    return yaws
