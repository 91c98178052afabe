"""Spherical projection of point clouds into panoramic range images.

Column layout: azimuth ``atan2(y, x)`` increases leftward, so the image
column for azimuth ``a`` is ``floor((1 - (a + pi) / 2pi) * W) mod W``;
azimuth 0 (the +x axis) lands on column ``W // 2``. Row 0 is the top of the
vertical field of view. Pixels hold range divided by ``max_range``; 0 marks
an empty cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud


@dataclass(frozen=True)
class ProjectionParams:
    height: int = 16
    width: int = 360
    fov_up_deg: float = 15.0
    fov_down_deg: float = -15.0
    max_range: float = 100.0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("image dimensions must be >= 1")
        if not self.fov_up_deg > self.fov_down_deg:
            raise ValueError("fov_up_deg must exceed fov_down_deg")
        if not self.max_range > 0:
            raise ValueError("max_range must be > 0")

    @classmethod
    def from_config(cls, cfg) -> ProjectionParams:
        return cls(cfg.proj_height, cfg.proj_width, cfg.fov_up_deg, cfg.fov_down_deg,
                   cfg.max_range)


@dataclass(frozen=True, eq=False)
class RangeImage:
    pixels: np.ndarray
    params: ProjectionParams = field(default_factory=ProjectionParams)
    discarded: int = 0

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError("range image must be 2-D")
        if np.any(px < 0) or np.any(px > 1):
            raise ValueError("range image pixels must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def pixel_coordinates(xyz: np.ndarray, params: ProjectionParams):
    """Row, column and range for every point plus a validity mask."""
    H, W = params.height, params.width
    r = np.linalg.norm(xyz, axis=1)
    valid = (r > 0) & (r <= params.max_range)
    safe_r = np.where(r > 0, r, 1.0)
    az = np.arctan2(xyz[:, 1], xyz[:, 0])
    el = np.arcsin(np.clip(xyz[:, 2] / safe_r, -1.0, 1.0))
    up, down = np.radians(params.fov_up_deg), np.radians(params.fov_down_deg)
    valid &= (el <= up) & (el >= down)
    col = np.floor((1.0 - (az + np.pi) / (2 * np.pi)) * W).astype(np.int64) % W
    row = np.floor((up - el) / (up - down) * H).astype(np.int64)
    row = np.clip(row, 0, H - 1)
    return row, col, r, valid


def project(cloud: PointCloud, params: ProjectionParams = ProjectionParams()) -> RangeImage:
    """Range image with the nearest return winning each cell.

    Points at the origin, outside the field of view, or beyond ``max_range``
    are dropped; ``RangeImage.discarded`` counts them.
    """
    cloud.require_points()
    row, col, r, valid = pixel_coordinates(cloud.xyz, params)
    H, W = params.height, params.width
    flat = np.full(H * W, np.inf)
    np.minimum.at(flat, row[valid] * W + col[valid], r[valid])
    flat = np.where(np.isfinite(flat), flat / params.max_range, 0.0)
    return RangeImage(np.clip(flat, 0.0, 1.0).reshape(H, W), params,
                      int(np.count_nonzero(~valid)))


def shift_columns(img: RangeImage, k: int) -> RangeImage:
    """Cyclic shift by ``k`` columns toward higher column index."""
    return RangeImage(np.roll(img.pixels, int(k) % img.width, axis=1), img.params, img.discarded)


def yaw_to_columns(theta: float, width: int) -> float:
    """Column shift produced by rotating the cloud by ``theta`` about +z."""
    return -theta * width / (2 * np.pi)
