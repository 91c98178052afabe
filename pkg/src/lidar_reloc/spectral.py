"""Training-free descriptor backend built on the azimuthal range profile.

The rows of a range image are collapsed into one profile over azimuth:
the square root of the farthest return in each column. Magnitudes of its
discrete Fourier coefficients ignore cyclic shifts, so ``q`` is exactly yaw
invariant; the profile itself, averaged down to 64 bins, serves as ``w``
and yaw falls out of circular cross-correlation.

The farthest return tracks the open corridor directions far better than a
row mean, which is dominated by nearby floor and ceiling hits, and the
square root keeps long corridor axes from swamping the wall structure.
"""

from __future__ import annotations

import numpy as np

from .descriptors import DESCRIPTOR_DIM, ClassificationUnavailable, DescriptorPair
from .projection import RangeImage


def azimuth_profile(img: RangeImage) -> np.ndarray:
    """``sqrt`` of each column's largest pixel, ordered by increasing azimuth.

    Columns run leftward in azimuth, so the column profile is reversed. A
    yaw of ``+k`` columns then rolls this profile by ``+k``.
    """
    return np.sqrt(img.pixels.max(axis=0))[::-1].copy()


def _rebin(profile: np.ndarray, bins: int) -> np.ndarray:
    """Average a cyclic profile into ``bins`` equal arcs (fractional overlap)."""
    W = len(profile)
    edges = np.arange(bins + 1) * W / bins
    M = np.zeros((bins, W))
    for b in range(bins):
        lo, hi = edges[b], edges[b + 1]
        cols = np.arange(int(np.floor(lo)), int(np.ceil(hi)))
        overlap = np.minimum(cols + 1, hi) - np.maximum(cols, lo)
        M[b, cols] = overlap / (hi - lo)
    return M @ profile


def spectral_descriptor(img: RangeImage) -> DescriptorPair:
    if not np.any(img.pixels):
        raise ValueError("range image is empty; no spectral descriptor")
    W = img.width
    if W < DESCRIPTOR_DIM:
        raise ValueError(f"image width {W} too small for {DESCRIPTOR_DIM} spectral terms")
    prof = azimuth_profile(img)
    # coefficient 0 (the mean) is kept: overall tunnel size separates places well
    spec = np.abs(np.fft.fft(prof)[:DESCRIPTOR_DIM]) / W
    return DescriptorPair(spec, _rebin(prof, DESCRIPTOR_DIM))


def yaw_by_correlation(w_a, w_b) -> float:
    """Yaw that rotates the scene of ``w_a`` onto ``w_b``.

    Picks the cyclic shift ``s`` maximizing ``sum_j w_a[j] w_b[j + s]``,
    which is the shift for which ``w_b ~ roll(w_a, s)``. Near-ties go to the
    smaller absolute angle, then to the positive one.
    """
    a = np.asarray(w_a, dtype=float)
    b = np.asarray(w_b, dtype=float)
    n = len(a)
    corr = np.array([np.dot(a, np.roll(b, -s)) for s in range(n)])
    shifts = np.arange(n)
    signed = np.where(shifts > n // 2, shifts - n, shifts)
    tol = 1e-12 * max(1.0, float(np.max(np.abs(corr))))
    best = np.flatnonzero(corr >= corr.max() - tol)
    s = min(best, key=lambda i: (abs(signed[i]), -signed[i]))
    return float(signed[s] * 2 * np.pi / n)


class SpectralBackend:
    name = "spectral"
    can_classify = False

    def describe(self, img: RangeImage) -> DescriptorPair:
        return spectral_descriptor(img)

    def estimate_yaw(self, w_a, w_b) -> float:
        return yaw_by_correlation(w_a, w_b)

    def classify(self, q):
        raise ClassificationUnavailable("classification unavailable with the spectral backend")
