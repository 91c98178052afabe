"""Descriptor pair shared by the learned and spectral backends."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DESCRIPTOR_DIM = 64


class ClassificationUnavailable(RuntimeError):
    """The active backend cannot classify places."""


@dataclass(frozen=True, eq=False)
class DescriptorPair:
    """``q`` identifies the place, ``w`` carries its orientation."""

    q: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        for name in ("q", "w"):
            v = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            if v.shape != (DESCRIPTOR_DIM,):
                raise ValueError(f"{name} must have {DESCRIPTOR_DIM} entries, got {v.size}")
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} has non-finite entries")
            v.setflags(write=False)
            object.__setattr__(self, name, v)
