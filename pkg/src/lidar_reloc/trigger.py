"""Junction-arrival trigger over a stream of per-frame class decisions."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .descriptors import ClassificationUnavailable

STRAIGHT, JUNCTION, TURN = 0, 1, 2


def classify_frame(q, backend) -> int:
    """Argmax class of ``q``; ties go to the lower class index."""
    if not getattr(backend, "can_classify", False):
        raise ClassificationUnavailable(
            f"classification unavailable with the {getattr(backend, 'name', '?')} backend")
    return int(np.argmax(backend.classify(q)))


@dataclass
class TriggerState:
    """Debounce window of the last ``debounce`` decisions plus cooldown.

    After a firing the trigger is disarmed until a non-junction frame
    arrives, and no firing happens for ``cooldown`` further frames.
    """

    debounce: int = 3
    cooldown_frames: int = 20
    buffer: deque = field(default=None)
    cooldown: int = 0
    armed: bool = True

    def __post_init__(self):
        if self.debounce < 1:
            raise ValueError("debounce must be >= 1")
        if self.cooldown_frames < 0:
            raise ValueError("cooldown must be >= 0")
        if self.buffer is None:
            self.buffer = deque(maxlen=self.debounce)

    @classmethod
    def from_config(cls, cfg) -> TriggerState:
        return cls(cfg.trigger_debounce, cfg.trigger_cooldown)


def update(state: TriggerState, cls: int) -> tuple[TriggerState, bool]:
    """Push one decision; returns the (mutated) state and whether it fired."""
    if cls not in (STRAIGHT, JUNCTION, TURN):
        raise ValueError(f"unknown class {cls}")
    if state.cooldown > 0:
        state.cooldown -= 1
    state.buffer.append(cls)
    if cls != JUNCTION:
        state.armed = True
    fired = (len(state.buffer) == state.debounce
             and all(c == JUNCTION for c in state.buffer)
             and state.armed and state.cooldown == 0)
    if fired:
        state.armed = False
        state.cooldown = state.cooldown_frames
    return state, fired
