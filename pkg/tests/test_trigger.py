import itertools

import numpy as np
import pytest

from lidar_reloc.descriptors import ClassificationUnavailable
from lidar_reloc.spectral import SpectralBackend
from lidar_reloc.trigger import JUNCTION, STRAIGHT, TURN, TriggerState, classify_frame, update


def reference_fires(seq, n, c):
    """Fire when the last ``n`` decisions are all junction, a non-junction
    frame has occurred since the previous firing, and at least ``c`` frames
    have passed since it."""
    fires = []
    last_fire = None
    last_other = None
    for t, cls in enumerate(seq):
        if cls != JUNCTION:
            last_other = t
        window = seq[max(0, t - n + 1): t + 1]
        ok = len(window) == n and all(x == JUNCTION for x in window)
        if ok and last_fire is not None:
            ok = (last_other is not None and last_other > last_fire) and t - last_fire >= c
        fires.append(ok)
        if ok:
            last_fire = t
    return fires


def run(seq, n, c):
    state = TriggerState(n, c)
    out = []
    for cls in seq:
        state, fired = update(state, cls)
        out.append(fired)
    return out


class TestTrigger:
    def test_exhaustive_against_reference(self):
        for length in range(1, 9):
            for seq in itertools.product((STRAIGHT, JUNCTION, TURN), repeat=length):
                assert run(seq, 3, 5) == reference_fires(seq, 3, 5), seq

    @pytest.mark.parametrize("n, c", [(1, 0), (2, 1), (4, 3)])
    def test_other_settings(self, n, c):
        rng = np.random.default_rng(n * 10 + c)
        for _ in range(300):
            seq = tuple(rng.choice([STRAIGHT, JUNCTION, JUNCTION, TURN], size=12))
            assert run(seq, n, c) == reference_fires(seq, n, c)

    def test_single_arrival_fires_once(self):
        seq = [STRAIGHT] * 3 + [JUNCTION] * 10 + [STRAIGHT] * 3
        assert sum(run(seq, 3, 5)) == 1
        assert run(seq, 3, 5).index(True) == 5

    def test_rearm_after_cooldown(self):
        seq = [JUNCTION] * 3 + [STRAIGHT] + [JUNCTION] * 3
        # second block completes at t=6 but only 4 frames passed
        assert run(seq, 3, 5) == [False, False, True, False, False, False, False]
        assert run(seq, 3, 4)[-1] is True

    def test_unknown_class(self):
        with pytest.raises(ValueError):
            update(TriggerState(), 5)

    def test_settings_validated(self):
        with pytest.raises(ValueError):
            TriggerState(0, 5)
        with pytest.raises(ValueError):
            TriggerState(3, -1)

    def test_needs_classifying_backend(self):
        with pytest.raises(ClassificationUnavailable):
            classify_frame(np.zeros(64), SpectralBackend())


class _Fixed:
    can_classify = True

    def __init__(self, p):
        self.p = np.asarray(p)

    def classify(self, q):
        return self.p


class TestClassifyFrame:
    def test_argmax(self):
        assert classify_frame(np.zeros(64), _Fixed([0.1, 0.8, 0.1])) == 1

    def test_tie_goes_to_lower_index(self):
        assert classify_frame(np.zeros(64), _Fixed([0.4, 0.4, 0.2])) == 0
