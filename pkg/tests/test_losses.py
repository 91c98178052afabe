import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidar_reloc.model import (DescriptorNet, Triplet, combined_loss, cross_entropy,
                               cross_entropy_grad, hinge_loss, hinge_loss_grad, joint_backward,
                               orientation_loss, orientation_loss_grad, smooth_labels,
                               triplet_loss, triplet_loss_from_distances, triplet_loss_grad)
from lidar_reloc.projection import ProjectionParams, RangeImage

from gradcheck import TOL, numeric_grad, rel_error, sampled_grad


class TestUnitValues:
    def test_triplet(self):
        assert triplet_loss_from_distances(1.0, 0.5, 0.2) == pytest.approx(0.7)

    def test_triplet_boundary(self):
        q = np.zeros(4)
        d = np.array([np.sqrt(0.2), 0, 0, 0])
        assert triplet_loss(q, q, d, 0.2) == pytest.approx(0.0, abs=1e-15)

    def test_triplet_uses_squared_distance(self):
        # d_s = 4, d_d = 1 under squares
        assert triplet_loss([0.0], [2.0], [1.0], 0.2) == pytest.approx(3.2)

    def test_hinge(self):
        assert hinge_loss([0, 0, 0], 0) == 2.0
        assert hinge_loss([10, 0, 0], 0) == 0.0
        assert hinge_loss([1, 3, 0], 0) == 3.0

    def test_orientation(self):
        assert orientation_loss([0, 0], 1.234) == pytest.approx(0.5)
        assert orientation_loss([np.cos(0.3), np.sin(0.3)], 0.3) == pytest.approx(0.0)

    def test_orientation_wraparound(self):
        a = orientation_loss([1.0, 0.0], np.radians(359))
        b = orientation_loss([1.0, 0.0], np.radians(1))
        assert a == pytest.approx(b)

    def test_smooth_labels(self):
        np.testing.assert_allclose(smooth_labels([1, 0, 0], 0.3), [0.8, 0.1, 0.1])
        np.testing.assert_array_equal(smooth_labels([0, 1, 0], 0.0), [0, 1, 0])

    def test_smooth_labels_range(self):
        with pytest.raises(ValueError):
            smooth_labels([1, 0, 0], 1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 8), st.floats(0, 0.99), st.integers(0, 2**32 - 1))
    def test_smoothing_preserves_mass(self, n, a, seed):
        p = np.random.default_rng(seed).dirichlet(np.ones(n))
        assert smooth_labels(p, a).sum() == pytest.approx(1.0)

    def test_combined(self):
        assert combined_loss(0.7, 0.5, 2.0) == pytest.approx(3.2)
        assert combined_loss(0, 0, 0) == 0

    def test_margin_positive(self):
        with pytest.raises(ValueError):
            triplet_loss([0.0], [0.0], [1.0], 0.0)

    def test_cross_entropy_uniform(self):
        assert cross_entropy([0, 0, 0], [1, 0, 0]) == pytest.approx(np.log(3))


class TestLossGradients:
    def test_triplet(self, rng):
        qa, qs, qd = (rng.normal(size=(5, 6)) for _ in range(3))
        grads = triplet_loss_grad(qa, qs, qd, 2.0)
        for arr, g in zip((qa, qs, qd), grads):
            num = numeric_grad(lambda: triplet_loss(qa, qs, qd, 2.0), arr)
            assert rel_error(g, num) <= TOL

    def test_triplet_pushes_similar_in(self, rng):
        qa, qs, qd = (rng.normal(size=(1, 4)) for _ in range(3))
        _, gs, gd = triplet_loss_grad(qa, qs, qd, 100.0)
        step = 1e-3
        assert np.linalg.norm(qa - (qs - step * gs)) < np.linalg.norm(qa - qs)
        assert np.linalg.norm(qa - (qd - step * gd)) > np.linalg.norm(qa - qd)

    def test_orientation(self, rng):
        y = rng.uniform(-1, 1, (6, 2))
        d = rng.uniform(-np.pi, np.pi, 6)
        num = numeric_grad(lambda: orientation_loss(y, d), y)
        assert rel_error(orientation_loss_grad(y, d), num) <= TOL

    def test_hinge(self, rng):
        s = rng.normal(size=(6, 3))
        lab = rng.integers(0, 3, 6)
        num = numeric_grad(lambda: hinge_loss(s, lab), s)
        assert rel_error(hinge_loss_grad(s, lab), num) <= TOL

    def test_smoothed_cross_entropy(self, rng):
        s = rng.normal(size=(6, 3))
        t = smooth_labels(np.eye(3)[rng.integers(0, 3, 6)], 0.1)
        num = numeric_grad(lambda: cross_entropy(s, t), s)
        assert rel_error(cross_entropy_grad(s, t), num) <= TOL


class TestJointGradient:
    """The backward pass through the whole network matches finite differences."""

    @pytest.mark.parametrize("classifier, smoothing", [(False, 0.0), (True, 0.0), (True, 0.1)])
    def test_network(self, rng, classifier, smoothing):
        P = ProjectionParams(4, 8)
        net = DescriptorNet(4, 8, hidden=6, seed=1)
        batch = [Triplet(*(RangeImage(rng.uniform(0.1, 1, (4, 8)), P) for _ in range(3)),
                         float(rng.uniform(-np.pi, np.pi)), int(rng.integers(0, 3)))
                 for _ in range(2)]
        params = net.named_params()
        for p in params.values():
            p.grad[...] = 0.0
        joint_backward(net, batch, 5.0, classifier, smoothing)
        analytic = {k: p.grad.copy() for k, p in params.items()}

        def loss():
            parts, _ = joint_backward(net, batch, 5.0, classifier, smoothing)
            return parts["L"]

        for name in ("trunk.0.weight", "trunk.3.weight", "trunk.6.bias", "trunk.10.weight",
                     "q_head.weight", "w_head.bias", "orientation.0.weight",
                     "orientation.2.weight", "classifier.0.weight", "classifier.2.bias"):
            p = params[name]
            if name.startswith("classifier") and not classifier:
                assert not analytic[name].any()
                continue
            pos, num = sampled_grad(loss, p.value, rng)
            assert rel_error(analytic[name].reshape(-1)[pos], num) <= TOL, name
