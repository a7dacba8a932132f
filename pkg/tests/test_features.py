import math

import numpy as np
import pytest

from agop_collapse.features import (
    FeatureMapSpec,
    apply_feature_map,
    arccos_expected_inner,
    laplacian_l1_kernel,
    relu_feature_map,
    rff_laplacian_map,
)


def _unit_pair(r, d=50, seed=0):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((d, 2)))
    x = q[:, 0]
    y = r * q[:, 0] + math.sqrt(max(0.0, 1 - r * r)) * q[:, 1]
    return np.column_stack([x, y])


class TestReluMap:
    def test_nonnegative(self):
        X = np.random.default_rng(0).standard_normal((10, 20))
        assert relu_feature_map(FeatureMapSpec(width=64), X).min() >= 0.0

    def test_shape_and_replay(self):
        X = np.random.default_rng(0).standard_normal((10, 3))
        spec = FeatureMapSpec(width=33, seed=5)
        a = apply_feature_map(spec, X)
        assert a.shape == (33, 3)
        assert a.tobytes() == apply_feature_map(spec, X).tobytes()

    @pytest.mark.parametrize("r, target", [(1.0, 1.0), (0.0, 1.0 / math.pi)])
    def test_monte_carlo(self, r, target):
        P = _unit_pair(r)
        vals = []
        for seed in range(5):
            F = relu_feature_map(FeatureMapSpec(width=4096, seed=seed), P)
            vals.append(F[:, 0] @ F[:, 1])
        assert abs(np.mean(vals) - target) <= 0.05


class TestRffMap:
    spec = FeatureMapSpec("rff-laplacian", 4096, bandwidth=2.0, seed=1)

    def test_bounded(self):
        X = np.random.default_rng(0).standard_normal((5, 10))
        assert np.abs(rff_laplacian_map(self.spec, X)).max() <= math.sqrt(2.0 / 4096)

    def test_self_inner_product(self):
        X = np.random.default_rng(0).standard_normal((5, 4))
        F = rff_laplacian_map(self.spec, X)
        np.testing.assert_allclose(np.sum(F * F, axis=0), 1.0, atol=0.05)

    @pytest.mark.parametrize("scale", [0.1, 0.5, 1.5])
    def test_matches_l1_laplacian(self, scale):
        rng = np.random.default_rng(3)
        x, z = rng.standard_normal(5) * scale, rng.standard_normal(5) * scale
        F = rff_laplacian_map(self.spec, np.column_stack([x, z]))
        assert abs(F[:, 0] @ F[:, 1] - laplacian_l1_kernel(x, z, 2.0)) <= 0.05

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            FeatureMapSpec("rff-laplacian", 10, bandwidth=0.0)
        with pytest.raises(ValueError):
            FeatureMapSpec("tanh")


class TestArccos:
    def test_endpoints(self):
        assert arccos_expected_inner(1.0) == pytest.approx(1.0, abs=1e-15)
        assert arccos_expected_inner(0.0) == pytest.approx(1 / math.pi, abs=1e-15)
        assert arccos_expected_inner(-1.0) == pytest.approx(0.0, abs=1e-15)

    def test_monotone(self):
        r = np.linspace(-1, 1, 101)
        v = [arccos_expected_inner(x) for x in r]
        assert np.all(np.diff(v) > 0)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            arccos_expected_inner(1.01)
