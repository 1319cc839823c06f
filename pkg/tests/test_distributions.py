import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dglab.distributions import (
    GaussianMixture,
    RatioField,
    canonical_pair,
    log_density,
    log_ratio,
    ratio_gradient,
    sample,
    score,
)
from dglab.errors import InvalidArgumentError
from dglab.objectives import make_grid


def two_comp_2d():
    return GaussianMixture(
        [0.35, 0.65],
        [[0.5, -1.0], [-1.2, 0.8]],
        [[[1.0, 0.3], [0.3, 0.5]], [[0.7, -0.2], [-0.2, 1.4]]],
    )


def fd_grad(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[i] = h
        g[..., i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


class TestValidation:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(InvalidArgumentError):
            GaussianMixture([0.5, 0.6], [[0.0], [1.0]], [[[1.0]], [[1.0]]])

    def test_weights_positive(self):
        with pytest.raises(InvalidArgumentError):
            GaussianMixture([1.5, -0.5], [[0.0], [1.0]], [[[1.0]], [[1.0]]])

    def test_asymmetric_covariance_rejected(self):
        with pytest.raises(InvalidArgumentError):
            GaussianMixture([1.0], [[0.0, 0.0]], [[[1.0, 0.2], [0.1, 1.0]]])

    def test_eigenvalue_floor(self):
        with pytest.raises(InvalidArgumentError):
            GaussianMixture([1.0], [[0.0]], [[[1e-10]]])
        GaussianMixture([1.0], [[0.0]], [[[1e-9]]])

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            GaussianMixture([0.5, 0.5], [[0.0], [1.0, 2.0]], [[[1.0]], [[1.0]]])

    def test_ratio_field_dims(self):
        with pytest.raises(InvalidArgumentError):
            RatioField(GaussianMixture.gaussian([0.0], 1.0), GaussianMixture.gaussian([0.0, 0.0], np.eye(2)))

    def test_dict_round_trip(self, tmp_path):
        g = two_comp_2d()
        back = GaussianMixture.from_dict(g.to_dict())
        np.testing.assert_array_equal(back.means, g.means)
        np.testing.assert_array_equal(back.covs, g.covs)
        import json

        path = tmp_path / "g.json"
        path.write_text(json.dumps(g.to_dict()))
        assert GaussianMixture.from_json(path).dim == 2

    def test_malformed_dict(self):
        with pytest.raises(InvalidArgumentError):
            GaussianMixture.from_dict({"dim": 1})


class TestLogDensity:
    def test_standard_normal_at_zero(self):
        g = GaussianMixture.gaussian([0.0], 1.0)
        assert log_density(g, [0.0]) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)

    def test_symmetric_mixture(self):
        g = GaussianMixture([0.5, 0.5], [[-1.0], [1.0]], [[[1.0]], [[1.0]]])
        x = np.linspace(-4, 4, 41)[:, None]
        np.testing.assert_allclose(log_density(g, x), log_density(g, -x), rtol=0, atol=1e-14)
        # log p(0) = log N(0; 1, 1) exactly, by symmetry of the two terms
        assert log_density(g, [0.0]) == pytest.approx(-0.5 * math.log(2 * math.pi) - 0.5, abs=1e-14)

    def test_extended_precision_reference(self):
        g = two_comp_2d()
        x = [0.3, -0.7]
        mpmath.mp.dps = 40
        total = mpmath.mpf(0)
        for w, mu, cov in zip(g.weights, g.means, g.covs):
            c = mpmath.matrix(cov.tolist())
            d = mpmath.matrix([x[0] - mu[0], x[1] - mu[1]])
            q = (d.T * mpmath.inverse(c) * d)[0]
            total += mpmath.mpf(w) * mpmath.exp(-q / 2) / (2 * mpmath.pi * mpmath.sqrt(mpmath.det(c)))
        ref = float(mpmath.log(total))
        assert log_density(g, x) == pytest.approx(ref, rel=1e-13)

    @pytest.mark.parametrize("gmm", [GaussianMixture.gaussian([0.3], 0.5),
                                     GaussianMixture([0.2, 0.8], [[-2.0], [1.0]], [[[0.3]], [[1.5]]])])
    def test_normalizes_1d(self, gmm):
        grid = make_grid([(-15.0, 15.0)], 20001)
        assert grid.weights @ np.exp(log_density(gmm, grid.points)) == pytest.approx(1.0, abs=1e-4)

    def test_normalizes_2d(self):
        for gmm in (two_comp_2d(), *canonical_pair()):
            grid = make_grid([(-10.0, 10.0), (-10.0, 10.0)], 401)
            assert grid.weights @ np.exp(log_density(gmm, grid.points)) == pytest.approx(1.0, abs=1e-4)

    def test_far_tail_finite(self):
        g = two_comp_2d()
        lp = log_density(g, [[300.0, -400.0]])
        assert np.isfinite(lp).all()


class TestScore:
    def test_standard_normal(self):
        assert score(GaussianMixture.gaussian([0.0], 1.0), [2.0]) == pytest.approx([-2.0])

    def test_symmetric_center(self):
        g = GaussianMixture([0.5, 0.5], [[-1.0], [1.0]], [[[1.0]], [[1.0]]])
        assert score(g, [0.0]) == pytest.approx([0.0], abs=1e-15)

    @pytest.mark.parametrize("gmm", [two_comp_2d(), *canonical_pair()])
    def test_matches_finite_differences(self, gmm):
        rng = np.random.default_rng(3)
        x = rng.normal(scale=2.0, size=(200, 2))
        fd = fd_grad(lambda z: log_density(gmm, z), x)
        s = score(gmm, x)
        err = np.linalg.norm(s - fd, axis=1) / np.maximum(np.linalg.norm(fd, axis=1), 1e-12)
        assert err.max() <= 1e-6

    def test_shapes(self):
        g = two_comp_2d()
        assert score(g, [0.0, 0.0]).shape == (2,)
        assert score(g, np.zeros((5, 2))).shape == (5, 2)
        with pytest.raises(InvalidArgumentError):
            score(g, np.zeros((5, 3)))

    def test_diffused_evaluation_matches_explicit_mixture(self):
        g = two_comp_2d()
        m, v = 0.6, 0.5
        explicit = GaussianMixture(g.weights, m * g.means, m**2 * g.covs + v * np.eye(2))
        x = np.random.default_rng(0).normal(size=(30, 2))
        lp, s = g.evaluate(x, m, v)
        np.testing.assert_allclose(lp, explicit.log_density(x), rtol=1e-12)
        np.testing.assert_allclose(s, explicit.score(x), rtol=1e-10, atol=1e-12)


class TestSample:
    def test_mean_clt(self):
        g = GaussianMixture.gaussian([0.0, 0.0], np.eye(2))
        n = 100_000
        x = sample(g, n, np.random.default_rng(0))
        assert np.all(np.abs(x.mean(axis=0)) <= 4 / math.sqrt(n))

    def test_deterministic(self):
        g = two_comp_2d()
        a = sample(g, 50, np.random.default_rng(11))
        b = sample(g, 50, np.random.default_rng(11))
        np.testing.assert_array_equal(a, b)

    def test_component_frequencies(self):
        g = GaussianMixture([0.3, 0.7], [[-50.0], [50.0]], [[[1.0]], [[1.0]]])
        n = 20_000
        x = sample(g, n, np.random.default_rng(5))
        frac = float(np.mean(x[:, 0] < 0))
        assert abs(frac - 0.3) <= 3 * math.sqrt(0.3 * 0.7 / n)

    def test_covariance(self):
        g = two_comp_2d()
        x = sample(g, 200_000, np.random.default_rng(1))
        np.testing.assert_allclose(np.cov(x.T), g.covariance(), atol=0.03)
        np.testing.assert_allclose(x.mean(axis=0), g.mean(), atol=0.01)


class TestRatio:
    def test_identical_pair(self):
        g = two_comp_2d()
        f = RatioField(g, g)
        x = np.random.default_rng(0).normal(size=(20, 2))
        np.testing.assert_array_equal(log_ratio(f, x), 0.0)
        np.testing.assert_array_equal(ratio_gradient(f, x), 0.0)

    def test_gaussian_shift(self):
        mu = 0.7
        f = RatioField(GaussianMixture.gaussian([0.0], 1.0), GaussianMixture.gaussian([mu], 1.0))
        x = np.linspace(-3, 3, 13)[:, None]
        np.testing.assert_allclose(log_ratio(f, x), -(mu * x[:, 0] - mu**2 / 2), atol=1e-12)
        np.testing.assert_allclose(ratio_gradient(f, x), -mu, atol=1e-12)

    def test_canonical_grid_fd(self):
        p, q = canonical_pair()
        f = RatioField(p, q)
        axes = np.linspace(-4, 4, 64)
        xx, yy = np.meshgrid(axes, axes)
        x = np.column_stack([xx.ravel(), yy.ravel()])
        fd = fd_grad(lambda z: log_ratio(f, z), x)
        assert np.abs(ratio_gradient(f, x) - fd).max() <= 1e-5

    def test_antisymmetry(self):
        p, q = canonical_pair()
        x = np.random.default_rng(2).normal(scale=2, size=(50, 2))
        np.testing.assert_allclose(ratio_gradient(RatioField(p, q), x), -ratio_gradient(RatioField(q, p), x),
                                   atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(
    w=st.floats(0.05, 0.95),
    m1=st.floats(-3, 3),
    m2=st.floats(-3, 3),
    v1=st.floats(0.1, 3),
    v2=st.floats(0.1, 3),
    x=st.floats(-6, 6),
)
def test_score_fd_property_1d(w, m1, m2, v1, v2, x):
    g = GaussianMixture([w, 1 - w], [[m1], [m2]], [[[v1]], [[v2]]])
    h = 1e-5
    fd = (log_density(g, [x + h]) - log_density(g, [x - h])) / (2 * h)
    s = score(g, [x])[0]
    assert abs(s - fd) <= 1e-6 * max(1.0, abs(fd))
