import numpy as np
import pytest
import torch

from dglab.discriminator import (
    ConstantDiscriminator,
    MlpDiscriminator,
    OptimalDiscriminator,
    OscillatoryDiscriminator,
    build_oscillatory,
    d_input_gradient,
    d_value,
    loss_param_gradient,
    mlp_param_count,
)
from dglab.distributions import GaussianMixture, RatioField, canonical_pair
from dglab.errors import (
    ConstructionInfeasibleError,
    ConstructionViolatedError,
    InvalidArgumentError,
    UnsupportedArchitectureError,
)
from dglab.objectives import ce_at, gradient_error_at
from dglab.sde import SdeSchedule

SCHED = SdeSchedule()


def gauss_field(mu=0.5, var=1.0):
    return RatioField(GaussianMixture.gaussian([0.0], 1.0), GaussianMixture.gaussian([mu], var))


def randomized_mlp(dim=2, widths=(16, 16), activation="tanh", seed=0, scale=0.5):
    disc = MlpDiscriminator(dim, widths, activation, seed=seed)
    rng = np.random.default_rng(seed + 100)
    disc.set_params(scale * rng.standard_normal(disc.n_params))
    return disc


def fd_input_gradient(disc, x, t, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[i] = h
        g[:, i] = (disc.value(x + e, t) - disc.value(x - e, t)) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-8):
    return float(np.max(np.linalg.norm(a - b, axis=1) / np.maximum(np.linalg.norm(b, axis=1), floor)))


class TestMlp:
    def test_param_count(self):
        d = MlpDiscriminator(2, (64, 64))
        assert d.n_params == mlp_param_count(3, (64, 64)) == 3 * 64 + 64 + 64 * 64 + 64 + 64 + 1

    def test_zero_output_layer_is_constant(self):
        d = MlpDiscriminator(2, (8,), seed=3)
        with torch.no_grad():
            d.biases[-1].fill_(0.7)
        x = np.random.default_rng(0).normal(size=(10, 2))
        np.testing.assert_array_equal(d.value(x, 0.4), 0.7)
        np.testing.assert_array_equal(d.input_gradient(x, 0.4), 0.0)

    def test_invalid(self):
        with pytest.raises(InvalidArgumentError):
            MlpDiscriminator(1, (8,), activation="gelu")
        with pytest.raises(InvalidArgumentError):
            MlpDiscriminator(1, (0,))
        with pytest.raises(InvalidArgumentError):
            MlpDiscriminator(1, (4,)).set_params(np.zeros(3))

    @pytest.mark.parametrize("activation", ["tanh", "softplus", "sigmoid"])
    def test_input_gradient_fd(self, activation):
        disc = randomized_mlp(activation=activation)
        rng = np.random.default_rng(1)
        x = rng.normal(scale=2, size=(100, 2))
        t = rng.uniform(SCHED.t_min, 1, 100)
        assert max_rel_err(disc.input_gradient(x, t), fd_input_gradient(disc, x, t)) <= 1e-5

    def test_deterministic_init_and_copy(self):
        a = MlpDiscriminator(2, (8, 8), seed=4)
        b = MlpDiscriminator(2, (8, 8), seed=4)
        np.testing.assert_array_equal(a.get_params(), b.get_params())
        c = a.copy()
        np.testing.assert_array_equal(c.get_params(), a.get_params())

    def test_thread_count_invariance(self):
        disc = randomized_mlp()
        x = np.random.default_rng(2).normal(size=(257, 2))
        before = torch.get_num_threads()
        try:
            torch.set_num_threads(1)
            a = disc.value(x, 0.3)
            torch.set_num_threads(max(2, before))
            b = disc.value(x, 0.3)
        finally:
            torch.set_num_threads(before)
        np.testing.assert_array_equal(a, b)

    def test_checkpoint_round_trip(self, tmp_path):
        disc = randomized_mlp()
        path = tmp_path / "d.ckpt"
        disc.save(path)
        back = MlpDiscriminator.load(path)
        np.testing.assert_array_equal(back.get_params(), disc.get_params())
        assert back.hidden_widths == disc.hidden_widths

    def test_checkpoint_requires_version(self, tmp_path):
        disc = MlpDiscriminator(1, (4,))
        path = tmp_path / "d.ckpt"
        disc.save(path)
        head, _, blob = path.read_bytes().partition(b"\n")
        import json

        h = json.loads(head)
        del h["version"]
        path.write_bytes(json.dumps(h).encode() + b"\n" + blob)
        with pytest.raises(InvalidArgumentError, match="version"):
            MlpDiscriminator.load(path)


class TestAnalytic:
    def test_optimal_identical_pair_is_zero(self):
        p, _ = canonical_pair()
        d = OptimalDiscriminator(RatioField(p, p), SCHED)
        x = np.random.default_rng(0).normal(size=(20, 2))
        np.testing.assert_array_equal(d_value(d, x, 0.3), 0.0)

    def test_oscillatory_zero_omega_is_optimal(self):
        p, q = canonical_pair()
        f = RatioField(p, q)
        x = np.random.default_rng(0).normal(size=(20, 2))
        osc = OscillatoryDiscriminator(f, 0.01, 0.0, schedule=SCHED)
        opt = OptimalDiscriminator(f, SCHED)
        np.testing.assert_allclose(osc.value(x, 0.2), opt.value(x, 0.2), atol=1e-15)
        np.testing.assert_allclose(osc.input_gradient(x, 0.2), opt.input_gradient(x, 0.2), atol=1e-15)

    def test_optimal_gradient_is_ratio_gradient_of_diffused_pair(self):
        from dglab.sde import diffuse

        p, q = canonical_pair()
        x = np.random.default_rng(5).normal(size=(30, 2))
        t = 0.25
        ref = RatioField(diffuse(p, SCHED, t), diffuse(q, SCHED, t)).ratio_gradient(x)
        np.testing.assert_allclose(d_input_gradient(OptimalDiscriminator(RatioField(p, q), SCHED), x, t),
                                   ref, rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("omega", [1.0, 10.0, 100.0])
    def test_oscillatory_gradient_fd_1d(self, omega):
        disc = build_oscillatory(gauss_field(0.5, 0.64), 0.01, omega, [(-6, 6)])
        x = np.linspace(-4, 4, 100)[:, None] + 1e-3
        assert max_rel_err(disc.input_gradient(x, 0.0), fd_input_gradient(disc, x, 0.0, h=1e-7)) <= 1e-5

    def test_oscillatory_gradient_fd_2d_diffused(self):
        p, q = canonical_pair()
        disc = OscillatoryDiscriminator(RatioField(p, q), 1e-3, 7.0, direction=[1.0, 2.0], schedule=SCHED)
        rng = np.random.default_rng(3)
        x = rng.normal(scale=1.5, size=(100, 2))
        t = rng.uniform(0.01, 1, 100)
        assert max_rel_err(disc.input_gradient(x, t), fd_input_gradient(disc, x, t)) <= 1e-5

    def test_oscillatory_sup_bound(self):
        f = gauss_field(0.5, 0.64)
        eps = 0.01
        disc = build_oscillatory(f, eps, 30.0, [(-6, 6)])
        x = np.linspace(-6, 6, 20001)[:, None]
        ell = f.log_ratio(x)
        inf_r = np.exp(ell).min()
        diff = disc.value(x, 0.0) - ell
        a = np.sqrt(eps / inf_r)
        # upward deviations obey log(1 + a); downward ones the larger -log(1 - a)
        assert diff.max() <= np.log1p(a) + 1e-12
        assert np.abs(diff).max() <= -np.log1p(-a) + 1e-12

    def test_oscillatory_converges_as_eps_shrinks(self):
        f = gauss_field(0.5, 0.64)
        x = np.linspace(-6, 6, 2001)[:, None]
        gaps = [np.abs(build_oscillatory(f, e, 10.0, [(-6, 6)]).value(x, 0.0) - f.log_ratio(x)).max()
                for e in (1e-2, 1e-4, 1e-6)]
        assert gaps[0] > gaps[1] > gaps[2]
        assert gaps[2] < 2e-3

    def test_ce_gap_bounded_at_omega_5(self):
        f = gauss_field(0.5, 0.64)
        opt = OptimalDiscriminator(f)
        osc = build_oscillatory(f, 0.01, 5.0, [(-6, 6)])
        p, q = f.numerator, f.denominator
        gap = ce_at(osc, p, q, None, 0.0) - ce_at(opt, p, q, None, 0.0)
        assert 0 <= gap <= 0.01

    def test_gradient_error_grows_with_omega(self):
        f = gauss_field(0.5, 0.64)
        p, q = f.numerator, f.denominator
        errs = [gradient_error_at(build_oscillatory(f, 0.01, w, [(-6, 6)]), p, q, None, 0.0)
                for w in (1.0, 100.0)]
        assert errs[1] >= 10 * errs[0]

    def test_infeasible_eps(self):
        # ratio of N(0,1) to N(2,1) vanishes in the left tail
        f = gauss_field(2.0, 1.0)
        with pytest.raises(ConstructionInfeasibleError) as info:
            build_oscillatory(f, 0.01, 5.0, [(-6, 6)])
        assert info.value.value <= 0.01

    def test_violation_outside_checked_region(self):
        f = gauss_field(2.0, 1.0)
        disc = OscillatoryDiscriminator(f, 0.5, 1.0)
        # sin(omega x) = -1 at x = 3 pi / 2 where r is tiny
        with pytest.raises(ConstructionViolatedError):
            disc.value(np.array([[3 * np.pi / 2]]), 0.0)

    def test_constant(self):
        d = ConstantDiscriminator(2, 1.5)
        assert d.value(np.zeros((3, 2)), 0.1).tolist() == [1.5] * 3
        assert np.all(d.input_gradient(np.zeros((3, 2)), 0.1) == 0)


class TestParamGradient:
    def test_dead_paths(self):
        disc = MlpDiscriminator(2, (8, 8), seed=1)
        with torch.no_grad():
            for prm in disc.parameters():
                prm.zero_()
        x = torch.from_numpy(np.random.default_rng(0).normal(size=(16, 2)))
        t = torch.full((16,), 0.5, dtype=torch.float64)
        _, g = loss_param_gradient(disc, lambda d: d.forward(x, t).mean())
        nz = np.flatnonzero(g)
        assert nz.tolist() == [disc.n_params - 1]
        assert g[-1] == pytest.approx(1.0)

    def _fd_param(self, disc, loss_fn, direction, h=1e-6):
        base = disc.get_params()
        disc.set_params(base + h * direction)
        up = float(loss_fn(disc).detach())
        disc.set_params(base - h * direction)
        down = float(loss_fn(disc).detach())
        disc.set_params(base)
        return (up - down) / (2 * h)

    def test_input_gradient_norm_loss(self):
        disc = randomized_mlp(widths=(6, 5))
        x = torch.tensor([[0.3, -0.8]], dtype=torch.float64)
        t = torch.tensor([0.4], dtype=torch.float64)

        def loss_fn(d):
            _, g = d.value_and_input_gradient(x, t, create_graph=True)
            return (g**2).sum()

        _, grad = loss_param_gradient(disc, loss_fn)
        fd = np.array([self._fd_param(disc, loss_fn, e) for e in np.eye(disc.n_params)])
        rel = np.linalg.norm(grad - fd) / np.linalg.norm(fd)
        assert rel <= 1e-3

    def test_gradient_matching_batch_directional(self):
        from dglab.objectives import LossConfig, mse_core, mse_target, perturb
        from dglab.sde import DiffusedScore

        p, q = canonical_pair()
        rng = np.random.default_rng(0)
        batch = perturb(p.sample(64, rng), rng.uniform(0.01, 1, 64), SCHED, rng)
        target = torch.from_numpy(mse_target(DiffusedScore(q, SCHED), batch, SCHED))
        lam = torch.from_numpy(LossConfig().lam(SCHED, batch.t))
        xt, tt = torch.from_numpy(batch.xt), torch.from_numpy(batch.t)

        def loss_fn(d):
            _, g = d.value_and_input_gradient(xt, tt, create_graph=True)
            return mse_core(target, g, lam)

        disc = randomized_mlp()
        _, grad = loss_param_gradient(disc, loss_fn)
        for k in range(3):
            v = np.random.default_rng(10 + k).standard_normal(disc.n_params)
            fd = self._fd_param(disc, loss_fn, v)
            assert abs(grad @ v - fd) <= 1e-3 * abs(fd)

    def test_relu_rejected(self):
        disc = MlpDiscriminator(1, (4,), activation="relu")
        with pytest.raises(UnsupportedArchitectureError):
            loss_param_gradient(disc, lambda d: d.forward(torch.zeros(1, 1, dtype=torch.float64),
                                                           torch.zeros(1, dtype=torch.float64)).sum())
