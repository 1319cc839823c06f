"""Discriminator training losses, quadrature references and KL estimators.

The batch losses (:func:`ce_loss`, :func:`mse_d_loss`, :func:`train_loss`)
are written once over "array-like" inputs so the trainer can call the same
arithmetic on torch tensors (:func:`ce_core`, :func:`mse_core`).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from scipy.special import ndtri
from scipy.stats import qmc

from .distributions import GaussianMixture
from .errors import DivergedLossError, InsufficientCoverageError, InvalidArgumentError
from .sde import SdeSchedule, batch_kernel_score, diffuse, marginal, prior_log_density

ScoreFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

LAMBDA_KINDS = ("g_squared", "uniform")
GAMMA_TARGETS = ("ce", "mse")


@dataclass(frozen=True)
class LossConfig:
    """Loss weighting.

    ``gamma_on="ce"`` gives ``L_MSE + gamma L_CE``; ``gamma_on="mse"`` gives
    ``L_CE + gamma L_MSE`` (so ``gamma=0`` there is plain cross-entropy
    training). ``t_min=None`` defers to the schedule's cutoff.
    """

    lambda_kind: str = "g_squared"
    gamma: float = 0.1
    gamma_on: str = "ce"
    t_min: float | None = None
    timestep_distribution: str = "uniform"

    def __post_init__(self):
        if self.lambda_kind not in LAMBDA_KINDS:
            raise InvalidArgumentError(f"lambda_kind must be one of {LAMBDA_KINDS}")
        if self.gamma_on not in GAMMA_TARGETS:
            raise InvalidArgumentError(f"gamma_on must be one of {GAMMA_TARGETS}")
        if not (np.isfinite(self.gamma) and self.gamma >= 0):
            raise InvalidArgumentError(f"gamma must be finite and >= 0, got {self.gamma}")
        if self.timestep_distribution != "uniform":
            raise InvalidArgumentError("only the uniform timestep distribution is supported")

    @classmethod
    def from_dict(cls, cfg: dict) -> "LossConfig":
        keys = ("lambda_kind", "gamma", "gamma_on", "t_min", "timestep_distribution")
        return cls(**{k: cfg[k] for k in keys if k in cfg})

    def to_dict(self) -> dict:
        return {
            "lambda_kind": self.lambda_kind,
            "gamma": self.gamma,
            "gamma_on": self.gamma_on,
            "t_min": self.t_min,
            "timestep_distribution": self.timestep_distribution,
        }

    def weights(self) -> tuple[float, float]:
        """``(ce_weight, mse_weight)`` of the combined objective."""
        if self.gamma_on == "ce":
            return self.gamma, 1.0
        return 1.0, self.gamma

    def t_lo(self, schedule: SdeSchedule) -> float:
        t_min = schedule.t_min if self.t_min is None else float(self.t_min)
        if not 0 < t_min < schedule.T:
            raise InvalidArgumentError(f"t_min must lie in (0, T), got {t_min}")
        return t_min

    def lam(self, schedule: SdeSchedule, t):
        t = np.asarray(t, dtype=float)
        if self.lambda_kind == "g_squared":
            return schedule.g2(t)
        return np.ones_like(t)

    def sample_times(self, schedule: SdeSchedule, n: int, rng: np.random.Generator):
        return rng.uniform(self.t_lo(schedule), schedule.T, size=n)


@dataclass
class Batch:
    """Perturbed mini-batch: rows of ``x0`` diffused to their own time ``t`` give ``xt``."""

    x0: np.ndarray
    t: np.ndarray
    xt: np.ndarray


def perturb(x0, t, schedule: SdeSchedule, rng: np.random.Generator) -> Batch:
    x0 = np.asarray(x0, dtype=float)
    t = np.asarray(t, dtype=float)
    m = schedule.mean_scale(t)
    s = schedule.std(t)
    xt = m[:, None] * x0 + s[:, None] * rng.standard_normal(x0.shape)
    return Batch(x0, t, xt)


def _softplus(z):
    if isinstance(z, torch.Tensor):
        return torch.nn.functional.softplus(z)
    return np.logaddexp(0.0, z)


def ce_core(d_real, d_fake, lam_real, lam_fake):
    """``mean(lam [-log sigmoid(d_real)]) + mean(lam [-log(1 - sigmoid(d_fake))])``."""
    return (lam_real * _softplus(-d_real)).mean() + (lam_fake * _softplus(d_fake)).mean()


def mse_core(target, grad, lam):
    """``mean(lam ||target - grad||^2)`` with target = kernel score - s_theta."""
    return (lam * ((target - grad) ** 2).sum(-1)).mean()


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DivergedLossError("discriminator produced non-finite output")


def ce_loss(disc, real: Batch, fake: Batch, schedule: SdeSchedule, cfg: LossConfig) -> float:
    if len(real.t) == 0 or len(fake.t) == 0:
        raise InvalidArgumentError("batches must be nonempty")
    d_real = disc.value(real.xt, real.t)
    d_fake = disc.value(fake.xt, fake.t)
    _check_finite(d_real, d_fake)
    return float(ce_core(d_real, d_fake, cfg.lam(schedule, real.t), cfg.lam(schedule, fake.t)))


def mse_target(s_theta: ScoreFn, batch: Batch, schedule: SdeSchedule) -> np.ndarray:
    """``grad log p_t(xt | x0) - s_theta(xt, t)`` for each row."""
    return batch_kernel_score(schedule, batch.x0, batch.xt, batch.t) - s_theta(batch.xt, batch.t)


def mse_d_loss(disc, s_theta: ScoreFn, batch: Batch, schedule: SdeSchedule, cfg: LossConfig) -> float:
    grad = disc.input_gradient(batch.xt, batch.t)
    _check_finite(grad)
    target = mse_target(s_theta, batch, schedule)
    return float(mse_core(target, grad, cfg.lam(schedule, batch.t)))


def train_loss(disc, s_theta: ScoreFn, real: Batch, fake: Batch, schedule: SdeSchedule,
               cfg: LossConfig) -> float:
    w_ce, w_mse = cfg.weights()
    total = 0.0
    if w_mse:
        total += w_mse * mse_d_loss(disc, s_theta, real, schedule, cfg)
    if w_ce:
        total += w_ce * ce_loss(disc, real, fake, schedule, cfg)
    return total


# -- quadrature ----------------------------------------------------------------


@dataclass
class QuadratureGrid:
    """Tensor-product trapezoid grid; ``points`` are row-major with x fastest."""

    axes: list[np.ndarray]
    points: np.ndarray
    weights: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(a) for a in reversed(self.axes))


def make_grid(box, resolution: int) -> QuadratureGrid:
    axes = [np.linspace(lo, hi, resolution) for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="xy")
    points = np.stack([m.ravel() for m in mesh], axis=1)
    w_axes = []
    for a in axes:
        w = np.full(len(a), a[1] - a[0])
        w[[0, -1]] *= 0.5
        w_axes.append(w)
    wmesh = np.meshgrid(*w_axes, indexing="xy")
    weights = np.prod(np.stack([w.ravel() for w in wmesh], axis=1), axis=1)
    return QuadratureGrid(axes, points, weights)


def covering_box(mixtures, half_width: float = 9.0):
    """Axis-aligned box reaching ``half_width`` standard deviations past every component."""
    lo, hi = None, None
    for g in mixtures:
        sd = np.sqrt(np.max(np.diagonal(g.covs, axis1=1, axis2=2), axis=0))
        mlo = g.means.min(axis=0) - half_width * sd
        mhi = g.means.max(axis=0) + half_width * sd
        lo = mlo if lo is None else np.minimum(lo, mlo)
        hi = mhi if hi is None else np.maximum(hi, mhi)
    return list(zip(lo, hi))


def _default_resolution(dim: int) -> int:
    if dim == 1:
        return 8001
    if dim == 2:
        return 241
    raise InvalidArgumentError("quadrature references support dim <= 2")


def _expect(grid: QuadratureGrid, logp: np.ndarray, values: np.ndarray, tol: float = 1e-6):
    dens = np.exp(logp) * grid.weights
    mass = dens.sum()
    if mass < 1.0 - tol:
        raise InsufficientCoverageError(f"quadrature grid holds only {mass:.8f} of the mass")
    return float(dens @ values)


def _pair_at(p, phat, schedule, t):
    if schedule is None or t == 0:
        return p, phat
    return diffuse(p, schedule, t), diffuse(phat, schedule, t)


def gradient_error_at(disc, p: GaussianMixture, phat: GaussianMixture, schedule: SdeSchedule | None,
                      t: float, *, resolution: int | None = None) -> float:
    """``E_{P_t} ||grad log(p_t / p_hat_t) - grad d(., t)||^2`` by quadrature."""
    pt, qt = _pair_at(p, phat, schedule, t)
    grid = make_grid(covering_box([pt]), resolution or _default_resolution(p.dim))
    lp, sp = pt.evaluate(grid.points)
    sq = qt.score(grid.points)
    err = np.sum((sp - sq - disc.input_gradient(grid.points, t)) ** 2, axis=1)
    return _expect(grid, lp, err)


def ce_at(disc, p: GaussianMixture, phat: GaussianMixture, schedule: SdeSchedule | None, t: float,
          *, resolution: int | None = None) -> float:
    """Cross-entropy ``E_P[-log s(d)] + E_Phat[-log(1 - s(d))]`` at a fixed time by quadrature."""
    pt, qt = _pair_at(p, phat, schedule, t)
    grid = make_grid(covering_box([pt, qt]), resolution or _default_resolution(p.dim))
    d = disc.value(grid.points, t)
    _check_finite(d)
    return _expect(grid, pt.log_density(grid.points), _softplus(-d)) + _expect(
        grid, qt.log_density(grid.points), _softplus(d)
    )


def trapezoid_weights(times) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    h = np.diff(times)
    w = np.zeros_like(times)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


def default_times(schedule: SdeSchedule, cfg: LossConfig, n_t: int = 64) -> np.ndarray:
    if n_t < 2:
        raise InvalidArgumentError("need at least two time nodes")
    return np.linspace(cfg.t_lo(schedule), schedule.T, n_t)


def sm_d_loss_quadrature(disc, p: GaussianMixture, phat: GaussianMixture, schedule: SdeSchedule,
                         cfg: LossConfig, *, times=None, n_t: int = 64,
                         resolution: int | None = None) -> float:
    """``int lambda(t) E_{P_t} ||grad log(p_t/p_hat_t) - grad d||^2 dt``; trapezoid in time."""
    times = default_times(schedule, cfg, n_t) if times is None else np.asarray(times, dtype=float)
    vals = np.array([gradient_error_at(disc, p, phat, schedule, t, resolution=resolution)
                     for t in times])
    return float(np.sum(trapezoid_weights(times) * cfg.lam(schedule, times) * vals))


def _node_draws(p: GaussianMixture, n: int, rng: np.random.Generator, sampler: str, n_rep: int):
    """``n_rep`` groups of ``(x0, xi)`` pairs; plain draws or independently scrambled Sobol sets."""
    if sampler == "mc":
        size = max(1, n // n_rep)
        return [(p.sample(size, rng), rng.standard_normal((size, p.dim))) for _ in range(n_rep)]
    m = max(1, int(np.ceil(np.log2(max(n / n_rep, 2)))))
    out = []
    for _ in range(n_rep):
        u = qmc.Sobol(1 + 2 * p.dim, scramble=True, seed=rng).random_base2(m)
        out.append((p.from_uniform(u[:, :1 + p.dim]), ndtri(u[:, 1 + p.dim:])))
    return out


def mse_d_loss_expected(disc, p: GaussianMixture, s_theta: ScoreFn, schedule: SdeSchedule,
                        cfg: LossConfig, rng: np.random.Generator, *, times=None, n_t: int = 64,
                        n_draws: int = 1_000_000, antithetic: bool = True, sampler: str = "mc",
                        n_replicates: int = 32) -> tuple[float, float]:
    """Monte-Carlo expectation of the gradient-matching loss, trapezoid in time.

    ``n_draws`` is split evenly across the time nodes. Antithetic pairs
    ``m x0 +/- s xi`` cancel the ``1/s`` part of the kernel score, which keeps
    the estimator's variance bounded as ``t -> t_min``. ``sampler="rqmc"``
    replaces the draws by ``n_replicates`` independently scrambled Sobol sets
    per node (randomised quasi-Monte Carlo); the standard error then comes
    from the spread of the replicate means.

    Returns:
        ``(estimate, standard_error)``.
    """
    if sampler not in ("mc", "rqmc"):
        raise InvalidArgumentError(f"sampler must be 'mc' or 'rqmc', got {sampler!r}")
    times = default_times(schedule, cfg, n_t) if times is None else np.asarray(times, dtype=float)
    per_t = max(2, n_draws // len(times))
    half = per_t // 2 if antithetic else per_t
    n_rep = n_replicates if sampler == "rqmc" else 1
    wts = trapezoid_weights(times) * cfg.lam(schedule, times)
    signs = (1.0, -1.0) if antithetic else (1.0,)
    est, var = 0.0, 0.0
    for t, wt in zip(times, wts):
        m, s = float(schedule.mean_scale(t)), float(schedule.std(t))
        rep_means, rep_vals = [], []
        for x0, xi in _node_draws(p, half, rng, sampler, n_rep):
            tt = np.full(len(x0), t)
            terms = []
            for sign in signs:
                batch = Batch(x0, tt, m * x0 + sign * s * xi)
                target = mse_target(s_theta, batch, schedule)
                grad = disc.input_gradient(batch.xt, tt)
                terms.append(np.sum((target - grad) ** 2, axis=1))
            vals = np.mean(terms, axis=0)
            rep_means.append(vals.mean())
            rep_vals.append(vals)
        est += wt * float(np.mean(rep_means))
        if n_rep > 1:
            var += wt**2 * float(np.var(rep_means, ddof=1)) / n_rep
        else:
            var += wt**2 * rep_vals[0].var(ddof=1) / len(rep_vals[0])
    return float(est), float(np.sqrt(var))


# -- KL functionals ------------------------------------------------------------


@dataclass(frozen=True)
class KLEstimate:
    value: float
    se: float
    prior_term: float
    prior_se: float


def _kl_estimate(p: GaussianMixture, score_fn: ScoreFn, schedule: SdeSchedule, mc: int,
                 rng: np.random.Generator, n_t: int) -> KLEstimate:
    t_lo = schedule.t_min
    times = np.linspace(t_lo, schedule.T, n_t)
    wts = trapezoid_weights(times)
    x_T = diffuse(p, schedule, schedule.T)
    xs = x_T.sample(mc, rng)
    log_ratio = x_T.log_density(xs) - prior_log_density(xs)
    prior, prior_se = log_ratio.mean(), log_ratio.std(ddof=1) / np.sqrt(mc)
    est, var = prior, prior_se**2
    for t, wt in zip(times, wts):
        tt = np.full(mc, t)
        x = p.sample(mc, rng)
        m, s = float(schedule.mean_scale(t)), float(schedule.std(t))
        x = m * x + s * rng.standard_normal(x.shape)
        true_score = marginal(p, schedule, x, tt)[1]
        vals = 0.5 * float(schedule.g2(t)) * np.sum((true_score - score_fn(x, tt)) ** 2, axis=1)
        est += wt * vals.mean()
        var += wt**2 * vals.var(ddof=1) / mc
    return KLEstimate(float(est), float(np.sqrt(var)), float(prior), float(prior_se))


def kl_learned(p: GaussianMixture, s_theta: ScoreFn, schedule: SdeSchedule, mc: int,
               rng: np.random.Generator, *, n_t: int = 201) -> KLEstimate:
    """``KL(P_T || Q) + 1/2 int g^2 E_{P_t} ||grad log p_t - s_theta||^2 dt``.

    The prior term and each time node are Monte-Carlo averages over ``mc``
    fresh draws; time is integrated with the trapezoid rule on ``[t_min, T]``.
    """
    return _kl_estimate(p, s_theta, schedule, mc, rng, n_t)


def refined_score(s_theta: ScoreFn, disc, w: float) -> ScoreFn:
    """``s_theta + w grad d``; returns ``s_theta`` itself when ``w == 0``."""
    if w == 0:
        return s_theta

    def score(x, t):
        return s_theta(x, t) + w * disc.input_gradient(x, t)

    return score


def kl_refined(p: GaussianMixture, s_theta: ScoreFn, disc, w: float, schedule: SdeSchedule, mc: int,
               rng: np.random.Generator, *, n_t: int = 201) -> KLEstimate:
    """Same estimator as :func:`kl_learned` with the guided score ``s_theta + w grad d``."""
    return _kl_estimate(p, refined_score(s_theta, disc, w), schedule, mc, rng, n_t)


# -- gradient fields -----------------------------------------------------------


@dataclass
class GradientField:
    axes: list[np.ndarray]
    times: np.ndarray
    error: np.ndarray  # (n_times, *grid.shape)
    weighted_mean: np.ndarray  # (n_times,)

    def overall(self) -> float:
        return float(np.mean(self.weighted_mean))


def gradient_field_mse(disc, p: GaussianMixture, phat: GaussianMixture, schedule: SdeSchedule, box,
                       resolution: int, t_set) -> GradientField:
    """Pointwise ``||grad log(p_t/p_hat_t) - grad d||^2`` on a grid, plus its ``P_t``-weighted mean."""
    if p.dim > 2:
        raise InvalidArgumentError("gradient fields are only emitted for dim <= 2")
    grid = make_grid(box, resolution)
    errs, means = [], []
    for t in t_set:
        tt = np.full(len(grid.points), float(t))
        lp, sp = marginal(p, schedule, grid.points, tt)
        sq = marginal(phat, schedule, grid.points, tt)[1]
        err = np.sum((sp - sq - disc.input_gradient(grid.points, tt)) ** 2, axis=1)
        dens = np.exp(lp) * grid.weights
        errs.append(err.reshape(grid.shape))
        means.append(float(dens @ err / dens.sum()))
    return GradientField(grid.axes, np.asarray(t_set, dtype=float), np.stack(errs), np.array(means))
