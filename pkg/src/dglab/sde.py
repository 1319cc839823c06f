"""VP / subVP noise schedules, perturbation kernels and Euler-Maruyama samplers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .distributions import GaussianMixture
from .errors import DivergedSamplerError, InvalidArgumentError, SingularKernelError

ScoreFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

KINDS = ("VP", "subVP")


@dataclass(frozen=True)
class SdeSchedule:
    """Linear-beta diffusion ``dx = -beta(t) x / 2 dt + g(t) dw``.

    ``g(t)^2 = beta(t)`` for VP and ``beta(t) (1 - exp(-2 B(t)))`` for subVP,
    with ``B(t)`` the integral of beta from 0 to t.
    """

    kind: str = "subVP"
    beta_min: float = 0.1
    beta_max: float = 20.0
    T: float = 1.0
    t_min_factor: float = 1e-3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not (self.beta_min > 0 and self.beta_max >= self.beta_min and self.T > 0):
            raise InvalidArgumentError(
                f"need 0 < beta_min <= beta_max and T > 0, got "
                f"({self.beta_min}, {self.beta_max}, {self.T})"
            )
        if not 0 < self.t_min_factor < 1:
            raise InvalidArgumentError(f"t_min_factor must lie in (0, 1), got {self.t_min_factor}")

    @classmethod
    def from_dict(cls, cfg: dict) -> "SdeSchedule":
        keys = ("kind", "beta_min", "beta_max", "T", "t_min_factor")
        return cls(**{k: cfg[k] for k in keys if k in cfg})

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "beta_min": self.beta_min,
            "beta_max": self.beta_max,
            "T": self.T,
            "t_min_factor": self.t_min_factor,
        }

    @property
    def t_min(self) -> float:
        return self.t_min_factor * self.T

    def _check_time(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t > self.T * (1 + 1e-12)) or not np.all(np.isfinite(t)):
            raise InvalidArgumentError(f"t must lie in [0, {self.T}]")
        return t

    def beta(self, t):
        return self.beta_min + np.asarray(t) * (self.beta_max - self.beta_min) / self.T

    def beta_integral(self, t):
        t = np.asarray(t, dtype=float)
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t**2 / self.T

    def mean_scale(self, t):
        return np.exp(-0.5 * self.beta_integral(self._check_time(t)))

    def variance(self, t):
        one_minus = -np.expm1(-self.beta_integral(self._check_time(t)))
        return one_minus if self.kind == "VP" else one_minus**2

    def std(self, t):
        return np.sqrt(self.variance(t))

    def g2(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "VP":
            return self.beta(t)
        return self.beta(t) * -np.expm1(-2.0 * self.beta_integral(t))

    def drift(self, x, t):
        return -0.5 * np.asarray(self.beta(t))[..., None] * x

    def kernel_at(self, t) -> "PerturbationKernel":
        t = float(self._check_time(t))
        return PerturbationKernel(float(self.mean_scale(t)), float(self.std(t)))


@dataclass(frozen=True)
class PerturbationKernel:
    """Law of ``x_t`` given ``x_0``: ``N(mean_scale * x_0, std^2 I)``."""

    mean_scale: float
    std: float


def kernel_at(schedule: SdeSchedule, t: float) -> PerturbationKernel:
    return schedule.kernel_at(t)


def kernel_score(kernel: PerturbationKernel, x0, xt):
    """Gradient in ``xt`` of the log perturbation kernel, ``-(xt - m x0) / s^2``."""
    if kernel.std <= 0:
        raise SingularKernelError("kernel standard deviation is zero; respect t_min")
    return -(np.asarray(xt) - kernel.mean_scale * np.asarray(x0)) / kernel.std**2


def batch_kernel_score(schedule: SdeSchedule, x0, xt, t):
    """Per-row kernel score for batches whose rows carry their own time ``t``."""
    m = schedule.mean_scale(t)
    var = schedule.variance(t)
    if np.any(var <= 0):
        raise SingularKernelError("kernel standard deviation is zero; respect t_min")
    return -(xt - m[:, None] * x0) / var[:, None]


def diffuse(gmm: GaussianMixture, schedule: SdeSchedule, t: float) -> GaussianMixture:
    """Closed-form marginal ``p_t``: component i becomes ``(w_i, m mu_i, m^2 S_i + s^2 I)``."""
    k = schedule.kernel_at(t)
    eye = np.eye(gmm.dim)
    covs = k.mean_scale**2 * gmm.covs + k.std**2 * eye
    return GaussianMixture(gmm.weights, k.mean_scale * gmm.means, covs)


def marginal(gmm: GaussianMixture, schedule: SdeSchedule, x, t):
    """Log-density and score of ``p_t`` at points ``x`` with per-row times ``t``."""
    return gmm.evaluate(x, schedule.mean_scale(t), schedule.variance(t))


class DiffusedScore:
    """Exact score of a diffused mixture, usable as a ``score_fn(x, t)``."""

    def __init__(self, gmm: GaussianMixture, schedule: SdeSchedule):
        self.gmm = gmm
        self.schedule = schedule

    def __call__(self, x, t):
        return marginal(self.gmm, self.schedule, x, t)[1]


def forward_sample_path(x0, schedule: SdeSchedule, t, rng: np.random.Generator):
    """Exact one-shot draw ``x_t = m(t) x_0 + s(t) xi`` (no path integration)."""
    x0 = np.asarray(x0, dtype=float)
    t = schedule._check_time(t)
    m = schedule.mean_scale(t)
    s = schedule.std(t)
    xi = rng.standard_normal(x0.shape)
    if np.ndim(t) == 0:
        return m * x0 + s * xi
    return m[:, None] * x0 + s[:, None] * xi


def simulate_forward(x0, schedule: SdeSchedule, t_end: float, n_steps: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Euler-Maruyama integration of the forward SDE from 0 to ``t_end``."""
    x = np.array(x0, dtype=float)
    h = t_end / n_steps
    for k in range(n_steps):
        t = k * h
        x = x + schedule.drift(x, t) * h + np.sqrt(schedule.g2(t) * h) * rng.standard_normal(x.shape)
    return x


def reverse_sample(
    score_fn: ScoreFn,
    schedule: SdeSchedule,
    n_steps: int,
    n_samples: int,
    rng: np.random.Generator,
    *,
    dim: int,
    x_T: np.ndarray | None = None,
) -> np.ndarray:
    """Integrate the reverse SDE from ``T`` down to ``t_min`` on a uniform grid.

    ``score_fn(x, t)`` receives ``x`` of shape ``(n, d)`` and ``t`` of shape
    ``(n,)``. The chain starts from ``N(0, I)`` unless ``x_T`` is given.
    """
    if n_steps < 1:
        raise InvalidArgumentError(f"n_steps must be >= 1, got {n_steps}")
    x = rng.standard_normal((n_samples, dim)) if x_T is None else np.array(x_T, dtype=float)
    h = (schedule.T - schedule.t_min) / n_steps
    for k in range(n_steps):
        t = schedule.T - k * h
        tt = np.full(n_samples, t)
        s = score_fn(x, tt)
        if not np.all(np.isfinite(s)):
            raise DivergedSamplerError(k)
        g2 = float(schedule.g2(t))
        x = x - (schedule.drift(x, t) - g2 * s) * h + np.sqrt(g2 * h) * rng.standard_normal(x.shape)
    if not np.all(np.isfinite(x)):
        raise DivergedSamplerError(n_steps - 1, "sampler state became non-finite")
    return x


def prior_log_density(x) -> np.ndarray:
    """Log-density of the reference ``Q = N(0, I)``."""
    x = np.atleast_2d(x)
    return -0.5 * (x.shape[1] * np.log(2 * np.pi) + np.sum(x**2, axis=1))
