"""Gaussian mixtures with exact log-densities, scores and density ratios.

Every evaluation routine accepts either a single point of shape ``(d,)`` or a
batch of shape ``(n, d)`` and returns correspondingly shaped results.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtri
from scipy.special import logsumexp

from .errors import InvalidArgumentError

MIN_EIGENVALUE = 1e-9
_LOG_2PI = np.log(2.0 * np.pi)


def _as_batch(x, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise InvalidArgumentError(
            f"expected points of dimension {dim}, got array of shape {np.shape(x)}"
        )
    return x, single


class GaussianMixture:
    """Finite mixture of full-covariance Gaussians.

    Args:
        weights: Mixing weights, shape ``(K,)``; positive and summing to one.
        means: Component means, shape ``(K, d)``.
        covs: Component covariances, shape ``(K, d, d)``; symmetric with
            eigenvalues at least ``1e-9``.
    """

    def __init__(self, weights, means, covs):
        try:
            weights = np.atleast_1d(np.asarray(weights, dtype=float))
            means = np.asarray(means, dtype=float)
            covs = np.asarray(covs, dtype=float)
        except ValueError as exc:
            raise InvalidArgumentError(f"ragged mixture parameters: {exc}") from exc
        if means.ndim == 1:
            means = means[:, None]
        if covs.ndim == 1:
            covs = covs[:, None, None]
        k, dim = means.shape
        if weights.shape != (k,) or covs.shape != (k, dim, dim):
            raise InvalidArgumentError(
                f"inconsistent shapes: weights {weights.shape}, means {means.shape}, "
                f"covs {covs.shape}"
            )
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise InvalidArgumentError(f"weights must be positive and sum to 1: {weights}")
        if not np.allclose(covs, np.swapaxes(covs, 1, 2), rtol=0.0, atol=1e-12):
            raise InvalidArgumentError("covariances must be symmetric")
        covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
        evals, evecs = np.linalg.eigh(covs)
        if evals.min() < MIN_EIGENVALUE:
            raise InvalidArgumentError(
                f"covariance minimum eigenvalue {evals.min():.3e} below {MIN_EIGENVALUE}"
            )
        self.weights = weights
        self.means = means
        self.covs = covs
        self._log_weights = np.log(weights)
        self._evals = evals
        self._evecs = evecs
        self._chol = np.linalg.cholesky(covs)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def __repr__(self) -> str:
        return f"GaussianMixture(dim={self.dim}, n_components={self.n_components})"

    # -- construction helpers -------------------------------------------------

    @classmethod
    def gaussian(cls, mean, cov) -> "GaussianMixture":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 0:
            cov = cov * np.eye(mean.size)
        return cls([1.0], mean[None, :], cov[None, :, :])

    @classmethod
    def from_dict(cls, cfg: dict) -> "GaussianMixture":
        """Build from ``{dim, components: [{weight, mean, cov}]}``; cov is row-major."""
        try:
            dim = int(cfg["dim"])
            comps = cfg["components"]
            weights = [float(c["weight"]) for c in comps]
            means = [np.asarray(c["mean"], dtype=float).reshape(dim) for c in comps]
            covs = [np.asarray(c["cov"], dtype=float).reshape(dim, dim) for c in comps]
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidArgumentError(f"malformed mixture definition: {exc}") from exc
        return cls(weights, np.stack(means), np.stack(covs))

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "components": [
                {
                    "weight": float(w),
                    "mean": m.tolist(),
                    "cov": c.reshape(-1).tolist(),
                }
                for w, m, c in zip(self.weights, self.means, self.covs)
            ],
        }

    @classmethod
    def from_json(cls, path) -> "GaussianMixture":
        return cls.from_dict(json.loads(Path(path).read_text()))

    # -- evaluation -----------------------------------------------------------

    def evaluate(self, x, mean_scale=1.0, noise_var=0.0):
        """Log-density and score of the mixture pushed through ``x -> m x + s z``.

        Component ``i`` becomes ``N(m mu_i, m^2 Sigma_i + s^2 I)``. ``mean_scale``
        and ``noise_var`` may be scalars or per-point arrays of shape ``(n,)``,
        which is how time-inhomogeneous batches are evaluated in one pass.

        Returns:
            ``(log_density, score)`` with shapes ``(n,)`` and ``(n, d)``
            (or scalar and ``(d,)`` for a single point).
        """
        x, single = _as_batch(x, self.dim)
        n = x.shape[0]
        m = np.broadcast_to(np.asarray(mean_scale, dtype=float), (n,))
        s2 = np.broadcast_to(np.asarray(noise_var, dtype=float), (n,))
        # (n, K, d) eigenvalues of each diffused component covariance
        evals = np.maximum(
            m[:, None, None] ** 2 * self._evals[None] + s2[:, None, None], MIN_EIGENVALUE
        )
        diff = x[:, None, :] - m[:, None, None] * self.means[None]
        z = np.einsum("nkd,kde->nke", diff, self._evecs)
        maha = np.sum(z**2 / evals, axis=-1)
        logdet = np.sum(np.log(evals), axis=-1)
        log_comp = self._log_weights[None] - 0.5 * (self.dim * _LOG_2PI + logdet + maha)
        logp = logsumexp(log_comp, axis=1)
        resp = np.exp(log_comp - logp[:, None])
        prec_diff = np.einsum("kde,nke->nkd", self._evecs, z / evals)
        sc = -np.einsum("nk,nkd->nd", resp, prec_diff)
        if single:
            return logp[0], sc[0]
        return logp, sc

    def log_density(self, x):
        return self.evaluate(x)[0]

    def score(self, x):
        return self.evaluate(x)[1]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise InvalidArgumentError(f"n must be >= 1, got {n}")
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nde,ne->nd", self._chol[comp], z)

    def from_uniform(self, u) -> np.ndarray:
        """Map points of ``(0, 1)^(1 + dim)`` to mixture samples.

        The first coordinate picks the component by inverse CDF of the
        weights, the rest become standard normals. Used with low-discrepancy
        point sets.
        """
        u = np.asarray(u, dtype=float)
        if u.ndim != 2 or u.shape[1] != 1 + self.dim:
            raise InvalidArgumentError(f"expected uniforms of shape (n, {1 + self.dim})")
        edges = np.cumsum(self.weights)[:-1]
        comp = np.searchsorted(edges, u[:, 0], side="right")
        z = ndtri(u[:, 1:])
        return self.means[comp] + np.einsum("nde,ne->nd", self._chol[comp], z)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        centred = self.means - mu
        return np.einsum("k,kde->de", self.weights, self.covs) + np.einsum(
            "k,kd,ke->de", self.weights, centred, centred
        )


@dataclass(frozen=True)
class RatioField:
    """Log density ratio ``log p(x) - log p_hat(x)`` between two mixtures."""

    numerator: GaussianMixture
    denominator: GaussianMixture

    def __post_init__(self):
        if self.numerator.dim != self.denominator.dim:
            raise InvalidArgumentError(
                f"dimension mismatch: {self.numerator.dim} vs {self.denominator.dim}"
            )

    @property
    def dim(self) -> int:
        return self.numerator.dim

    def evaluate(self, x):
        lp, sp = self.numerator.evaluate(x)
        lq, sq = self.denominator.evaluate(x)
        return lp - lq, sp - sq

    def log_ratio(self, x):
        return self.numerator.log_density(x) - self.denominator.log_density(x)

    def ratio_gradient(self, x):
        return self.numerator.score(x) - self.denominator.score(x)


def log_density(gmm: GaussianMixture, x):
    return gmm.log_density(x)


def score(gmm: GaussianMixture, x):
    return gmm.score(x)


def sample(gmm: GaussianMixture, n: int, rng: np.random.Generator) -> np.ndarray:
    return gmm.sample(n, rng)


def log_ratio(field: RatioField, x):
    return field.log_ratio(x)


def ratio_gradient(field: RatioField, x):
    return field.ratio_gradient(x)


def canonical_pair() -> tuple[GaussianMixture, GaussianMixture]:
    """The 2-D target/model pair used by the low-dimensional experiments.

    The model mixture misplaces and reweights the target's three modes and
    inflates their spread, the way an imperfect pre-trained generator would.
    """
    target = GaussianMixture(
        weights=[0.4, 0.3, 0.3],
        means=[[-2.0, 0.0], [1.5, 1.5], [1.5, -1.5]],
        covs=[
            [[0.30, 0.0], [0.0, 0.60]],
            [[0.40, 0.15], [0.15, 0.30]],
            [[0.40, -0.15], [-0.15, 0.30]],
        ],
    )
    model = GaussianMixture(
        weights=[0.3, 0.4, 0.3],
        means=[[-1.5, 0.4], [1.8, 1.1], [1.1, -1.8]],
        covs=[
            [[0.45, 0.0], [0.0, 0.70]],
            [[0.50, 0.10], [0.10, 0.40]],
            [[0.50, -0.20], [-0.20, 0.45]],
        ],
    )
    return target, model
