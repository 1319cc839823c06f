"""Discriminator families ``d(x, t)`` estimating ``log p_t(x) / p_hat_t(x)``.

All families expose ``value(x, t)`` and ``input_gradient(x, t)`` on numpy
batches (``x`` of shape ``(n, d)``, ``t`` scalar or ``(n,)``). The MLP also
exposes torch-level evaluation so training losses can be differentiated with
respect to its parameters, including through the input gradient.
"""

from __future__ import annotations

import io
import json
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .distributions import RatioField
from .errors import (
    ConstructionInfeasibleError,
    ConstructionViolatedError,
    InvalidArgumentError,
    UnsupportedArchitectureError,
)
from .sde import SdeSchedule, marginal

CHECKPOINT_VERSION = 1

_ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "tanh": torch.tanh,
    "softplus": torch.nn.functional.softplus,
    "sigmoid": torch.sigmoid,
    "relu": torch.relu,
}
SMOOTH_ACTIVATIONS = frozenset({"tanh", "softplus", "sigmoid"})


def _times(t, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(t, dtype=float), (n,))


def _batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[None, :] if x.ndim == 1 else x


def mlp_param_count(input_dim: int, hidden_widths: Sequence[int]) -> int:
    sizes = [input_dim, *hidden_widths, 1]
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


class MlpDiscriminator:
    """Fully connected network on the input ``(x, t / T)``.

    Hidden layers use fan-in uniform initialisation; the output layer starts
    at zero so an untrained discriminator is the no-op ``d = 0``.

    Args:
        dim: Data dimension; the network sees ``dim + 1`` inputs.
        hidden_widths: Width of each hidden layer.
        activation: One of ``tanh``, ``softplus``, ``sigmoid`` or ``relu``.
            Only the first three support parameter gradients of input-gradient
            losses.
        T: Time horizon used to normalise the time channel.
        seed: Seed for the initial weights.
    """

    def __init__(
        self,
        dim: int,
        hidden_widths: Sequence[int] = (64, 64),
        activation: str = "tanh",
        T: float = 1.0,
        seed: int = 0,
    ):
        if activation not in _ACTIVATIONS:
            raise InvalidArgumentError(f"unknown activation {activation!r}")
        if any(int(w) < 1 for w in hidden_widths):
            raise InvalidArgumentError(f"hidden widths must be positive: {hidden_widths}")
        self.dim = int(dim)
        self.hidden_widths = tuple(int(w) for w in hidden_widths)
        self.activation = activation
        self.T = float(T)
        self._act = _ACTIVATIONS[activation]
        rng = np.random.default_rng(seed)
        sizes = [self.dim + 1, *self.hidden_widths, 1]
        self.weights: list[torch.Tensor] = []
        self.biases: list[torch.Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if i == len(sizes) - 2:
                w = np.zeros((fan_out, fan_in))
                b = np.zeros(fan_out)
            else:
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, (fan_out, fan_in))
                b = rng.uniform(-bound, bound, fan_out)
            self.weights.append(torch.tensor(w, dtype=torch.float64, requires_grad=True))
            self.biases.append(torch.tensor(b, dtype=torch.float64, requires_grad=True))

    @property
    def input_dim(self) -> int:
        return self.dim + 1

    def parameters(self) -> list[torch.Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def get_params(self) -> np.ndarray:
        return np.concatenate([p.detach().numpy().ravel() for p in self.parameters()])

    def set_params(self, flat) -> None:
        flat = np.array(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise InvalidArgumentError(f"expected {self.n_params} parameters, got {flat.shape}")
        offset = 0
        with torch.no_grad():
            for p in self.parameters():
                k = p.numel()
                p.copy_(torch.from_numpy(flat[offset:offset + k].reshape(p.shape)))
                offset += k

    def copy(self) -> "MlpDiscriminator":
        other = MlpDiscriminator(self.dim, self.hidden_widths, self.activation, self.T)
        other.set_params(self.get_params())
        return other

    # -- torch level -----------------------------------------------------------

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        h = torch.cat([x, (t / self.T)[:, None]], dim=1)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i < last:
                h = self._act(h)
        return h[:, 0]

    def value_and_input_gradient(self, x: torch.Tensor, t: torch.Tensor, create_graph: bool):
        """Torch output ``d`` and ``grad_x d``; ``create_graph`` keeps the graph for double backprop."""
        x = x.detach().requires_grad_(True)
        d = self.forward(x, t)
        (grad,) = torch.autograd.grad(d.sum(), x, create_graph=create_graph, retain_graph=True)
        return d, grad

    # -- numpy level -----------------------------------------------------------

    def value(self, x, t) -> np.ndarray:
        x = _batch(x)
        with torch.no_grad():
            d = self.forward(torch.from_numpy(x), torch.from_numpy(_times(t, len(x)).copy()))
        return d.numpy()

    def input_gradient(self, x, t) -> np.ndarray:
        x = _batch(x)
        _, g = self.value_and_input_gradient(
            torch.from_numpy(x), torch.from_numpy(_times(t, len(x)).copy()), create_graph=False
        )
        return g.detach().numpy()

    def value_and_gradient(self, x, t):
        x = _batch(x)
        d, g = self.value_and_input_gradient(
            torch.from_numpy(x), torch.from_numpy(_times(t, len(x)).copy()), create_graph=False
        )
        return d.detach().numpy(), g.detach().numpy()

    # -- checkpoints -----------------------------------------------------------

    def header(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "family": "mlp",
            "dim": self.dim,
            "hidden_widths": list(self.hidden_widths),
            "activation": self.activation,
            "T": self.T,
            "n_params": self.n_params,
            "dtype": "float64-le",
        }

    def save(self, path) -> None:
        """Write a JSON header line followed by the flat little-endian parameter blob."""
        buf = io.BytesIO()
        buf.write(json.dumps(self.header(), sort_keys=True).encode() + b"\n")
        buf.write(self.get_params().astype("<f8").tobytes())
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "MlpDiscriminator":
        raw = Path(path).read_bytes()
        head, _, blob = raw.partition(b"\n")
        header = json.loads(head)
        if "version" not in header:
            raise InvalidArgumentError(f"checkpoint {path} has no version field")
        if header["version"] != CHECKPOINT_VERSION or header.get("family") != "mlp":
            raise InvalidArgumentError(f"unsupported checkpoint header {header}")
        disc = cls(header["dim"], header["hidden_widths"], header["activation"], header["T"])
        disc.set_params(np.frombuffer(blob, dtype="<f8"))
        return disc


class _AnalyticDiscriminator:
    """Shared plumbing for families defined through an exact density ratio."""

    def __init__(self, field: RatioField, schedule: SdeSchedule | None = None):
        self.field = field
        self.schedule = schedule

    @property
    def dim(self) -> int:
        return self.field.dim

    def _log_ratio(self, x, t):
        x = _batch(x)
        if self.schedule is None:
            return self.field.evaluate(x)
        tt = _times(t, len(x))
        lp, sp = marginal(self.field.numerator, self.schedule, x, tt)
        lq, sq = marginal(self.field.denominator, self.schedule, x, tt)
        return lp - lq, sp - sq

    def value(self, x, t) -> np.ndarray:
        return self.value_and_gradient(x, t)[0]

    def input_gradient(self, x, t) -> np.ndarray:
        return self.value_and_gradient(x, t)[1]


class OptimalDiscriminator(_AnalyticDiscriminator):
    """``d*(x, t) = log p_t(x) - log p_hat_t(x)``; static when no schedule is given."""

    def value_and_gradient(self, x, t):
        return self._log_ratio(x, t)


class ConstantDiscriminator:
    """``d(x, t) = c`` everywhere."""

    def __init__(self, dim: int, c: float = 0.0):
        self.dim = dim
        self.c = float(c)

    def value_and_gradient(self, x, t):
        x = _batch(x)
        return np.full(len(x), self.c), np.zeros_like(x)

    def value(self, x, t):
        return self.value_and_gradient(x, t)[0]

    def input_gradient(self, x, t):
        return self.value_and_gradient(x, t)[1]


class OscillatoryDiscriminator(_AnalyticDiscriminator):
    """Optimal ratio plus a bounded high-frequency ripple.

    ``d = log(r + sin(omega <u, x>) sqrt(eps r))`` with ``r`` the optimal ratio.
    The ripple obeys ``h^2 / r <= eps`` pointwise, so cross-entropy stays within
    ``eps`` of optimal while ``grad d`` carries an ``omega``-sized error.
    """

    def __init__(self, field: RatioField, epsilon: float, omega: float,
                 direction=None, schedule: SdeSchedule | None = None):
        super().__init__(field, schedule)
        if epsilon <= 0 or omega < 0:
            raise InvalidArgumentError(f"need epsilon > 0 and omega >= 0, got ({epsilon}, {omega})")
        u = np.zeros(field.dim) if direction is None else np.asarray(direction, dtype=float)
        if direction is None:
            u[0] = 1.0
        norm = np.linalg.norm(u)
        if norm == 0:
            raise InvalidArgumentError("direction must be nonzero")
        self.epsilon = float(epsilon)
        self.omega = float(omega)
        self.direction = u / norm

    def value_and_gradient(self, x, t):
        x = _batch(x)
        ell, grad_ell = self._log_ratio(x, t)
        phase = self.omega * (x @ self.direction)
        s = np.sin(phase)
        # amplitude sqrt(eps / r), kept in log space
        a = np.sqrt(self.epsilon) * np.exp(-0.5 * ell)
        inner = 1.0 + a * s
        if np.any(inner <= 0):
            bad = int(np.argmin(inner))
            raise ConstructionViolatedError(
                f"r_opt + h <= 0 at x={x[bad].tolist()} (inner factor {inner[bad]:.3e})"
            )
        d = ell + np.log(inner)
        ripple = a[:, None] * (
            self.omega * np.cos(phase)[:, None] * self.direction[None, :] - 0.5 * s[:, None] * grad_ell
        )
        return d, grad_ell + ripple / inner[:, None]


def _region_grid(region, resolution: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, resolution) for lo, hi in region]
    mesh = np.meshgrid(*axes, indexing="xy")
    return np.stack([m.ravel() for m in mesh], axis=1)


def build_oscillatory(
    field: RatioField,
    epsilon: float,
    omega: float,
    region,
    *,
    direction=None,
    schedule: SdeSchedule | None = None,
    resolution: int | None = None,
    n_check_times: int = 21,
) -> OscillatoryDiscriminator:
    """Construct the oscillatory discriminator after checking ``inf r_opt > eps`` on ``region``.

    ``region`` is a box ``[(lo, hi), ...]`` per dimension. With a schedule the
    check also runs on the diffused ratio at ``n_check_times`` times in ``[0, T]``.
    """
    region = [tuple(map(float, r)) for r in region]
    if len(region) != field.dim:
        raise InvalidArgumentError(f"region has {len(region)} axes for a {field.dim}-D field")
    if resolution is None:
        resolution = 4001 if field.dim == 1 else 201
    pts = _region_grid(region, resolution)
    times = [0.0] if schedule is None else np.linspace(0.0, schedule.T, n_check_times)
    log_eps = np.log(epsilon)
    probe = OptimalDiscriminator(field, schedule)
    for t in times:
        ell = probe.value(pts, t)
        i = int(np.argmin(ell))
        if ell[i] <= log_eps:
            raise ConstructionInfeasibleError(pts[i].tolist(), float(np.exp(ell[i])), epsilon)
    return OscillatoryDiscriminator(field, epsilon, omega, direction, schedule)


def d_value(disc, x, t):
    return disc.value(x, t)


def d_input_gradient(disc, x, t):
    return disc.input_gradient(x, t)


def loss_param_gradient(disc: MlpDiscriminator, loss_fn: Callable[[MlpDiscriminator], torch.Tensor]):
    """Exact gradient of ``loss_fn(disc)`` with respect to the flat parameter vector.

    ``loss_fn`` builds a torch scalar from ``disc.forward`` and/or
    ``disc.value_and_input_gradient(..., create_graph=True)``; the second-order
    path through the input gradient is differentiated by reverse-over-reverse
    autodiff.

    Returns:
        ``(loss_value, flat_gradient)``.
    """
    if disc.activation not in SMOOTH_ACTIVATIONS:
        raise UnsupportedArchitectureError(
            f"activation {disc.activation!r} is not twice differentiable"
        )
    params = disc.parameters()
    loss = loss_fn(disc)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    flat = np.concatenate([
        (torch.zeros_like(p) if g is None else g).detach().numpy().ravel()
        for p, g in zip(params, grads)
    ])
    return float(loss.detach()), flat
