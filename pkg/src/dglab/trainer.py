"""Discriminator training loop, overfitting harness and training-set-size sweep."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import torch

from .discriminator import MlpDiscriminator
from .distributions import GaussianMixture
from .errors import DglabError, InvalidArgumentError, TrainingDivergedError
from .objectives import (
    LossConfig,
    ce_core,
    gradient_error_at,
    gradient_field_mse,
    kl_refined,
    mse_core,
    mse_target,
    perturb,
)
from .sde import DiffusedScore, SdeSchedule, reverse_sample

log = logging.getLogger(__name__)

FAKE_SOURCES = ("direct_gmm", "reverse_sde")


@dataclass(frozen=True)
class TrainConfig:
    n_real: int = 5000
    n_fake: int = 5000
    batch_size: int = 256
    steps: int = 3000
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    fake_source: str = "direct_gmm"
    hidden_widths: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    plateau_window: int = 200
    plateau_tol: float = 1e-4
    sampler_steps: int = 500

    def __post_init__(self):
        if self.batch_size > min(self.n_real, self.n_fake):
            raise InvalidArgumentError("batch_size must not exceed min(n_real, n_fake)")
        if not all(0 <= b < 1 for b in self.adam_betas):
            raise InvalidArgumentError(f"adam betas must lie in [0, 1): {self.adam_betas}")
        if self.learning_rate <= 0:
            raise InvalidArgumentError("learning_rate must be positive")
        if self.fake_source not in FAKE_SOURCES:
            raise InvalidArgumentError(f"fake_source must be one of {FAKE_SOURCES}")

    @property
    def gamma(self) -> float:
        return self.loss.gamma

    @classmethod
    def from_dict(cls, cfg: dict, loss: LossConfig | None = None) -> "TrainConfig":
        kw = {k: v for k, v in cfg.items() if k in cls.__dataclass_fields__ and k != "loss"}
        if "adam_betas" in kw:
            kw["adam_betas"] = tuple(kw["adam_betas"])
        if "hidden_widths" in kw:
            kw["hidden_widths"] = tuple(kw["hidden_widths"])
        return cls(loss=loss or LossConfig(), **kw)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "loss"}
        out["adam_betas"] = list(self.adam_betas)
        out["hidden_widths"] = list(self.hidden_widths)
        out["loss"] = self.loss.to_dict()
        return out

    def with_loss(self, **changes) -> "TrainConfig":
        return replace(self, loss=replace(self.loss, **changes))


@dataclass
class TrainReport:
    ce: np.ndarray
    mse: np.ndarray
    total: np.ndarray
    params: np.ndarray
    wall_clock: float
    steps_completed: int
    stopped_early: bool = False
    evals: list[tuple[int, dict]] = field(default_factory=list)


def make_discriminator(dim: int, cfg: TrainConfig, schedule: SdeSchedule, seed: int | None = None):
    return MlpDiscriminator(dim, cfg.hidden_widths, cfg.activation, schedule.T,
                            seed=cfg.seed if seed is None else seed)


def prepare_datasets(p: GaussianMixture, phat: GaussianMixture, cfg: TrainConfig,
                     schedule: SdeSchedule, s_theta=None) -> tuple[np.ndarray, np.ndarray]:
    """Fixed real/generated sets for a whole run.

    Generated samples come either straight from ``phat`` or from the reverse
    SDE driven by ``s_theta`` (by default the exact diffused score of ``phat``).
    """
    if p.dim != phat.dim:
        raise InvalidArgumentError("mixtures must share a dimension")
    rng = np.random.default_rng([cfg.seed, 0])
    real = p.sample(cfg.n_real, rng)
    if cfg.fake_source == "direct_gmm":
        fake = phat.sample(cfg.n_fake, rng)
    else:
        s_theta = s_theta or DiffusedScore(phat, schedule)
        fake = reverse_sample(s_theta, schedule, cfg.sampler_steps, cfg.n_fake, rng, dim=p.dim)
    return real, fake


def train(disc: MlpDiscriminator, s_theta, datasets, cfg: TrainConfig, schedule: SdeSchedule, *,
          evaluator: Callable[[MlpDiscriminator], dict] | None = None,
          eval_every: int = 0) -> TrainReport:
    """Mini-batch Adam on ``w_ce L_CE + w_mse L_MSE`` over fixed datasets.

    Each step draws real and generated rows with replacement, shares one
    timestep per row pair, perturbs both through the exact kernel and
    evaluates the CE on both batches and the gradient-matching term on the
    real one. Stops early when the windowed mean CE changes by less than
    ``plateau_tol`` (relative) between consecutive windows.
    """
    real_set, fake_set = datasets
    if real_set.shape[1] != disc.dim:
        raise InvalidArgumentError("discriminator dimension does not match the data")
    rng = np.random.default_rng([cfg.seed, 1])
    loss_cfg = cfg.loss
    w_ce, w_mse = loss_cfg.weights()
    opt = torch.optim.Adam(disc.parameters(), lr=cfg.learning_rate, betas=tuple(cfg.adam_betas))
    b = cfg.batch_size
    ce_hist, mse_hist, tot_hist = [], [], []
    evals = []
    last_good = disc.get_params()
    stopped = False
    start = time.perf_counter()
    for step in range(cfg.steps):
        t = loss_cfg.sample_times(schedule, b, rng)
        real = perturb(real_set[rng.integers(len(real_set), size=b)], t, schedule, rng)
        fake = perturb(fake_set[rng.integers(len(fake_set), size=b)], t, schedule, rng)
        target = torch.from_numpy(mse_target(s_theta, real, schedule))
        lam = torch.from_numpy(loss_cfg.lam(schedule, t))
        tt = torch.from_numpy(t)

        d_real, g_real = disc.value_and_input_gradient(
            torch.from_numpy(real.xt), tt, create_graph=w_mse > 0
        )
        d_fake = disc.forward(torch.from_numpy(fake.xt), tt)
        ce = ce_core(d_real, d_fake, lam, lam)
        mse = mse_core(target, g_real, lam)
        total = w_ce * ce + (w_mse * mse if w_mse else 0.0)
        total_val = float(total.detach())
        if not math.isfinite(total_val):
            raise TrainingDivergedError(step, last_good)
        last_good = disc.get_params()
        opt.zero_grad()
        for prm in disc.parameters():
            prm.grad = None
        total.backward()
        opt.step()

        ce_hist.append(float(ce.detach()))
        mse_hist.append(float(mse.detach()))
        tot_hist.append(total_val)
        if evaluator is not None and eval_every and (step + 1) % eval_every == 0:
            evals.append((step + 1, evaluator(disc)))
        win = cfg.plateau_window
        if win and (step + 1) >= 2 * win and (step + 1) % win == 0:
            prev = np.mean(ce_hist[-2 * win:-win])
            cur = np.mean(ce_hist[-win:])
            if abs(cur - prev) < cfg.plateau_tol * abs(prev):
                log.info("CE plateau at step %d; stopping", step + 1)
                stopped = True
                break
    return TrainReport(
        ce=np.array(ce_hist), mse=np.array(mse_hist), total=np.array(tot_hist),
        params=disc.get_params(), wall_clock=time.perf_counter() - start,
        steps_completed=len(ce_hist), stopped_early=stopped, evals=evals,
    )


# -- overfitting harness -------------------------------------------------------


def total_variation_1d(p: GaussianMixture, phat: GaussianMixture, resolution: int = 20001) -> float:
    from .objectives import covering_box, make_grid

    grid = make_grid(covering_box([p, phat]), resolution)
    diff = np.abs(np.exp(p.log_density(grid.points)) - np.exp(phat.log_density(grid.points)))
    return 0.5 * float(grid.weights @ diff)


@dataclass
class OverfitResult:
    n: int
    target_eps: float
    achieved_eps: float
    reached: bool
    mse_estimate: float
    optimal_baseline: float
    steps: int
    tv: float


def overfit_width(n: int) -> int:
    return max(64, int(math.ceil(4 * math.sqrt(n))))


def overfit_harness(p: GaussianMixture, phat: GaussianMixture, n: int, target_eps: float, *,
                    seed: int = 0, max_steps: int = 20000, learning_rate: float = 1e-2,
                    check_every: int = 100, resolution: int = 40001) -> OverfitResult:
    """Drive every training sample's logistic loss below ``target_eps`` and measure the damage.

    Static 1-D setting (``t = 0``): ``n`` draws from each of ``p`` and ``phat``,
    a tanh MLP with two hidden layers of width ``max(64, 4 sqrt(n))`` and
    full-batch Adam on the mean cross-entropy. The gradient error
    ``E_P (d*' - d')^2`` is computed by quadrature. Hitting ``max_steps``
    first is reported through ``reached=False``, not raised.

    ``optimal_baseline`` is ``E_P (d*')^2``, the error of the constant
    discriminator, which sets the natural scale of the gradient error.
    """
    if p.dim != 1 or phat.dim != 1:
        raise InvalidArgumentError("the overfitting harness is one-dimensional")
    if n < 1 or target_eps <= 0:
        raise InvalidArgumentError("n and target_eps must be positive")
    tv = total_variation_1d(p, phat)
    if tv >= 1:
        raise InvalidArgumentError("distributions must overlap (TV < 1)")
    rng = np.random.default_rng([seed, 2])
    x = torch.from_numpy(p.sample(n, rng))
    xh = torch.from_numpy(phat.sample(n, rng))
    width = overfit_width(n)
    disc = MlpDiscriminator(1, (width, width), "tanh", 1.0, seed=seed)
    t0 = torch.zeros(n, dtype=torch.float64)
    opt = torch.optim.Adam(disc.parameters(), lr=learning_rate)

    def worst_loss() -> float:
        with torch.no_grad():
            return float(torch.maximum(
                torch.nn.functional.softplus(-disc.forward(x, t0)).max(),
                torch.nn.functional.softplus(disc.forward(xh, t0)).max(),
            ))

    achieved = worst_loss()
    step = 0
    while achieved > target_eps and step < max_steps:
        loss = (torch.nn.functional.softplus(-disc.forward(x, t0)).mean()
                + torch.nn.functional.softplus(disc.forward(xh, t0)).mean())
        opt.zero_grad()
        loss.backward()
        opt.step()
        step += 1
        if step % check_every == 0 or step == max_steps:
            achieved = worst_loss()
    from .discriminator import ConstantDiscriminator

    mse = gradient_error_at(disc, p, phat, None, 0.0, resolution=resolution)
    baseline = gradient_error_at(ConstantDiscriminator(1, 0.0), p, phat, None, 0.0,
                                 resolution=resolution)
    if not math.isfinite(mse):
        raise TrainingDivergedError(step, disc.get_params())
    return OverfitResult(n, target_eps, achieved, achieved <= target_eps, mse, baseline, step, tv)


# -- size sweep ----------------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation settings shared by the sweeps."""

    kl_mc: int = 4000
    kl_n_t: int = 101
    w: float = 1.0
    grid_resolution: int = 61
    t_set: tuple[float, ...] = (0.05, 0.1, 0.2, 0.4, 0.7)
    box: tuple[tuple[float, float], ...] | None = None
    sample_steps: int = 500
    n_samples: int = 2000
    pr_k: int = 3

    @classmethod
    def from_dict(cls, cfg: dict) -> "EvalConfig":
        kw = {k: v for k, v in cfg.items() if k in cls.__dataclass_fields__}
        if "t_set" in kw:
            kw["t_set"] = tuple(kw["t_set"])
        if kw.get("box") is not None:
            kw["box"] = tuple(tuple(b) for b in kw["box"])
        return cls(**kw)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["t_set"] = list(self.t_set)
        out["box"] = None if self.box is None else [list(b) for b in self.box]
        return out

    def resolve_box(self, p: GaussianMixture, phat: GaussianMixture):
        if self.box is not None:
            return [tuple(b) for b in self.box]
        from .objectives import covering_box

        return covering_box([p, phat], half_width=3.0)


def loss_variants(gammas) -> list[tuple[str, float, LossConfig]]:
    """``("ce", 0, ...)`` plus one combined-loss variant per gamma."""
    out = [("ce", 0.0, {"gamma": 0.0, "gamma_on": "mse"})]
    out += [("train", float(g), {"gamma": float(g), "gamma_on": "ce"}) for g in gammas]
    return out


def evaluate_discriminator(disc, p, phat, schedule: SdeSchedule, ev: EvalConfig, seed: int) -> dict:
    s_theta = DiffusedScore(phat, schedule)
    kl = kl_refined(p, s_theta, disc, ev.w, schedule, ev.kl_mc, np.random.default_rng([seed, 3]),
                    n_t=ev.kl_n_t)
    gf = gradient_field_mse(disc, p, phat, schedule, ev.resolve_box(p, phat), ev.grid_resolution,
                            ev.t_set)
    return {"kl_refined": kl.value, "kl_se": kl.se, "grad_mse": gf.overall()}


SIZE_VARY = ("generated", "both")

SIZE_SWEEP_COLUMNS = ("size", "loss", "gamma", "seed", "kl_refined", "kl_se", "grad_mse",
                      "final_ce", "final_mse", "status")


def size_sweep(p: GaussianMixture, phat: GaussianMixture, sizes, cfg: TrainConfig,
               schedule: SdeSchedule, *, gammas=(0.1,), seeds=(0,), ev: EvalConfig = EvalConfig(),
               vary: str = "generated", models: dict | None = None):
    """Train CE-only and combined-loss discriminators on training sets of each size.

    With ``vary="generated"`` only the generated set shrinks and the real set
    keeps ``cfg.n_real`` rows; ``vary="both"`` shrinks both sets. Rows carry
    ``status="ok"`` or the error message of a failed run; the sweep continues
    past failures. Each row trains from its own seed, so rows reproduce in
    isolation. When ``models`` is a dict it receives the trained
    discriminators keyed by ``(size, loss, gamma, seed)``.
    """
    if len(sizes) == 0:
        raise InvalidArgumentError("sizes must be nonempty")
    if vary not in SIZE_VARY:
        raise InvalidArgumentError(f"vary must be one of {SIZE_VARY}")
    s_theta = DiffusedScore(phat, schedule)
    rows = []
    for seed in seeds:
        for size in sizes:
            n_real = int(size) if vary == "both" else cfg.n_real
            run_cfg = replace(cfg, n_real=n_real, n_fake=int(size), seed=int(seed),
                              batch_size=min(cfg.batch_size, int(size), n_real))
            data = prepare_datasets(p, phat, run_cfg, schedule)
            for name, gamma, loss_kw in loss_variants(gammas):
                row = {"size": int(size), "loss": name, "gamma": gamma, "seed": int(seed)}
                try:
                    vcfg = run_cfg.with_loss(**loss_kw)
                    disc = make_discriminator(p.dim, vcfg, schedule)
                    rep = train(disc, s_theta, data, vcfg, schedule)
                    if models is not None:
                        models[(int(size), name, gamma, int(seed))] = disc
                    row.update(evaluate_discriminator(disc, p, phat, schedule, ev, seed))
                    row.update(final_ce=float(rep.ce[-100:].mean()),
                               final_mse=float(rep.mse[-100:].mean()), status="ok")
                except DglabError as exc:
                    log.warning("size-sweep row %s failed: %s", row, exc)
                    row.update(kl_refined=math.nan, kl_se=math.nan, grad_mse=math.nan,
                               final_ce=math.nan, final_mse=math.nan, status=str(exc))
                rows.append(row)
    return rows
