"""Run configuration: defaults, JSON loading, dotted overrides and typed views."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .distributions import GaussianMixture, canonical_pair
from .errors import ConfigError, DglabError
from .objectives import LossConfig
from .sde import SdeSchedule
from .trainer import EvalConfig, TrainConfig


def default_config() -> dict:
    """Full default configuration; every key accepted by the CLI appears here."""
    target, model = canonical_pair()
    return {
        "seed": 0,
        "distributions": {"target": target.to_dict(), "model": model.to_dict()},
        "schedule": {**SdeSchedule().to_dict(), "n_steps": 500},
        "discriminator": {"hidden_widths": [64, 64], "activation": "tanh"},
        "loss": LossConfig().to_dict(),
        "train": {
            "n_real": 5000,
            "n_fake": 5000,
            "batch_size": 256,
            "steps": 10000,
            "learning_rate": 1e-3,
            "adam_betas": [0.9, 0.999],
            "fake_source": "direct_gmm",
            "plateau_window": 200,
            "plateau_tol": 1e-4,
        },
        "eval": EvalConfig().to_dict(),
        "sample": {"n_samples": 2000, "w": 1.0, "discriminator": "optimal"},
        "sweep": {
            "sizes": [200, 2000, 20000],
            "vary": "generated",
            "n_real": 20000,
            "gammas": [0.1],
            "seeds": [0, 1, 2],
            "w_list": [0.0, 0.5, 1.0, 1.5, 2.0],
        },
        "theorem1": {
            "target": {"dim": 1, "components": [{"weight": 1.0, "mean": [0.0], "cov": [1.0]}]},
            "model": {"dim": 1, "components": [{"weight": 1.0, "mean": [0.5], "cov": [0.64]}]},
            "eps_list": [0.01],
            "omegas": [1.0, 3.0, 10.0, 30.0, 100.0],
            "region": [[-6.0, 6.0]],
            "t_fixed": 0.0,
            "kl_mc": 4000,
            "kl_n_t": 101,
        },
        "overfit": {
            "target": {"dim": 1, "components": [{"weight": 1.0, "mean": [0.0], "cov": [1.0]}]},
            "model_means": [0.5067, 4.6527],
            "sizes": [100, 400, 1600],
            "eps": 0.01,
            "max_steps": 20000,
            "learning_rate": 1e-2,
        },
        "metrics": {"k": 3, "n_permutations": 200},
    }


def _merge(base: dict, update: dict, path: str = "") -> dict:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and key not in ("target", "model"):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where} must be an object")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value
    return base


def load_config(path: str | None = None) -> dict:
    """Defaults, optionally overlaid with a JSON file. Unknown keys are errors."""
    cfg = default_config()
    if path is None:
        return cfg
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        user = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return _merge(cfg, user)


def parse_value(text: str):
    """JSON literal if it parses, a comma list of numbers, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        try:
            return [json.loads(part) for part in text.split(",")]
        except json.JSONDecodeError:
            pass
    return text


def apply_override(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[k]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    node[keys[-1]] = value


# -- typed views ----------------------------------------------------------------


def _wrap(fn, what: str):
    try:
        return fn()
    except ConfigError:
        raise
    except (DglabError, TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid {what} config: {exc}") from exc


def mixtures(cfg: dict, block: str = "distributions") -> tuple[GaussianMixture, GaussianMixture]:
    b = cfg[block]
    return _wrap(lambda: (GaussianMixture.from_dict(b["target"]), GaussianMixture.from_dict(b["model"])),
                 block)


def schedule(cfg: dict) -> SdeSchedule:
    return _wrap(lambda: SdeSchedule.from_dict(cfg["schedule"]), "schedule")


def loss_config(cfg: dict) -> LossConfig:
    return _wrap(lambda: LossConfig.from_dict(cfg["loss"]), "loss")


def train_config(cfg: dict) -> TrainConfig:
    def build():
        kw = dict(cfg["train"], seed=int(cfg["seed"]), sampler_steps=int(cfg["schedule"]["n_steps"]))
        kw.update(cfg["discriminator"])
        return TrainConfig.from_dict(kw, loss=loss_config(cfg))

    return _wrap(build, "train")


def eval_config(cfg: dict) -> EvalConfig:
    return _wrap(lambda: EvalConfig.from_dict(cfg["eval"]), "eval")


def copy_config(cfg: dict) -> dict:
    return copy.deepcopy(cfg)
