"""Command-line entry point: ``dglab <subcommand> [--config f] [--seed n] [--out dir] [--a.b value]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from .discriminator import MlpDiscriminator, OptimalDiscriminator
from .distributions import GaussianMixture, RatioField
from .errors import ConfigError, DglabError
from .experiments import (
    GAMMA_SWEEP_COLUMNS,
    THEOREM1_COLUMNS,
    W_SWEEP_COLUMNS,
    gamma_sweep,
    guided_generate,
    theorem1_demo,
    w_sweep,
)
from .metrics import PrSample, energy_test, knn_precision_recall
from .records import RunManifest, read_table, resolve_out_dir, write_table
from .sde import DiffusedScore
from .trainer import (
    SIZE_SWEEP_COLUMNS,
    evaluate_discriminator,
    make_discriminator,
    overfit_harness,
    prepare_datasets,
    size_sweep,
    train,
)

log = logging.getLogger("dglab")

COMMANDS = ("train", "sample", "theorem1", "overfit", "size-sweep", "w-sweep", "gamma-sweep", "metrics")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

LOSS_COLUMNS = ("step", "ce", "mse", "total")
EVAL_COLUMNS = ("kl_refined", "kl_se", "grad_mse", "steps_completed", "stopped_early")
OVERFIT_COLUMNS = ("model_mean", "tv", "n", "target_eps", "achieved_eps", "reached", "mse_estimate",
                   "optimal_baseline", "mse_per_n", "steps")
METRIC_COLUMNS = ("n_eval", "n_reference", "k", "precision", "recall", "energy", "energy_p_value")


class UsageError(ConfigError):
    """Bad command line; reported together with the usage text."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text}") from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dglab", description="Discriminator-guided score diffusion toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config overlaid on the defaults")
        sp.add_argument("--seed", type=int, help="base seed (overrides config)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in ("sample", "w-sweep"):
            sp.add_argument("--checkpoint", help="trained discriminator checkpoint")
        if name == "sample":
            sp.add_argument("--w", type=float, help="guidance weight")
            sp.add_argument("--disc", choices=("none", "optimal", "checkpoint"), default=None)
        if name == "theorem1":
            sp.add_argument("--eps", type=_float_list)
            sp.add_argument("--omegas", type=_float_list)
        if name == "overfit":
            sp.add_argument("--eps", type=float)
            sp.add_argument("--sizes", type=_int_list)
        if name in ("size-sweep",):
            sp.add_argument("--sizes", type=_int_list)
            sp.add_argument("--seeds", type=_int_list)
        if name in ("size-sweep", "gamma-sweep"):
            sp.add_argument("--gammas", type=_float_list)
        if name == "w-sweep":
            sp.add_argument("--w-list", type=_float_list)
        if name == "metrics":
            sp.add_argument("--samples", required=True, help="CSV of evaluated points")
            sp.add_argument("--reference", help="CSV of reference points (default: draws from the target)")
            sp.add_argument("--k", type=int)
    return parser


def _parse_overrides(extra: list[str], cfg: dict) -> None:
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument: {tok}")
        key, eq, val = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for {tok}")
            val = extra[i + 1]
            i += 1
        try:
            C.apply_override(cfg, key, C.parse_value(val))
        except ConfigError as exc:
            raise UsageError(str(exc)) from exc
        i += 1


# -- subcommands ----------------------------------------------------------------


def _write(manifest: RunManifest, out: Path, name: str, rows, columns) -> Path:
    path = write_table(out / name, rows, columns)
    manifest.add_file(path)
    return path


def _points_table(x: np.ndarray) -> tuple[list[dict], tuple[str, ...]]:
    cols = tuple(f"x{i}" for i in range(x.shape[1]))
    return [dict(zip(cols, map(float, r))) for r in x], cols


def cmd_train(cfg, args, out, manifest):
    p, phat = C.mixtures(cfg)
    sched = C.schedule(cfg)
    tcfg = C.train_config(cfg)
    ev = C.eval_config(cfg)
    disc = make_discriminator(p.dim, tcfg, sched)
    data = prepare_datasets(p, phat, tcfg, sched)
    rep = train(disc, DiffusedScore(phat, sched), data, tcfg, sched)
    rows = [{"step": i + 1, "ce": float(a), "mse": float(b), "total": float(c)}
            for i, (a, b, c) in enumerate(zip(rep.ce, rep.mse, rep.total))]
    _write(manifest, out, "loss_curve.csv", rows, LOSS_COLUMNS)
    metrics = evaluate_discriminator(disc, p, phat, sched, ev, tcfg.seed)
    metrics.update(steps_completed=rep.steps_completed, stopped_early=rep.stopped_early)
    _write(manifest, out, "eval.csv", [metrics], EVAL_COLUMNS)
    disc.save(out / "discriminator.ckpt")
    manifest.add_file(out / "discriminator.ckpt")
    manifest.metrics = dict(metrics, final_ce=float(rep.ce[-1]), final_mse=float(rep.mse[-1]))


def _load_checkpoint(path: str, dim: int) -> MlpDiscriminator:
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    disc = MlpDiscriminator.load(path)
    if disc.dim != dim:
        raise ConfigError(f"checkpoint dimension {disc.dim} does not match the data dimension {dim}")
    return disc


def cmd_sample(cfg, args, out, manifest):
    p, phat = C.mixtures(cfg)
    sched = C.schedule(cfg)
    sc = cfg["sample"]
    w = float(args.w if args.w is not None else sc["w"])
    kind = args.disc or ("checkpoint" if args.checkpoint else sc["discriminator"])
    if kind == "checkpoint":
        if not args.checkpoint:
            raise ConfigError("--disc checkpoint needs --checkpoint")
        disc = _load_checkpoint(args.checkpoint, p.dim)
    elif kind == "optimal":
        disc = OptimalDiscriminator(RatioField(p, phat), sched)
    elif kind == "none":
        disc, w = None, 0.0
    else:
        raise ConfigError(f"sample.discriminator must be none, optimal or checkpoint, got {kind!r}")
    rng = np.random.default_rng([int(cfg["seed"]), 4])
    n = int(sc["n_samples"])
    x = guided_generate(DiffusedScore(phat, sched), disc, w, sched, n, rng, dim=p.dim,
                        n_steps=int(cfg["schedule"]["n_steps"]))
    rows, cols = _points_table(x)
    _write(manifest, out, "samples.csv", rows, cols)
    manifest.metrics = {"n_samples": n, "w": w, "discriminator": kind}


def cmd_theorem1(cfg, args, out, manifest):
    tc = cfg["theorem1"]
    p, phat = C.mixtures(cfg, "theorem1")
    rows = theorem1_demo(p, phat, args.eps or tc["eps_list"], args.omegas or tc["omegas"], tc["region"],
                         C.schedule(cfg), t_fixed=float(tc["t_fixed"]), kl_mc=int(tc["kl_mc"]),
                         kl_n_t=int(tc["kl_n_t"]), seed=int(cfg["seed"]))
    _write(manifest, out, "theorem1.csv", rows, THEOREM1_COLUMNS)
    manifest.metrics = {"rows": len(rows), "ok_rows": sum(r["status"] == "ok" for r in rows)}


def cmd_overfit(cfg, args, out, manifest):
    oc = cfg["overfit"]
    target = C._wrap(lambda: GaussianMixture.from_dict(oc["target"]), "overfit")
    if target.dim != 1 or len(target.weights) != 1:
        raise ConfigError("overfit.target must be a single 1-D Gaussian")
    eps = float(args.eps if args.eps is not None else oc["eps"])
    rows = []
    for mu in oc["model_means"]:
        phat = GaussianMixture.gaussian([float(mu)], target.covs[0])
        for n in args.sizes or oc["sizes"]:
            r = overfit_harness(target, phat, int(n), eps, seed=int(cfg["seed"]),
                                max_steps=int(oc["max_steps"]), learning_rate=float(oc["learning_rate"]))
            rows.append({"model_mean": float(mu), "tv": r.tv, "n": r.n, "target_eps": r.target_eps,
                         "achieved_eps": r.achieved_eps, "reached": r.reached,
                         "mse_estimate": r.mse_estimate, "optimal_baseline": r.optimal_baseline,
                         "mse_per_n": r.mse_estimate / r.n, "steps": r.steps})
    _write(manifest, out, "overfit.csv", rows, OVERFIT_COLUMNS)
    manifest.metrics = {"rows": len(rows), "reached": sum(r["reached"] for r in rows)}


def cmd_size_sweep(cfg, args, out, manifest):
    p, phat = C.mixtures(cfg)
    sw = cfg["sweep"]
    tcfg = C._wrap(lambda: replace(C.train_config(cfg), n_real=int(sw["n_real"])), "sweep")
    rows = size_sweep(p, phat, args.sizes or sw["sizes"], tcfg, C.schedule(cfg),
                      gammas=args.gammas or sw["gammas"], seeds=args.seeds or sw["seeds"],
                      ev=C.eval_config(cfg), vary=sw["vary"])
    _write(manifest, out, "size_sweep.csv", rows, SIZE_SWEEP_COLUMNS)
    manifest.metrics = {"rows": len(rows), "failed": sum(r["status"] != "ok" for r in rows)}


def cmd_w_sweep(cfg, args, out, manifest):
    p, phat = C.mixtures(cfg)
    sched = C.schedule(cfg)
    ev = C.eval_config(cfg)
    seed = int(cfg["seed"])
    w_list = args.w_list or cfg["sweep"]["w_list"]
    s_theta = DiffusedScore(phat, sched)
    discs = [("optimal", OptimalDiscriminator(RatioField(p, phat), sched))]
    if args.checkpoint:
        discs.append(("checkpoint", _load_checkpoint(args.checkpoint, p.dim)))
    else:
        tcfg = C.train_config(cfg)
        data = prepare_datasets(p, phat, tcfg, sched)
        for label, loss_kw in (("ce", {"gamma": 0.0, "gamma_on": "mse"}), ("train", {})):
            vcfg = tcfg.with_loss(**loss_kw)
            disc = make_discriminator(p.dim, vcfg, sched)
            train(disc, s_theta, data, vcfg, sched)
            discs.append((label, disc))
    rows = []
    for label, disc in discs:
        rows += w_sweep(p, s_theta, disc, w_list, sched, ev, seed=seed, label=label)
    _write(manifest, out, "w_sweep.csv", rows, W_SWEEP_COLUMNS)
    best = {}
    for r in rows:
        if r["disc"] not in best or r["kl_refined"] < best[r["disc"]]["kl_refined"]:
            best[r["disc"]] = r
    manifest.metrics = {k: {"w": v["w"], "kl_refined": v["kl_refined"]} for k, v in best.items()}


def cmd_gamma_sweep(cfg, args, out, manifest):
    p, phat = C.mixtures(cfg)
    rows = gamma_sweep(p, phat, args.gammas or cfg["sweep"]["gammas"], C.train_config(cfg),
                       C.schedule(cfg), C.eval_config(cfg))
    _write(manifest, out, "gamma_sweep.csv", rows, GAMMA_SWEEP_COLUMNS)
    manifest.metrics = {"rows": len(rows)}


def _read_points(path: str) -> np.ndarray:
    if not Path(path).is_file():
        raise ConfigError(f"points file not found: {path}")
    header, rows = read_table(path)
    try:
        return np.array([[float(r[c]) for c in header] for r in rows], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"non-numeric entry in {path}: {exc}") from exc


def cmd_metrics(cfg, args, out, manifest):
    mc = cfg["metrics"]
    x = _read_points(args.samples)
    seed = int(cfg["seed"])
    if args.reference:
        ref = _read_points(args.reference)
    else:
        p, _ = C.mixtures(cfg)
        ref = p.sample(len(x), np.random.default_rng([seed, 10_000]))
    k = int(args.k if args.k is not None else mc["k"])
    precision, recall = knn_precision_recall(PrSample(ref, x, k))
    et = energy_test(x, ref, np.random.default_rng([seed, 5]), int(mc["n_permutations"]))
    row = {"n_eval": len(x), "n_reference": len(ref), "k": k, "precision": precision, "recall": recall,
           "energy": et.statistic, "energy_p_value": et.p_value}
    _write(manifest, out, "metrics.csv", [row], METRIC_COLUMNS)
    manifest.metrics = row


HANDLERS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "theorem1": cmd_theorem1,
    "overfit": cmd_overfit,
    "size-sweep": cmd_size_sweep,
    "w-sweep": cmd_w_sweep,
    "gamma-sweep": cmd_gamma_sweep,
    "metrics": cmd_metrics,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        cfg = C.load_config(args.config)
        _parse_overrides(extra, cfg)
        if args.seed is not None:
            cfg["seed"] = args.seed
        # surface typed-config errors before any work starts
        C.schedule(cfg)
        C.train_config(cfg)
        C.eval_config(cfg)
    except ConfigError as exc:
        if isinstance(exc, UsageError):
            parser.print_usage(sys.stderr)
        print(f"dglab: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    manifest = RunManifest(command=args.command, config=cfg, seed=int(cfg["seed"]))
    out = resolve_out_dir(args.out, manifest.config_hash)
    try:
        out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](cfg, args, out, manifest)
    except ConfigError as exc:
        print(f"dglab: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DglabError, FloatingPointError, OSError) as exc:
        manifest.finish(f"failed: {exc}")
        manifest.write(out)
        print(f"dglab: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    manifest.finish("ok")
    manifest.write(out)
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
