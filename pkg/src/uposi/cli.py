"""Command-line entry point: ``uposi train-up | train-osi | eval | verify``."""

from __future__ import annotations

import os

# single-threaded linear algebra keeps floating-point reductions in a fixed order
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import config as cfgmod  # noqa: E402
from .core import ConfigError  # noqa: E402
from .envs import TASKS, make_env  # noqa: E402
from .harness import (  # noqa: E402
    REGULAR, UP_OSI, UP_TRUE, Controller, default_grid, emit_results, extrapolation_experiment, file_digest,
    sweep_mu, varying_friction_experiment, write_manifest,
)
from .net import GaussianPolicy, NetworkFormatError, load_network  # noqa: E402
from .osi import OSINetwork, train_osi  # noqa: E402
from .plotting import plot_rounds, plot_training  # noqa: E402
from .trpo import train_up  # noqa: E402

log = logging.getLogger("uposi")


class CliError(RuntimeError):
    pass


def default_out(task: str, name: str, seed: int) -> Path:
    return Path(os.environ.get("UPOSI_OUT", "runs")) / f"{task}_{name}_seed{seed}"


def load_policy(path, env, want_mu: bool = True) -> GaussianPolicy:
    pol = _load(path)
    if not isinstance(pol, GaussianPolicy):
        raise CliError(f"{path} is not a policy checkpoint")
    if pol.obs_dim != env.spec.obs_dim or pol.act_dim != env.spec.act_dim:
        raise CliError(f"{path}: policy dimensions do not match task {env.name}")
    if want_mu and pol.mu_dim != env.spec.target_dim:
        raise CliError(f"{path}: expected a universal policy with {env.spec.target_dim} parameter inputs")
    if not want_mu and pol.mu_dim != 0:
        raise CliError(f"{path}: expected a regular policy without parameter input")
    return pol


def load_osi(path, env) -> OSINetwork:
    osi = _load(path)
    if not isinstance(osi, OSINetwork):
        raise CliError(f"{path} is not an identifier checkpoint")
    if osi.obs_dim != env.spec.obs_dim or osi.target_dim != env.spec.target_dim:
        raise CliError(f"{path}: identifier dimensions do not match task {env.name}")
    return osi


def _load(path):
    try:
        return load_network(path)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {path}") from None
    except NetworkFormatError as exc:
        raise CliError(str(exc)) from None


def _manifest(args, cfg, command: str, inputs: dict) -> dict:
    return {
        "command": command,
        "task": cfg["task"],
        "seed": args.seed,
        "config": cfg,
        "config_hash": cfgmod.config_hash(cfg),
        "inputs": {k: {"path": Path(v).name, "sha256": file_digest(v)} for k, v in sorted(inputs.items()) if v},
    }


def _config(args):
    return cfgmod.load_config(args.task, args.config, args.set or (), args.preset)


def _finish(out: Path, files: dict) -> None:
    for name in sorted(files):
        print(out / name)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train_up(args) -> int:
    overrides = list(args.set or ())
    if args.regular:
        overrides.append("trpo.use_mu=false")
    args.set = overrides
    cfg = _config(args)
    env = make_env(args.task, cfgmod.env_overrides(cfg))
    tcfg = cfgmod.trpo_config(cfg)
    name = "regular" if not tcfg.use_mu else "up"
    out = Path(args.out) if args.out else default_out(args.task, name, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.dump_config(cfg, out / "config.yaml")
    _, history = train_up(env, tcfg, args.seed, out_dir=out)
    files = {p.name: p for p in sorted(out.glob("*.bin"))}
    files.update({"train_log.csv": out / "train_log.csv", "config.yaml": out / "config.yaml"})
    if not args.no_plots:
        files["training.png"] = plot_training(history, out / "training.png", title=f"{args.task} {name} training")
    files["manifest.json"] = write_manifest(out / "manifest.json", _manifest(args, cfg, f"train-up {name}", {}),
                                            files)
    _finish(out, files)
    return 0


def _round_evaluator(policy, env, cfg, seed):
    ev = cfg["eval"]
    grid = default_grid(env, ev["round_grid_points"])

    def evaluate(it, osi):
        sw = sweep_mu(Controller(UP_OSI, policy, osi=osi.copy()), env, grid, ev["round_n_eval"], seed,
                      ev["max_steps"])
        return float(sw.perf.mean()), float(sw.perf.std())

    return evaluate


def cmd_train_osi(args) -> int:
    cfg = _config(args)
    env = make_env(args.task, cfgmod.env_overrides(cfg))
    policy = load_policy(args.up, env)
    out = Path(args.out) if args.out else default_out(args.task, "osi", args.seed)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.dump_config(cfg, out / "config.yaml")
    evaluate = None if args.no_eval else _round_evaluator(policy, env, cfg, args.seed)
    _, history, _ = train_osi(policy, env, cfgmod.osi_config(cfg), args.seed, out_dir=out, evaluate=evaluate)
    files = {p.name: p for p in sorted(out.glob("*.bin"))}
    files.update({"osi_log.csv": out / "osi_log.csv", "config.yaml": out / "config.yaml"})
    if not args.no_plots and not args.no_eval:
        files["osi_rounds.png"] = plot_rounds(history, out / "osi_rounds.png", title=f"{args.task} identifier rounds")
    files["manifest.json"] = write_manifest(out / "manifest.json",
                                            _manifest(args, cfg, "train-osi", {"up": args.up}), files)
    _finish(out, files)
    return 0


def _controllers(args, env, cfg) -> list:
    ctrls = []
    if args.up:
        pol = load_policy(args.up, env)
        ctrls.append(Controller(UP_TRUE, pol, label="UP-true"))
        if args.osi:
            ctrls.append(Controller(UP_OSI, pol, osi=load_osi(args.osi, env), label="UP-OSI"))
        for mu in args.fixed or ():
            vals = [float(v) for v in mu.split(",")]
            ctrls.append(Controller.fixed(pol, env, vals, label=f"UP-fixed({mu})"))
    elif args.osi:
        raise CliError("--osi needs --up")
    if args.regular_up:
        ctrls.append(Controller(REGULAR, load_policy(args.regular_up, env, want_mu=False), label="regular"))
    if not ctrls:
        raise CliError("nothing to evaluate: pass --up and/or --regular-up")
    return ctrls


def cmd_eval(args) -> int:
    cfg = _config(args)
    env = make_env(args.task, cfgmod.env_overrides(cfg))
    ev = cfg["eval"]
    n_eval = args.n_eval if args.n_eval is not None else ev["n_eval"]
    out = Path(args.out) if args.out else default_out(args.task, f"eval-{args.experiment}", args.seed)
    inputs = {"up": args.up, "osi": args.osi, "regular_up": args.regular_up}
    if args.experiment == "sweep":
        grid = default_grid(env, args.grid if args.grid is not None else ev["grid_points"])
        results = {"sweep": {c.label: sweep_mu(c, env, grid, n_eval, args.seed, ev["max_steps"])
                             for c in _controllers(args, env, cfg)}}
    elif args.experiment == "friction-track":
        if args.task != "hopper":
            raise CliError("friction-track runs on the hopper")
        fr = cfg["friction"]
        if not args.up or not args.osi:
            raise CliError("friction-track needs --up and --osi")
        if not args.fixed:
            args.fixed = [str(fr["fixed_mu"])]
        ctrls = _controllers(args, env, cfg)
        results = {"friction_track": varying_friction_experiment(
            ctrls, env, fr["mu_vary"], args.n_eval if args.n_eval is not None else fr["n_eval"], args.seed,
            region=tuple(fr["region"]), base_friction=fr["base_friction"], steps=fr["steps"],
            trace_mu=fr["trace_mu"])}
    elif args.experiment == "extrapolate":
        if args.task != "cartpole":
            raise CliError("extrapolate runs on the cart-pole")
        ex = cfg["extrapolation"]
        results = {"extrapolation": extrapolation_experiment(
            _controllers(args, env, cfg), env, args.n_eval if args.n_eval is not None else ex["n_eval"],
            args.seed, ex["points"], tuple(ex["length"]), tuple(ex["mass"]))}
    else:  # pragma: no cover - argparse restricts the choices
        raise CliError(f"unknown experiment {args.experiment}")
    out.mkdir(parents=True, exist_ok=True)
    manifest = _manifest(args, cfg, f"eval {args.experiment}", inputs)
    manifest["n_eval"] = n_eval
    files = emit_results(results, out, manifest=manifest, plots=not args.no_plots)
    _summarize(results)
    _finish(out, files)
    return 0


def _summarize(results) -> None:
    for name, res in results.items():
        if isinstance(res, dict):
            for label, sw in res.items():
                print(f"{name} {label}: mean performance {np.mean(sw.perf):.4f}, "
                      f"fraction of grid >= 1: {np.mean(sw.mean_perf >= 1.0):.2f}")
        else:
            for label, d in res.distance.items():
                print(f"{name} {label}: mean distance {np.mean(d):.3f}")


def cmd_verify(args) -> int:
    from .verify import run_checks
    groups = (args.only,) if args.only else ("numeric", "physics")
    checks = run_checks(groups)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _common(p, with_seed=True):
    p.add_argument("task", choices=sorted(TASKS))
    p.add_argument("--config", help="YAML file with per-section overrides")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    p.add_argument("--preset", default="desk", choices=sorted(cfgmod.PRESETS), help="training scale")
    p.add_argument("--out", help="output directory (default: $UPOSI_OUT or ./runs)")
    p.add_argument("--no-plots", action="store_true", help="skip PNG rendering")
    if with_seed:
        p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uposi", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-up", help="train a universal (or regular) policy with TRPO")
    _common(p)
    p.add_argument("--regular", action="store_true", help="train without the parameter input")
    p.set_defaults(func=cmd_train_up)

    p = sub.add_parser("train-osi", help="train the online identifier against a universal policy")
    _common(p)
    p.add_argument("--up", required=True, help="universal policy checkpoint")
    p.add_argument("--no-eval", action="store_true", help="skip the per-round UP-OSI evaluation")
    p.set_defaults(func=cmd_train_osi)

    p = sub.add_parser("eval", help="evaluation experiments")
    p.add_argument("experiment", choices=["sweep", "friction-track", "extrapolate"])
    _common(p)
    p.add_argument("--up", help="universal policy checkpoint")
    p.add_argument("--osi", help="identifier checkpoint (adds the UP-OSI controller)")
    p.add_argument("--regular-up", help="regular policy checkpoint (adds the baseline)")
    p.add_argument("--fixed", action="append", metavar="MU", help="add UP fed a constant parameter (comma list)")
    p.add_argument("--grid", type=int, help="grid points per parameter axis")
    p.add_argument("--n-eval", type=int, help="rollouts per grid point")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the oracle self-checks")
    p.add_argument("--only", choices=["numeric", "physics"])
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, OSError) as exc:
        print(f"uposi: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
