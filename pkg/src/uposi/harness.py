"""Runtime control loop and evaluation experiments.

A :class:`Controller` decides what parameter vector the universal policy
sees each step: the truth, the identifier's estimate from the last few
steps, a fixed guess, or nothing (the regular policy). Rollouts for many
(parameter, seed) pairs run as lanes of one batched simulation; each lane
draws its initial state from its own stream ``make_rng(seed, point, k)``,
so every controller is evaluated on the same initial states.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import plotting
from .core import HISTORY_LEN, ConfigError, HistoryBuffer, make_rng
from .envs.base import Env
from .envs.hopper import Hopper
from .net import GaussianPolicy

UP_TRUE = "UP_TRUE"
UP_OSI = "UP_OSI"
REGULAR = "REGULAR"
UP_FIXED = "UP_FIXED"
VARIANTS = (UP_TRUE, UP_OSI, REGULAR, UP_FIXED)


@dataclass
class Controller:
    variant: str
    policy: GaussianPolicy
    osi: object = None
    fixed_target: Optional[np.ndarray] = None  # normalized, for UP_FIXED
    h: int = HISTORY_LEN
    label: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown controller variant {self.variant!r}")
        if self.variant == REGULAR:
            if self.policy.mu_dim != 0:
                raise ConfigError("the regular controller needs a policy without parameter input")
        elif self.policy.mu_dim == 0:
            raise ConfigError(f"{self.variant} needs a policy with parameter input")
        if self.variant == UP_OSI and self.osi is None:
            raise ConfigError("UP_OSI needs an identifier")
        if self.variant == UP_FIXED:
            if self.fixed_target is None:
                raise ConfigError("UP_FIXED needs a fixed parameter vector")
            self.fixed_target = np.asarray(self.fixed_target, dtype=float).reshape(-1)
        if not self.label:
            self.label = self.variant

    @classmethod
    def fixed(cls, policy: GaussianPolicy, env: Env, mu, label: str = "") -> "Controller":
        """UP fed the constant physical parameter ``mu``."""
        if env.spec.target_dim != env.spec.mu_dim:
            raise ConfigError("a fixed guess needs a target made of model parameters only")
        z = env.normalize_mu(np.atleast_1d(np.asarray(mu, dtype=float)))
        return cls(UP_FIXED, policy, fixed_target=z, label=label or f"UP_FIXED({np.round(mu, 3).tolist()})")


@dataclass
class RolloutBatch:
    """Per-lane outcome of :func:`run_lanes`; time series are ``(T, lanes, ...)``."""

    total_reward: np.ndarray
    steps: np.ndarray
    metric: np.ndarray
    performance: np.ndarray
    terminated: np.ndarray
    states: Optional[np.ndarray] = None
    mu_hat: Optional[np.ndarray] = None  # what the policy was given (normalized)
    truth: Optional[np.ndarray] = None  # true normalized target (None for REGULAR)
    actions: Optional[np.ndarray] = None
    alive: Optional[np.ndarray] = None


def run_lanes(controller: Controller, env: Env, mus, rngs, max_steps: Optional[int] = None,
              record: bool = True) -> RolloutBatch:
    """Run one deterministic (mean-action) rollout per lane.

    ``mus`` holds one physical parameter vector per lane and ``rngs`` one
    generator per lane for its initial state. Each step: form the policy's
    parameter input for the variant, act with the clipped mean action, step,
    and push ``(x_t, u_t)`` into the history. For UP_OSI the first ``h``
    steps use the normalized midpoint (zeros) until the history is full. A
    terminated lane is frozen and stops accumulating reward.
    """
    mus = np.atleast_2d(np.asarray(mus, dtype=float))
    n = mus.shape[0]
    if len(rngs) != n:
        raise ValueError("need one generator per lane")
    spec = env.spec
    T = max_steps or spec.max_steps
    pol = controller.policy
    variant = controller.variant
    state = np.stack([env.reset(mus[i], rngs[i]) for i in range(n)])
    hist = HistoryBuffer(n, spec.obs_dim, spec.act_dim, controller.h)
    hist.reset(np.arange(n), env.observe(state))
    alive = np.ones(n, dtype=bool)
    total = np.zeros(n)
    steps = np.zeros(n, dtype=np.int64)
    reduce = env.metric_reduce
    metric = env.task_metric(state) if reduce == "max" else np.zeros(n)
    oracle = getattr(controller.osi, "oracle", False)
    rec_states, rec_mu, rec_truth, rec_act, rec_alive = [state.copy()], [], [], [], []
    for _ in range(T):
        obs = hist.current_obs
        truth = None
        if variant == UP_TRUE:
            truth = env.target(state, mus)
            m = truth
        elif variant == UP_OSI:
            truth = env.target(state, mus)
            if oracle:
                m = controller.osi.predict(hist.flatten(), truth=truth)
            else:
                m = np.zeros((n, spec.target_dim))
                ready = hist.full
                if np.any(ready):
                    m[ready] = controller.osi.predict(hist.flatten()[ready])
        elif variant == UP_FIXED:
            truth = env.target(state, mus)
            m = np.broadcast_to(controller.fixed_target, (n, spec.target_dim))
        else:
            m = None
        a = np.clip(pol.mean(obs, m), -1.0, 1.0)
        res = env.step(state, env.scale_action(a), mus)
        nxt = np.where(alive[:, None], res.next_state, state)
        total += np.where(alive, res.reward, 0.0)
        steps += alive
        if reduce == "max":
            metric = np.where(alive, np.maximum(metric, env.task_metric(nxt)), metric)
        else:
            metric = np.where(alive, env.task_metric(nxt), metric)
        if record:
            rec_mu.append(np.full((n, spec.target_dim), np.nan) if m is None else np.array(m))
            rec_truth.append(np.full((n, spec.target_dim), np.nan) if truth is None else truth)
            rec_act.append(a)
            rec_alive.append(alive.copy())
        alive = alive & ~res.terminated
        hist.push(a, env.observe(nxt))
        state = nxt
        if record:
            rec_states.append(state.copy())
        if not np.any(alive):
            break
    perf = env.performance(total, metric)
    out = RolloutBatch(total, steps, metric, perf, ~alive)
    if record:
        out.states = np.array(rec_states)
        out.mu_hat = np.array(rec_mu)
        out.truth = np.array(rec_truth)
        out.actions = np.array(rec_act)
        out.alive = np.array(rec_alive)
    return out


def run_controller(controller: Controller, env: Env, mu_true, max_steps: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None, seed: int = 0) -> RolloutBatch:
    """Single rollout under ``mu_true`` (see :func:`run_lanes`)."""
    rng = rng if rng is not None else make_rng(seed)
    return run_lanes(controller, env, np.atleast_2d(mu_true), [rng], max_steps)


# ---------------------------------------------------------------------------
# Parameter sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    label: str
    mu_grid: np.ndarray  # (G, mu_dim) physical
    perf: np.ndarray  # (G, n_eval)
    mu_hat: Optional[np.ndarray]  # (G, n_eval, mu_dim) time-averaged estimate, physical units
    steps: np.ndarray  # (G, n_eval)
    bounds: np.ndarray

    @property
    def n_eval(self) -> int:
        return self.perf.shape[1]

    @property
    def mean_perf(self):
        return self.perf.mean(axis=1)

    @property
    def std_perf(self):
        return self.perf.std(axis=1)

    @property
    def mean_mu_hat(self):
        return None if self.mu_hat is None else self.mu_hat.mean(axis=1)

    @property
    def std_mu_hat(self):
        return None if self.mu_hat is None else self.mu_hat.std(axis=1)

    def columns(self) -> list[str]:
        d = self.mu_grid.shape[1]
        if d == 1:
            return ["mu_true", "mean_perf", "std_perf", "mean_mu_hat", "std_mu_hat", "n_eval"]
        cols = [f"mu_true_{j}" for j in range(d)] + ["mean_perf", "std_perf"]
        cols += [f"mean_mu_hat_{j}" for j in range(d)] + [f"std_mu_hat_{j}" for j in range(d)]
        return cols + ["n_eval"]

    def rows(self) -> list[list]:
        d = self.mu_grid.shape[1]
        nan = np.full(d, np.nan)
        out = []
        for g in range(self.mu_grid.shape[0]):
            mh = nan if self.mu_hat is None else self.mean_mu_hat[g]
            sh = nan if self.mu_hat is None else self.std_mu_hat[g]
            out.append([*self.mu_grid[g], self.mean_perf[g], self.std_perf[g], *mh, *sh, self.n_eval])
        return out


def sweep_mu(controller: Controller, env: Env, mu_grid, n_eval: int = 20, seed: int = 0,
             max_steps: Optional[int] = None) -> SweepResult:
    """``n_eval`` rollouts per grid point; rollout ``k`` at point ``g`` starts from ``make_rng(seed, g, k)``."""
    grid = np.asarray(mu_grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None]
    if grid.shape[0] == 0:
        raise ValueError("empty parameter grid")
    if n_eval < 1:
        raise ValueError("n_eval must be >= 1")
    G = grid.shape[0]
    mus = np.repeat(grid, n_eval, axis=0)
    rngs = [make_rng(seed, g, k) for g in range(G) for k in range(n_eval)]
    res = run_lanes(controller, env, mus, rngs, max_steps, record=controller.variant == UP_OSI)
    perf = res.performance.reshape(G, n_eval)
    mu_hat = None
    if controller.variant == UP_OSI:
        # time average over the steps each lane was alive, after the warm-up
        w = res.alive.astype(float)
        w[: controller.h] = 0.0
        z = res.mu_hat[..., : env.spec.mu_dim]
        zbar = np.einsum("tl,tld->ld", w, np.nan_to_num(z)) / np.maximum(w.sum(axis=0), 1.0)[:, None]
        mu_hat = env.target_to_mu(zbar).reshape(G, n_eval, -1)
    return SweepResult(controller.label, grid, perf, mu_hat, res.steps.reshape(G, n_eval), env.mu_bounds.copy())


def default_grid(env: Env, points: int = 25) -> np.ndarray:
    """Uniform grid over the training bounds (a tensor grid for several parameters)."""
    axes = [np.linspace(lo, hi, points) for lo, hi in env.mu_bounds]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


# ---------------------------------------------------------------------------
# Varying-friction track
# ---------------------------------------------------------------------------


@dataclass
class FrictionResult:
    mu_vary: np.ndarray  # (V,)
    distance: dict  # label -> (V, n_eval)
    region: tuple
    base_friction: float
    trace_mu: float
    trace: dict = field(default_factory=dict)  # time, mu_hat, mu_true, ankle_x, distance (one rollout)

    def rows(self):
        out = []
        for label, d in self.distance.items():
            for i, m in enumerate(self.mu_vary):
                out.append([label, m, float(d[i].mean()), float(d[i].std()), d.shape[1]])
        return out

    columns = ["controller", "mu_vary", "mean_distance", "std_distance", "n_eval"]

    def entry_time(self) -> Optional[float]:
        """Time at which the traced rollout's ankle first enters the region."""
        ax = self.trace.get("ankle_x")
        if ax is None:
            return None
        inside = np.flatnonzero(ax >= self.region[0])
        return None if inside.size == 0 else float(self.trace["time"][inside[0]])


def track_env(env: Hopper, region, base_friction: float, steps: int) -> Hopper:
    cfg = dataclasses.replace(env.config, track=(float(region[0]), float(region[1]), float(base_friction)),
                              max_steps=int(steps))
    return Hopper(cfg)


def varying_friction_experiment(controllers, hopper: Hopper, mu_vary_grid, n_eval: int = 5, seed: int = 0,
                                region=(20.0, 30.0), base_friction: float = 0.9, steps: int = 2000,
                                trace_mu: float = 0.55) -> FrictionResult:
    """Distance travelled on a track whose friction is ``mu_vary`` inside ``region``.

    Friction is ``base_friction`` elsewhere and is looked up at the ankle's
    horizontal position. Lanes are paired across controllers. For the
    UP_OSI controller a single rollout at ``trace_mu`` records the estimated
    and true friction over time.
    """
    env = track_env(hopper, region, base_friction, steps)
    grid = np.asarray(mu_vary_grid, dtype=float).reshape(-1)
    V = grid.size
    mus = np.repeat(grid, n_eval)[:, None]
    distance = {}
    for ctrl in controllers:
        rngs = [make_rng(seed, v, k) for v in range(V) for k in range(n_eval)]
        res = run_lanes(ctrl, env, mus, rngs, steps, record=False)
        distance[ctrl.label] = res.metric.reshape(V, n_eval)
    result = FrictionResult(grid, distance, tuple(region), base_friction, trace_mu)
    osi_ctrls = [c for c in controllers if c.variant == UP_OSI]
    if osi_ctrls:
        res = run_lanes(osi_ctrls[0], env, np.array([[trace_mu]]), [make_rng(seed, V, 0)], steps, record=True)
        T = res.mu_hat.shape[0]
        lo, hi = env.mu_bounds[0]
        to_phys = lambda z: lo + (z + 1.0) * 0.5 * (hi - lo)  # noqa: E731
        est = to_phys(res.mu_hat[:, 0, 0])
        est[: osi_ctrls[0].h] = np.nan
        result.trace = {
            "time": np.arange(T) * env.spec.dt * env.spec.frame_skip,
            "mu_hat": est,
            "mu_true": to_phys(res.truth[:, 0, 0]),
            "ankle_x": env.ankle_x(res.states[:T, 0]),
            "alive": res.alive[:, 0],
        }
    return result


# ---------------------------------------------------------------------------
# Extrapolation
# ---------------------------------------------------------------------------


def extrapolation_line(points: int = 13, length=(0.8, 1.4), mass=(1.0, 1.9)) -> np.ndarray:
    """Cart-pole parameters ``(tip mass, pole length)`` moving together along a line."""
    s = np.linspace(0.0, 1.0, points)
    return np.stack([mass[0] + s * (mass[1] - mass[0]), length[0] + s * (length[1] - length[0])], axis=1)


def extrapolation_experiment(controllers, cartpole: Env, n_eval: int = 20, seed: int = 0, points: int = 13,
                             length=(0.8, 1.4), mass=(1.0, 1.9)) -> dict:
    """Sweep every controller along the coupled out-of-range line (paired seeds)."""
    line = extrapolation_line(points, length, mass)
    return {c.label: sweep_mu(c, cartpole, line, n_eval, seed) for c in controllers}


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if np.isfinite(v) else ""
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        return float(v) if np.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def write_csv(path, columns, rows):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for r in rows:
                w.writerow([_cell(v) for v in r])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def write_json(path, obj):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(_jsonable(obj), indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def _safe(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in label).strip("_")


def emit_results(results: dict, out_dir, manifest: Optional[dict] = None, plots: bool = True) -> dict:
    """Write CSVs, plot-data JSON, PNG figures and a run manifest.

    ``results`` maps an experiment name to a dict of :class:`SweepResult` by
    controller label, a :class:`FrictionResult`, or a list of per-round
    dicts (identifier training). Returns ``{file name: path}``.

    Sweep CSV columns: ``mu_true, mean_perf, std_perf, mean_mu_hat,
    std_mu_hat, n_eval`` (per-component suffixes ``_j`` when the parameter
    has several components); estimates are in physical units and empty for
    controllers without an identifier.
    """
    out = Path(out_dir)
    files = {}

    def keep(p):
        files[p.name] = p

    for name, res in results.items():
        if isinstance(res, FrictionResult):
            keep(write_csv(out / f"{name}.csv", FrictionResult.columns, res.rows()))
            if res.trace:
                tr = res.trace
                rows = zip(tr["time"], tr["mu_true"], tr["mu_hat"], tr["ankle_x"], tr["alive"].astype(int))
                keep(write_csv(out / f"{name}_trace.csv", ["time", "mu_true", "mu_hat", "ankle_x", "alive"], rows))
            keep(write_json(out / f"{name}_plot.json", {
                "kind": "friction_track", "region": res.region, "base_friction": res.base_friction,
                "mu_vary": res.mu_vary, "distance": res.distance, "trace_mu": res.trace_mu,
                "trace": res.trace, "entry_time": res.entry_time()}))
            if plots:
                keep(plotting.plot_friction(res, out / f"{name}.png", title=name))
        elif isinstance(res, dict) and all(isinstance(v, SweepResult) for v in res.values()):
            series = []
            for label, sw in res.items():
                keep(write_csv(out / f"{name}_{_safe(label)}.csv", sw.columns(), sw.rows()))
                series.append({"label": label, "mu": sw.mu_grid, "mean_perf": sw.mean_perf,
                               "std_perf": sw.std_perf, "mean_mu_hat": sw.mean_mu_hat, "std_mu_hat": sw.std_mu_hat,
                               "perf": sw.perf, "steps": sw.steps})
            keep(write_json(out / f"{name}_plot.json", {"kind": "sweep", "series": series}))
            if plots:
                keep(plotting.plot_performance(res, out / f"{name}.png", title=name, threshold=1.0))
                for label, sw in res.items():
                    if sw.mu_hat is not None:
                        keep(plotting.plot_estimates(sw, out / f"{name}_{_safe(label)}_estimates.png",
                                                     title=f"{name}: {label}"))
        elif isinstance(res, list):
            cols = [k for k in res[0] if not isinstance(res[0][k], (list, tuple, np.ndarray))] if res else []
            keep(write_csv(out / f"{name}.csv", cols, [[r[c] for c in cols] for r in res]))
            keep(write_json(out / f"{name}_plot.json", {"kind": "rounds", "rows": res}))
            if plots and res and "up_osi_perf" in res[0]:
                keep(plotting.plot_rounds(res, out / f"{name}.png", title=name))
            elif plots and res and "mean_return" in res[0]:
                keep(plotting.plot_training(res, out / f"{name}.png", title=name))
        else:
            raise TypeError(f"cannot emit result {name!r} of type {type(res).__name__}")
    if manifest is not None:
        keep(write_manifest(out / "manifest.json", manifest, files))
    return files


def file_digest(path) -> str:
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def manifest_hash(manifest: dict) -> str:
    body = {k: v for k, v in manifest.items() if k != "manifest_hash"}
    return hashlib.sha256(json.dumps(_jsonable(body), sort_keys=True).encode()).hexdigest()


def write_manifest(path, manifest: dict, files: dict):
    m = dict(manifest)
    m["outputs"] = {name: file_digest(p) for name, p in sorted(files.items()) if name != "manifest.json"}
    m["manifest_hash"] = manifest_hash(m)
    return write_json(path, m)
