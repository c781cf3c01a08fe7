"""Universal-policy training: TRPO over episodes with freshly sampled dynamics.

Every episode draws a new model parameter uniformly from its bounds and a
new initial state from the task's reset distribution; the policy sees the
normalized parameter vector next to the observation (or nothing extra in
the "regular" variant). Rollouts are collected on ``n_envs`` lanes stepped
in lock-step; a lane's episode continues across iterations and the value
baseline bootstraps the cut.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .core import ConfigError, Rollout, make_rng
from .envs.base import Env
from .net import Adam, DenseNetwork, GaussianPolicy, kl_diag_gaussian, log_prob_diag, save_network

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrpoConfig:
    iterations: int = 200
    samples_per_iteration: int = 30_000
    n_envs: int = 64
    kl_step: float = 0.01
    gamma: float = 0.995
    gae_lambda: float = 0.97
    cg_iterations: int = 10
    cg_damping: float = 0.1
    backtrack_coeff: float = 0.5
    backtrack_steps: int = 10
    hidden: tuple = (64, 64)
    init_log_std: float = 0.0
    baseline_hidden: tuple = (64, 64)
    baseline_epochs: int = 5
    baseline_batch: int = 256
    baseline_lr: float = 1e-3
    use_mu: bool = True  # False trains the "regular" policy without parameter input
    checkpoint_every: int = 50

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError("gae_lambda must lie in [0, 1]")
        if self.kl_step <= 0.0:
            raise ConfigError("kl_step must be positive")
        for name in ("iterations", "samples_per_iteration", "n_envs", "cg_iterations", "baseline_epochs",
                     "baseline_batch"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.backtrack_coeff < 1.0:
            raise ConfigError("backtrack_coeff must lie in (0, 1)")


def make_policy(env: Env, config: TrpoConfig, rng: np.random.Generator) -> GaussianPolicy:
    mu_dim = env.spec.target_dim if config.use_mu else 0
    return GaussianPolicy(env.spec.obs_dim, mu_dim, env.spec.act_dim, hidden=config.hidden, rng=rng,
                          init_log_std=config.init_log_std, obs_scale=env.obs_scale(),
                          angle_dims=env.angle_obs_dims)


# ---------------------------------------------------------------------------
# Rollout collection
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Time-major samples from ``B`` lanes over ``T`` steps (flattened to ``N = T * B``).

    ``actions`` are the sampled (unclipped) normalized actions, whose log
    density is ``logp_old``. ``ends`` marks the last step of an episode
    segment inside the batch (termination, horizon, or end of the batch);
    only ``terminated`` steps have zero continuation value.
    """

    T: int
    B: int
    obs: np.ndarray
    target: np.ndarray  # normalized parameter vector of the true dynamics
    policy_mu: np.ndarray  # what the policy was given ((N, 0) for the regular policy)
    mu: np.ndarray  # physical parameters
    actions: np.ndarray
    logp_old: np.ndarray
    old_mean: np.ndarray
    old_log_std: np.ndarray
    rewards: np.ndarray
    terminated: np.ndarray
    ends: np.ndarray
    next_obs: np.ndarray
    next_target: np.ndarray
    episode_ids: np.ndarray
    episode_returns: list = field(default_factory=list)
    episode_lengths: list = field(default_factory=list)
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.T * self.B

    def rollouts(self) -> list[Rollout]:
        """Split into per-episode segments (lane by lane, in time order)."""
        out = []
        ids = self.episode_ids.reshape(self.T, self.B)
        for b in range(self.B):
            lane = np.arange(self.T) * self.B + b
            for eid in np.unique(ids[:, b]):
                idx = lane[ids[:, b] == eid]
                out.append(Rollout(self.mu[idx[0]].copy(), self.obs[idx], self.actions[idx], self.rewards[idx],
                                   self.next_obs[idx], self.terminated[idx],
                                   extras={"episode_id": int(eid), "mu_per_step": self.mu[idx]}))
        return out


class LaneState:
    """Persistent lanes: current state, parameters and running episode stats."""

    def __init__(self, env: Env, n: int, rng: np.random.Generator, mu_sampler=None):
        self.env, self.n = env, n
        self.mu_sampler = mu_sampler or (lambda r, k: env.sample_mu(r, k))
        self.next_episode = 0
        self.mu = np.zeros((n, env.spec.mu_dim))
        self.state = np.zeros((n, env.spec.state_dim))
        self.ep_return = np.zeros(n)
        self.ep_length = np.zeros(n, dtype=np.int64)
        self.episode_id = np.zeros(n, dtype=np.int64)
        self.reset(np.arange(n), rng)

    def reset(self, lanes, rng):
        lanes = np.asarray(lanes)
        if lanes.size == 0:
            return
        self.mu[lanes] = self.mu_sampler(rng, lanes.size)
        self.state[lanes] = self.env.reset(self.mu[lanes], rng)
        self.ep_return[lanes] = 0.0
        self.ep_length[lanes] = 0
        self.episode_id[lanes] = self.next_episode + np.arange(lanes.size)
        self.next_episode += lanes.size


def collect_batch(policy: GaussianPolicy, env: Env, config: TrpoConfig, rng: np.random.Generator,
                  lanes: Optional[LaneState] = None) -> tuple[Batch, LaneState]:
    """Step all lanes until at least ``samples_per_iteration`` transitions are stored.

    A lane that terminates or reaches the horizon resamples both its model
    parameter and initial state before the next step.
    """
    if lanes is None:
        lanes = LaneState(env, config.n_envs, rng)
    B = lanes.n
    T = math.ceil(config.samples_per_iteration / B)
    horizon = env.spec.max_steps
    rec = {k: [] for k in ("obs", "target", "mu", "actions", "rewards", "terminated", "ends", "next_obs",
                           "next_target", "episode_ids")}
    ep_returns, ep_lengths = [], []
    for t in range(T):
        obs = env.observe(lanes.state)
        target = env.target(lanes.state, lanes.mu)
        pmu = target if policy.mu_dim else None
        a = policy.act(obs, pmu, rng=rng)
        res = env.step(lanes.state, env.scale_action(a), lanes.mu)
        lanes.ep_return += res.reward
        lanes.ep_length += 1
        timeout = lanes.ep_length >= horizon
        done = res.terminated | timeout
        end = done | (t == T - 1)
        rec["obs"].append(obs)
        rec["target"].append(target)
        rec["mu"].append(lanes.mu.copy())
        rec["actions"].append(a)
        rec["rewards"].append(res.reward)
        rec["terminated"].append(res.terminated.copy())
        rec["ends"].append(end)
        rec["next_obs"].append(env.observe(res.next_state))
        rec["next_target"].append(env.target(res.next_state, lanes.mu))
        rec["episode_ids"].append(lanes.episode_id.copy())
        lanes.state = res.next_state
        finished = np.flatnonzero(done)
        ep_returns.extend(lanes.ep_return[finished].tolist())
        ep_lengths.extend(lanes.ep_length[finished].tolist())
        lanes.reset(finished, rng)

    cat = {k: np.concatenate(vals, axis=0) for k, vals in rec.items()}
    obs, target = cat["obs"], cat["target"]
    pmu = target if policy.mu_dim else np.zeros((len(obs), 0))
    mean = policy.mean(obs, target if policy.mu_dim else None)
    batch = Batch(
        T=T, B=B, obs=obs, target=target, policy_mu=pmu, mu=cat["mu"], actions=cat["actions"],
        logp_old=log_prob_diag(cat["actions"], mean, policy.log_std), old_mean=mean,
        old_log_std=policy.log_std.copy(), rewards=cat["rewards"], terminated=cat["terminated"],
        ends=cat["ends"], next_obs=cat["next_obs"], next_target=cat["next_target"],
        episode_ids=cat["episode_ids"], episode_returns=ep_returns, episode_lengths=ep_lengths,
    )
    return batch, lanes


# ---------------------------------------------------------------------------
# Advantages
# ---------------------------------------------------------------------------


def compute_gae(rewards, values, next_values, terminated, ends, gamma: float, lam: float,
                normalize: bool = True):
    """Generalized advantage estimates and discounted returns.

    Arrays are ``(T,)`` for one trajectory or ``(T, B)`` for lanes.
    ``delta_t = r_t + gamma * V(s_{t+1}) * (1 - terminated_t) - V(s_t)`` and
    ``A_t = delta_t + gamma * lam * A_{t+1}`` within a segment (the recursion
    restarts after every ``ends`` step). Returns are discounted reward sums,
    bootstrapped with ``V`` where a segment is cut without terminating.
    """
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        raise ValueError("cannot compute advantages of an empty batch")
    v = np.asarray(values, dtype=float)
    vn = np.asarray(next_values, dtype=float)
    term = np.asarray(terminated, dtype=bool)
    end = np.asarray(ends, dtype=bool)
    cont = 1.0 - term
    delta = r + gamma * vn * cont - v
    adv = np.zeros_like(r)
    ret = np.zeros_like(r)
    a_next = np.zeros(r.shape[1:])
    g_next = np.zeros(r.shape[1:])
    for t in range(r.shape[0] - 1, -1, -1):
        a_next = np.where(end[t], delta[t], delta[t] + gamma * lam * a_next)
        g_next = np.where(end[t], r[t] + gamma * cont[t] * vn[t], r[t] + gamma * g_next)
        adv[t] = a_next
        ret[t] = g_next
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, ret


class ValueBaseline:
    """State-value regressor on ``[policy features, normalized parameters]``.

    Targets are divided by a scale fixed from the first batch so the network
    works with O(1) values.
    """

    def __init__(self, policy: GaussianPolicy, target_dim: int, hidden: Sequence[int] = (64, 64),
                 rng: Optional[np.random.Generator] = None, lr: float = 1e-3, epochs: int = 5,
                 batch_size: int = 256):
        self.policy = policy
        self.net = DenseNetwork([policy.feature_dim + target_dim, *hidden, 1], rng=rng)
        self.opt = Adam(self.net.n_params, lr=lr)
        self.epochs, self.batch_size = epochs, batch_size
        self.scale: Optional[float] = None

    def inputs(self, obs, target):
        return np.concatenate([self.policy.features(obs), target], axis=-1)

    def predict(self, obs, target) -> np.ndarray:
        return self.net.forward(self.inputs(obs, target))[:, 0] * (self.scale or 1.0)

    def fit(self, obs, target, returns, rng: np.random.Generator) -> float:
        """Minibatch least squares; returns the final-epoch mean squared error (scaled units)."""
        x = self.inputs(obs, target)
        if self.scale is None:
            self.scale = float(max(np.std(returns), 1e-6))
        y = np.asarray(returns, dtype=float)[:, None] / self.scale
        n = x.shape[0]
        loss = float("nan")
        for _ in range(self.epochs):
            perm = rng.permutation(n)
            total = 0.0
            for i in range(0, n, self.batch_size):
                idx = perm[i:i + self.batch_size]
                pred = self.net.forward(x[idx], record=True)
                err = pred - y[idx]
                total += float(np.sum(err**2))
                g, _ = self.net.backward(2.0 * err / len(idx))
                self.net.set_params(self.opt.step(self.net.get_params(), g))
            loss = total / n
        return loss


# ---------------------------------------------------------------------------
# TRPO step
# ---------------------------------------------------------------------------


def _policy_inputs(policy: GaussianPolicy, batch: Batch):
    return policy.inputs(batch.obs, batch.policy_mu if policy.mu_dim else None)


def surrogate_and_kl(policy_old: Optional[GaussianPolicy], policy_new: GaussianPolicy, batch: Batch,
                     advantages=None) -> tuple[float, float]:
    """Importance-weighted surrogate ``mean(ratio * A)`` and mean ``KL(old || new)``.

    The old distribution is taken from the batch (``old_mean``/``old_log_std``/
    ``logp_old``); ``policy_old`` is accepted for symmetry and unused when the
    batch carries those values.
    """
    adv = batch.advantages if advantages is None else advantages
    if adv is None:
        raise ValueError("batch has no advantages")
    mean = policy_new.mean_net.forward(_policy_inputs(policy_new, batch))
    logp = log_prob_diag(batch.actions, mean, policy_new.log_std)
    surr = float(np.mean(np.exp(logp - batch.logp_old) * adv))
    kl = kl_diag_gaussian(batch.old_mean, np.exp(batch.old_log_std), mean, np.exp(policy_new.log_std))
    return surr, float(np.mean(kl))


def surrogate_grad(policy: GaussianPolicy, batch: Batch, advantages=None) -> np.ndarray:
    adv = batch.advantages if advantages is None else advantages
    N = len(adv)
    mean = policy.mean_net.forward(_policy_inputs(policy, batch), record=True)
    var = np.exp(2.0 * policy.log_std)
    diff = batch.actions - mean
    logp = log_prob_diag(batch.actions, mean, policy.log_std)
    w = np.exp(logp - batch.logp_old) * adv / N
    g_mean = w[:, None] * diff / var
    g_net, _ = policy.mean_net.backward(g_mean)
    g_ls = np.sum(w[:, None] * (diff**2 / var - 1.0), axis=0)
    return np.concatenate([g_net, g_ls])


def fisher_vector_product(policy: GaussianPolicy, batch: Batch, v, damping: float = 0.0) -> np.ndarray:
    """``(F + damping I) v`` with ``F`` the Hessian of the mean KL at the current policy.

    For a Gaussian with state-independent ``log_std`` the KL Hessian is exact in
    Gauss-Newton form: ``J^T diag(1/sigma^2) J / N`` for the mean network and
    ``2 I`` for ``log_std``.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (policy.n_params,):
        raise ValueError(f"vector has shape {v.shape}, expected ({policy.n_params},)")
    n_net = policy.mean_net.n_params
    x = _policy_inputs(policy, batch)
    _, dm = policy.mean_net.jvp(x, v[:n_net])
    policy.mean_net.forward(x, record=True)
    u = dm * np.exp(-2.0 * policy.log_std) / x.shape[0]
    f_net, _ = policy.mean_net.backward(u)
    f_ls = 2.0 * v[n_net:]
    return np.concatenate([f_net, f_ls]) + damping * v


def conjugate_gradient(matvec: Callable[[np.ndarray], np.ndarray], b, iterations: int = 10,
                       tol: float = 1e-10) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive (semi)definite ``A`` given as ``matvec``."""
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    bnorm = math.sqrt(float(b @ b))
    if bnorm == 0.0:
        return x
    for _ in range(iterations):
        Ap = matvec(p)
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            break
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        rr_new = float(r @ r)
        if math.sqrt(rr_new) <= tol * bnorm:
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


@dataclass
class StepInfo:
    accepted: bool
    surrogate_before: float
    surrogate_after: float
    mean_kl: float
    step_fraction: float
    grad_norm: float
    message: str = ""


def trpo_update(policy: GaussianPolicy, batch: Batch, config: TrpoConfig) -> StepInfo:
    """Natural-gradient step with a KL trust region, applied to ``policy`` in place."""
    theta0 = policy.get_params()
    surr0, _ = surrogate_and_kl(None, policy, batch)
    g = surrogate_grad(policy, batch)
    gnorm = float(np.linalg.norm(g))
    if not np.all(np.isfinite(g)):
        return StepInfo(False, surr0, surr0, 0.0, 0.0, gnorm, "non-finite gradient")
    if gnorm == 0.0:
        return StepInfo(False, surr0, surr0, 0.0, 0.0, 0.0, "zero gradient")
    fvp = lambda v: fisher_vector_product(policy, batch, v, config.cg_damping)  # noqa: E731
    s = conjugate_gradient(fvp, g, config.cg_iterations)
    sHs = float(s @ fvp(s))
    if not (np.isfinite(sHs) and sHs > 0.0):
        return StepInfo(False, surr0, surr0, 0.0, 0.0, gnorm, "non-positive curvature")
    full = math.sqrt(2.0 * config.kl_step / sHs) * s
    frac = 1.0
    for _ in range(config.backtrack_steps):
        policy.set_params(theta0 + frac * full)
        surr, kl = surrogate_and_kl(None, policy, batch)
        if np.isfinite(surr) and np.isfinite(kl) and kl <= config.kl_step and surr > surr0:
            assert kl <= config.kl_step
            return StepInfo(True, surr0, surr, kl, frac, gnorm)
        frac *= config.backtrack_coeff
    policy.set_params(theta0)
    return StepInfo(False, surr0, surr0, 0.0, 0.0, gnorm, "line search failed")


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

LOG_FIELDS = ["iteration", "samples", "episodes", "mean_return", "mean_length", "mean_kl", "surrogate",
              "entropy", "accepted", "baseline_loss"]


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 10)) if np.isfinite(v) else ""
    return v


def train_up(env: Env, config: TrpoConfig, seed: int, out_dir=None, policy: Optional[GaussianPolicy] = None,
             callback: Optional[Callable[[int, GaussianPolicy, dict], None]] = None):
    """Run ``config.iterations`` of collect -> baseline fit -> GAE -> TRPO step.

    Returns ``(policy, history)``. With ``out_dir`` a CSV log (``train_log.csv``)
    and periodic checkpoints (``policy_iterNNNN.bin``, ``policy.bin``) are written.
    """
    rng_init = make_rng(seed, 0)
    policy = policy if policy is not None else make_policy(env, config, rng_init)
    baseline = ValueBaseline(policy, env.spec.target_dim, config.baseline_hidden, rng=rng_init,
                             lr=config.baseline_lr, epochs=config.baseline_epochs, batch_size=config.baseline_batch)
    rng_roll = make_rng(seed, 1)
    rng_fit = make_rng(seed, 2)
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "train_log.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
    history = []
    lanes = None
    samples = 0
    try:
        for it in range(config.iterations):
            batch, lanes = collect_batch(policy, env, config, rng_roll, lanes)
            samples += len(batch)
            T, B = batch.T, batch.B
            v = baseline.predict(batch.obs, batch.target).reshape(T, B)
            vn = baseline.predict(batch.next_obs, batch.next_target).reshape(T, B)
            adv, ret = compute_gae(batch.rewards.reshape(T, B), v, vn, batch.terminated.reshape(T, B),
                                   batch.ends.reshape(T, B), config.gamma, config.gae_lambda)
            batch.advantages, batch.returns = adv.reshape(-1), ret.reshape(-1)
            info = trpo_update(policy, batch, config)
            bl_loss = baseline.fit(batch.obs, batch.target, batch.returns, rng_fit)
            row = {
                "iteration": it, "samples": samples, "episodes": len(batch.episode_returns),
                "mean_return": float(np.mean(batch.episode_returns)) if batch.episode_returns else float("nan"),
                "mean_length": float(np.mean(batch.episode_lengths)) if batch.episode_lengths else float("nan"),
                "mean_kl": info.mean_kl, "surrogate": info.surrogate_after, "entropy": policy.entropy(),
                "accepted": int(info.accepted), "baseline_loss": bl_loss,
            }
            history.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[k]) for k in LOG_FIELDS])
                fh.flush()
            log.info("iter %d return %.2f len %.1f kl %.4f %s", it, row["mean_return"], row["mean_length"],
                     info.mean_kl, info.message)
            if out is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                save_network(policy, out / f"policy_iter{it + 1:04d}.bin", meta={"iteration": it + 1})
            if callback is not None:
                callback(it, policy, row)
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        save_network(policy, out / "policy.bin", meta={"iteration": config.iterations, "config": asdict(config)})
    return policy, history
