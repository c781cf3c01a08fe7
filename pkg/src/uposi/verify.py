"""Self-checks against independent oracles: finite differences, brute-force sums, direct solves, physics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import make_rng
from .envs import make_env
from .envs.arm import ATTACHED, BVX, BVZ, BZ
from .net import DenseNetwork, GaussianPolicy, kl_diag_gaussian
from .trpo import Batch, compute_gae, conjugate_gradient, fisher_vector_product, surrogate_and_kl, surrogate_grad


@dataclass
class Check:
    name: str
    group: str  # "numeric" or "physics"
    value: float  # measured error (or violation)
    tol: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value <= self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3e} (tol {self.tol:.1e}) {self.detail}".rstrip()


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


def fd_gradient(f: Callable[[np.ndarray], float], x, eps: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        g[i] = (f(x + e) - f(x - e)) / (2.0 * eps)
    return g


# ---------------------------------------------------------------------------
# Numeric oracles
# ---------------------------------------------------------------------------


def check_dense_gradients(seed: int = 0) -> list[Check]:
    rng = make_rng(seed, 100)
    net = DenseNetwork([5, 8, 7, 3], dropout=0.2, rng=rng)
    x = rng.standard_normal((4, 5))
    G = rng.standard_normal((4, 3))
    theta = net.get_params()
    out = []
    for mode in ("eval", "train"):
        def loss(p, mode=mode):
            net.set_params(p)
            # the same dropout masks for every evaluation
            return float(np.sum(G * net.forward(x, mode=mode, rng=make_rng(seed, 101))))

        loss(theta)
        net.forward(x, mode=mode, rng=make_rng(seed, 101), record=True)
        g, gx = net.backward(G)
        out.append(Check(f"dense backward params ({mode})", "numeric", rel_err(g, fd_gradient(loss, theta)), 1e-4))
        net.set_params(theta)
        fx = lambda xx, mode=mode: float(np.sum(G * net.forward(xx.reshape(x.shape), mode=mode,  # noqa: E731
                                                                 rng=make_rng(seed, 101))))
        out.append(Check(f"dense backward input ({mode})", "numeric",
                         rel_err(gx.ravel(), fd_gradient(fx, x.ravel())), 1e-4))
    v = rng.standard_normal(theta.size)
    _, dm = net.jvp(x, v)
    fd = (net_out(net, theta + 1e-6 * v, x) - net_out(net, theta - 1e-6 * v, x)) / 2e-6
    net.set_params(theta)
    out.append(Check("dense forward-mode tangent", "numeric", rel_err(dm, fd), 1e-4))
    return out


def net_out(net: DenseNetwork, p, x):
    net.set_params(p)
    return net.forward(x)


def toy_batch(policy: GaussianPolicy, n: int, rng: np.random.Generator) -> Batch:
    """Minimal batch for objective and curvature checks (no environment)."""
    obs = rng.standard_normal((n, policy.obs_dim))
    pmu = rng.uniform(-1.0, 1.0, (n, policy.mu_dim))
    mean = policy.mean(obs, pmu if policy.mu_dim else None)
    acts = mean + policy.std * rng.standard_normal(mean.shape)
    logp = policy.log_prob(obs, pmu if policy.mu_dim else None, acts)
    z = np.zeros(n)
    return Batch(T=n, B=1, obs=obs, target=pmu, policy_mu=pmu, mu=pmu, actions=acts, logp_old=logp,
                 old_mean=mean, old_log_std=np.broadcast_to(policy.log_std, mean.shape).copy(), rewards=z,
                 terminated=z.astype(bool), ends=z.astype(bool), next_obs=obs, next_target=pmu,
                 episode_ids=np.zeros(n, dtype=int), advantages=rng.standard_normal(n))


def small_policy(rng) -> GaussianPolicy:
    return GaussianPolicy(obs_dim=2, mu_dim=1, act_dim=1, hidden=(4,), rng=rng, init_log_std=-0.3,
                          output_scale=1.0)


def check_policy_gradients(seed: int = 0) -> list[Check]:
    rng = make_rng(seed, 110)
    pol = GaussianPolicy(obs_dim=3, mu_dim=2, act_dim=2, hidden=(6, 5), rng=rng, init_log_std=-0.5,
                         output_scale=1.0)
    batch = toy_batch(pol, 16, rng)
    theta = pol.get_params()
    # move away from the sampling policy so the ratio is not identically 1
    theta = theta + 0.05 * rng.standard_normal(theta.size)
    pol.set_params(theta)
    g = surrogate_grad(pol, batch)

    def surr(p):
        pol.set_params(p)
        return surrogate_and_kl(None, pol, batch)[0]

    fd = fd_gradient(surr, theta)
    pol.set_params(theta)
    return [Check("policy surrogate gradient", "numeric", rel_err(g, fd), 1e-4)]


def brute_gae(r, v, vn, term, ends, gamma, lam):
    """Nested-sum advantages: ``A_t = sum_l (gamma lam)^l delta_{t+l}`` up to the segment end."""
    T = len(r)
    delta = [r[t] + gamma * vn[t] * (0.0 if term[t] else 1.0) - v[t] for t in range(T)]
    adv = np.zeros(T)
    for t in range(T):
        total, coef = 0.0, 1.0
        for k in range(t, T):
            total += coef * delta[k]
            if ends[k]:
                break
            coef *= gamma * lam
        adv[t] = total
    return adv


def check_gae(seed: int = 0) -> list[Check]:
    rng = make_rng(seed, 120)
    T, B = 40, 3
    r, v, vn = rng.standard_normal((3, T, B))
    term = rng.random((T, B)) < 0.05
    ends = term | (rng.random((T, B)) < 0.05)
    ends[-1] = True
    gamma, lam = 0.995, 0.97
    adv, _ = compute_gae(r, v, vn, term, ends, gamma, lam, normalize=False)
    err = max(float(np.max(np.abs(adv[:, b] - brute_gae(r[:, b], v[:, b], vn[:, b], term[:, b], ends[:, b],
                                                         gamma, lam)))) for b in range(B))
    return [Check("GAE vs nested sum", "numeric", err, 1e-10)]


def full_cov_kl(m1, s1, m2, s2) -> float:
    S1, S2 = np.diag(s1**2), np.diag(s2**2)
    S2i = np.linalg.inv(S2)
    d = m2 - m1
    k = m1.size
    return 0.5 * (np.trace(S2i @ S1) + d @ S2i @ d - k + math.log(np.linalg.det(S2) / np.linalg.det(S1)))


def check_kl(seed: int = 0) -> list[Check]:
    rng = make_rng(seed, 130)
    err = 0.0
    for _ in range(50):
        k = int(rng.integers(1, 6))
        m1, m2 = rng.standard_normal((2, k))
        s1, s2 = np.exp(0.5 * rng.standard_normal((2, k)))
        err = max(err, abs(float(kl_diag_gaussian(m1, s1, m2, s2)) - full_cov_kl(m1, s1, m2, s2)))
    m, s = rng.standard_normal((64, 3)), np.exp(rng.standard_normal((64, 3)))
    self_kl = float(np.max(np.abs(kl_diag_gaussian(m, s, m, s))))
    return [Check("diagonal KL vs full-covariance formula", "numeric", err, 1e-12),
            Check("self KL is exactly zero", "numeric", self_kl, 0.0)]


def check_cg(seed: int = 0) -> list[Check]:
    rng = make_rng(seed, 140)
    err = 0.0
    for _ in range(10):
        Q = rng.standard_normal((20, 20))
        A = Q @ Q.T + 0.5 * np.eye(20)
        b = rng.standard_normal(20)
        x = conjugate_gradient(lambda p: A @ p, b, iterations=60, tol=1e-14)
        err = max(err, rel_err(x, np.linalg.solve(A, b)))
    return [Check("conjugate gradient vs direct solve", "numeric", err, 1e-6)]


def check_fisher(seed: int = 0) -> list[Check]:
    rng = make_rng(seed, 150)
    pol = small_policy(rng)
    batch = toy_batch(pol, 32, rng)
    theta = pol.get_params()
    n = theta.size

    def kl(p):
        pol.set_params(p)
        return surrogate_and_kl(None, pol, batch)[1]

    # central second differences of the mean KL
    eps = 1e-4
    H = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            ei, ej = np.zeros(n), np.zeros(n)
            ei[i], ej[j] = eps, eps
            h = (kl(theta + ei + ej) - kl(theta + ei - ej) - kl(theta - ei + ej) + kl(theta - ei - ej)) / (4 * eps**2)
            H[i, j] = H[j, i] = h
    pol.set_params(theta)
    v = rng.standard_normal(n)
    fv = fisher_vector_product(pol, batch, v)
    return [Check(f"Fisher-vector product vs finite-difference KL Hessian ({n} params)", "numeric",
                  rel_err(fv, H @ v), 1e-3)]


# ---------------------------------------------------------------------------
# Physics oracles
# ---------------------------------------------------------------------------


def _energy_drift(task: str, state0, mu, seconds: float = 1.0, ref_dt: float = 1e-4) -> tuple[float, float]:
    """Largest energy deviation over ``seconds`` for the default step and a fine reference step.

    Both are relative to the initial energy; the first value compares the
    coarse trajectory's energy with the reference trajectory's at the same times.
    """
    env = make_env(task)
    fine = make_env(task, {"dt": ref_dt})
    n = int(round(seconds / env.spec.dt))
    ratio = int(round(env.spec.dt / ref_dt))
    zero = np.zeros(env.spec.act_dim)
    s, f = np.array(state0, dtype=float), np.array(state0, dtype=float)
    E0 = float(env.energy(s, mu))
    worst = worst_ref = 0.0
    for _ in range(n):
        s = env.step(s, zero, mu).next_state
        for _ in range(ratio):
            f = fine.step(f, zero, mu).next_state
        e, e_ref = float(env.energy(s, mu)), float(fine.energy(f, mu))
        worst = max(worst, abs(e - e_ref) / abs(E0))
        worst_ref = max(worst_ref, abs(e_ref - E0) / abs(E0))
    return worst, worst_ref


def check_energy() -> list[Check]:
    out = []
    cases = {
        "dpend": ([0.0, 0.4, -0.3, 0.2, 1.0, -0.5], [0.3]),
        "cartpole": ([0.0, 2.5, 0.3, 1.0, 2.5], [0.6, 0.5]),
    }
    for task, (s0, mu) in cases.items():
        drift, ref = _energy_drift(task, s0, np.array(mu))
        out.append(Check(f"{task} passive energy vs dt=1e-4 reference over 1 s", "physics", drift, 5e-3,
                         f"(reference drift {ref:.1e})"))
    return out


def check_ballistic_apex(v0: float = 3.0) -> list[Check]:
    env = make_env("arm")
    s = env.reset(np.array([0.5]), make_rng(0))
    s[ATTACHED] = 0.0
    s[BVX], s[BVZ] = 0.0, v0
    z0 = s[BZ]
    top = z0
    for _ in range(int(2 * v0 / (env.config.gravity * env.spec.dt)) + 10):
        s = env.step(s, np.zeros(2), np.array([0.5])).next_state
        top = max(top, s[BZ])
    expected = v0**2 / (2.0 * env.config.gravity)
    return [Check("released block apex vs v^2/(2g)", "physics", abs((top - z0) - expected), 1e-3,
                  f"(rise {top - z0:.5f} m)")]


def check_hopper_cone(seconds: float = 5.0, kp: float = 300.0, kd: float = 3.0) -> list[Check]:
    """Settle under a gentle joint hold; record the worst normal-force and cone violations."""
    env = make_env("hopper")
    mu = np.linspace(env.mu_bounds[0, 0], env.mu_bounds[0, 1], 4)[:, None]
    s = env.reset(mu, make_rng(0))
    n = int(round(seconds / env.spec.dt))
    worst_fn = worst_cone = 0.0
    for _ in range(n):
        a = -kp * s[:, 3:6] - kd * s[:, 9:12]
        r = env.step(s, a, mu)
        s = r.next_state
        fn, ft, f = r.info["normal_force"], r.info["tangential_force"], r.info["friction"]
        worst_fn = max(worst_fn, float(np.max(-fn)))
        worst_cone = max(worst_cone, float(np.max(np.abs(ft) - f[:, None] * fn)))
    support = float(np.mean(np.sum(r.info["normal_force"], axis=1)))
    return [Check("hopper settle: normal force >= 0", "physics", worst_fn, 0.0),
            Check("hopper settle: |f_t| <= mu f_n", "physics", worst_cone, 0.0,
                  f"(mean support {support:.1f} N)")]


NUMERIC = (check_dense_gradients, check_policy_gradients, check_gae, check_kl, check_cg, check_fisher)
PHYSICS = (check_energy, check_ballistic_apex, check_hopper_cone)


def run_checks(groups=("numeric", "physics")) -> list[Check]:
    fns = (NUMERIC if "numeric" in groups else ()) + (PHYSICS if "physics" in groups else ())
    out = []
    for fn in fns:
        out.extend(fn())
    return out


__all__ = ["Check", "run_checks", "brute_gae", "fd_gradient", "rel_err", "toy_batch"]
