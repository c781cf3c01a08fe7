import dataclasses
import math

import numpy as np
import pytest

from uposi.core import ConfigError, make_rng
from uposi.envs import DT, TASKS, make_env
from uposi.envs.arm import ATTACHED, BVX, BVZ, BX, BZ, CLOCK
from uposi.verify import check_ballistic_apex, check_energy, check_hopper_cone

MID = {"dpend": [0.0], "arm": [0.5], "hopper": [0.6], "cartpole": [0.5, 0.5]}


@pytest.mark.parametrize("task", sorted(TASKS))
def test_spec_basics(task):
    env = make_env(task)
    s = env.spec
    assert s.dt == DT == 0.002
    assert s.max_steps == 1000
    assert min(s.obs_dim, s.act_dim, s.mu_dim) > 0
    st = env.reset(np.array(MID[task]), make_rng(0))
    assert env.observe(st).shape == (s.obs_dim,)
    assert env.target(st, np.array(MID[task])).shape == (s.target_dim,)


@pytest.mark.parametrize("task", sorted(TASKS))
def test_step_deterministic(task):
    env = make_env(task)
    mu = np.array(MID[task])
    s0 = env.reset(mu, make_rng(3))
    np.testing.assert_array_equal(s0, env.reset(mu, make_rng(3)))
    a = 0.3 * env.spec.action_bounds[:, 1]
    r1, r2 = env.step(s0, a, mu), env.step(s0, a, mu)
    np.testing.assert_array_equal(r1.next_state, r2.next_state)
    assert r1.reward == r2.reward and np.isfinite(r1.reward)


@pytest.mark.parametrize("task", sorted(TASKS))
def test_batched_step_matches_single(task):
    env = make_env(task)
    mus = np.array([MID[task], MID[task]]) * np.array([[1.0], [0.9]])
    s = env.reset(mus, make_rng(4))
    a = np.stack([0.2 * env.spec.action_bounds[:, 1], -0.1 * env.spec.action_bounds[:, 1]])
    batch = env.step(s, a, mus)
    for i in range(2):
        single = env.step(s[i], a[i], mus[i])
        np.testing.assert_allclose(batch.next_state[i], single.next_state, rtol=0, atol=1e-12)


def test_non_finite_state_rejected():
    env = make_env("dpend")
    with pytest.raises(FloatingPointError):
        env.step(np.full(6, np.nan), np.zeros(1), np.zeros(1))


def test_unknown_task_and_override():
    with pytest.raises(ConfigError):
        make_env("walker")
    with pytest.raises(ConfigError):
        make_env("dpend", {"no_such_field": 1})
    assert make_env("dpend", {"cart_limit": 3.0}).config.cart_limit == 3.0


# -- double pendulum -----------------------------------------------------------


def test_dpend_constants_and_reward():
    env = make_env("dpend")
    c = env.config
    assert (c.k1, c.k2, c.alive_bonus) == (10.0, 1.0, 10.0)
    assert c.pole_lengths == (0.5, 0.5) and c.mu_bounds == ((-0.6, 0.6),)
    assert env.reward(np.zeros(6), np.zeros(1)) == 10.0
    assert not env.terminated(np.zeros(6))
    # sigma = |0.3| + |-0.2| = 0.5, cart at -1
    s = np.array([-1.0, 0.3, -0.2, 0.0, 0.0, 0.0])
    assert env.reward(s, np.zeros(1)) == pytest.approx(-10 * 0.25 - 1.0 + 10.0)
    # angles are wrapped before use: a full turn is upright again
    assert env.reward(np.array([0.0, 2 * math.pi, 0.0, 0, 0, 0]), np.zeros(1)) == pytest.approx(10.0)


def test_dpend_termination_thresholds():
    env = make_env("dpend")
    assert env.config.cart_limit == 5.0 and env.config.angle_limit == 0.5 * math.pi
    assert env.terminated(np.array([5.0, 0, 0, 0, 0, 0]))
    assert not env.terminated(np.array([4.999, 0, 0, 0, 0, 0]))
    assert env.terminated(np.array([0.0, 0.25 * math.pi, -0.25 * math.pi, 0, 0, 0]))
    assert not env.terminated(np.array([0.0, 0.25 * math.pi, -0.24 * math.pi, 0, 0, 0]))


def test_dpend_initial_perturbation():
    env = make_env("dpend")
    s = env.reset(np.zeros((500, 1)), make_rng(1))
    assert np.all(np.abs(s) <= 0.01) and np.abs(s).max() > 0.009


def test_dpend_mirror_symmetry_at_zero_offset():
    env = make_env("dpend")
    mu = np.zeros(1)
    s = env.reset(mu, make_rng(2))
    m = -s
    for k in range(200):
        a = np.array([30.0 * math.sin(0.05 * k)])
        s, m = env.step(s, a, mu).next_state, env.step(m, -a, mu).next_state
    np.testing.assert_allclose(s, -m, atol=1e-10)


def test_dpend_offset_equilibrium_is_static():
    env = make_env("dpend")
    for mu in (-0.6, 0.3, 0.6):
        s = np.array([0.0, float(env.equilibrium_tilt(mu)), 0.0, 0.0, 0.0, 0.0])
        nxt = env.step(s, np.zeros(1), np.array([mu])).next_state
        assert np.max(np.abs(nxt[3:])) < 1e-10


def test_energy_conservation_oracle():
    for c in check_energy():
        assert c.passed, c.line()


# -- cart-pole ------------------------------------------------------------------


def test_cartpole_constants_and_reward():
    env = make_env("cartpole")
    c = env.config
    assert (c.k1, c.k2, c.w, c.v, c.a, c.alive_bonus) == (1.0, 0.2, 1.0, 1.0, 0.1, 10.0)
    assert c.mu_bounds == ((0.1, 1.0), (0.2, 0.8))
    s = np.zeros(5)
    assert env.reward(s, np.zeros(1)) == pytest.approx(10.0 - math.log(0.1), abs=1e-12)
    assert env.reward(s, np.zeros(1)) == pytest.approx(12.302585, abs=1e-6)
    s[0] = 1.0
    assert env.reward(s, np.zeros(1)) == pytest.approx(10.0 - math.log(0.1) - 0.2)


def test_cartpole_force_clamp():
    env = make_env("cartpole")
    np.testing.assert_array_equal(env.clamp_action(np.array([100.0])), [40.0])
    np.testing.assert_array_equal(env.clamp_action(np.array([-100.0])), [-40.0])
    mu = np.array([0.5, 0.5])
    s = env.reset(mu, make_rng(0))
    np.testing.assert_array_equal(env.step(s, np.array([100.0]), mu).next_state,
                                  env.step(s, np.array([40.0]), mu).next_state)


def test_cartpole_termination_thresholds():
    env = make_env("cartpole")
    assert env.config.rotation_limit == 4 * math.pi and env.config.cart_limit == 2.0
    s = np.array([0.0, math.pi, 0.0, 0.0, math.pi])
    assert not env.terminated(s)
    s[1] = math.pi + 4 * math.pi + 1e-6
    assert env.terminated(s)
    s = np.array([2.0001, math.pi, 0.0, 0.0, math.pi])
    assert env.terminated(s)
    s[0] = 2.0
    assert not env.terminated(s)


def test_cartpole_reset_hangs_down_and_observes_positions():
    env = make_env("cartpole")
    s = env.reset(np.tile([0.5, 0.5], (400, 1)), make_rng(0))
    assert np.all(np.abs(np.abs(s[:, 1]) - math.pi) < 0.03)
    assert set(np.sign(s[:, 1]).tolist()) == {-1.0, 1.0}
    assert (s[:, 1] - math.pi * np.sign(s[:, 1])).std() == pytest.approx(0.005, rel=0.15)
    assert env.spec.obs_dim == 2
    np.testing.assert_array_equal(env.observe(s[0]), s[0, :2])


def test_cartpole_target_includes_velocities():
    env = make_env("cartpole")
    s = np.array([0.0, 3.0, 5.0, -10.0, 3.0])
    np.testing.assert_allclose(env.target(s, np.array([1.0, 0.2])), [1.0, -1.0, 1.0, -1.0])


@pytest.mark.parametrize("mu", [(1.0, 0.8), (0.6, 0.5), (1.0, 0.3)])
def test_cartpole_small_oscillation_period(mu):
    """Linearized hanging period with a free cart.

    With ``S = m_p L/2 + m_t L`` and ``J = m_p L^2/3 + m_t L^2`` about the
    pivot, eliminating the cart gives ``omega^2 = S g / (J - S^2 / M)`` with
    ``M`` the total mass, i.e. a simple pendulum of length ``L_eff = (J - S^2/M) / S``.
    """
    env = make_env("cartpole")
    c = env.config
    m_t, L = mu
    S = c.pole_mass * L / 2 + m_t * L
    J = c.pole_mass * L**2 / 3 + m_t * L**2
    M = c.cart_mass + c.pole_mass + m_t
    L_eff = (J - S**2 / M) / S
    period = 2 * math.pi * math.sqrt(L_eff / c.gravity)
    s = np.array([0.0, math.pi + 0.02, 0.0, 0.0, math.pi])
    crossings, prev = [], s[1] - math.pi
    for k in range(1, int(4 * period / DT)):
        s = env.step(s, np.zeros(1), np.array(mu)).next_state
        dev = s[1] - math.pi
        if prev > 0 >= dev:
            crossings.append((k - 1 + prev / (prev - dev)) * DT)
        prev = dev
    measured = np.mean(np.diff(crossings))
    assert measured == pytest.approx(period, rel=0.01)


# -- arm ----------------------------------------------------------------------------


def test_arm_constants_and_reward():
    env = make_env("arm")
    c = env.config
    assert (c.k1, c.k2, c.k3, c.h_target, c.alive_bonus) == (10.0, 1e-5, 1e-3, 2.0, 35.0)
    s = np.zeros(10)
    s[BZ] = 2.0
    assert env.reward(s, np.zeros(2)) == 35.0
    s[BZ] = 2.5
    assert env.reward(s, np.zeros(2)) == 35.0
    s[BZ] = 1.0
    assert env.reward(s, np.zeros(2)) == pytest.approx(25.0)
    s[2:4] = [1.0, 2.0]
    assert env.reward(s, np.array([10.0, 20.0])) == pytest.approx(25.0 - 1e-5 * 500 - 1e-3 * 5)


def test_arm_termination_thresholds():
    env = make_env("arm")
    assert env.config.floor_limit == -0.2 and env.config.horizontal_limit == 0.8
    s = np.zeros(10)
    s[BZ] = -0.2
    assert not env.terminated(s)
    s[BZ] = -0.2001
    assert env.terminated(s)
    s[BZ], s[BX] = 1.0, 0.8001
    assert env.terminated(s)
    s[BX] = -0.8
    assert not env.terminated(s)


def test_arm_starts_pointing_down_holding_block():
    env = make_env("arm")
    s = env.reset(np.array([0.5]), make_rng(0))
    assert abs(s[0] - math.pi) <= 0.01 and s[ATTACHED] == 1.0
    # gripper below the shoulder by the arm length
    assert s[BZ] == pytest.approx(env.config.shoulder_height - sum(env.config.link_lengths), abs=1e-3)


def test_arm_block_follows_gripper_and_timed_release():
    env = make_env("arm", {"release_mode": "timed", "max_attach_steps": 20})
    mu = np.array([0.5])
    s = env.reset(mu, make_rng(0))
    for k in range(25):
        s = env.step(s, np.array([30.0, 10.0]), mu).next_state
        if k < 19:
            pos, vel = env.gripper(s[None, :2], s[None, 2:4])
            np.testing.assert_allclose(s[BX:BZ + 1], pos[0], atol=1e-12)
            assert s[ATTACHED] == 1.0
    assert s[ATTACHED] == 0.0 and s[CLOCK] == 20


def test_arm_free_block_is_ballistic():
    for c in check_ballistic_apex(3.0) + check_ballistic_apex(1.0):
        assert c.passed, c.line()
    env = make_env("arm")
    s = env.reset(np.array([0.5]), make_rng(0))
    s[ATTACHED], s[BVX], s[BVZ] = 0.0, 0.5, 0.0
    x0 = s[BX]
    for _ in range(100):
        s = env.step(s, np.zeros(2), np.array([0.5])).next_state
    assert s[BX] == pytest.approx(x0 + 0.5 * 100 * DT)
    assert s[BVZ] == pytest.approx(-env.config.gravity * 100 * DT)


def test_arm_heavier_block_needs_more_effort():
    env = make_env("arm", {"release_mode": "timed"})
    light, heavy = np.array([0.1]), np.array([1.0])
    s = env.reset(light, make_rng(0))
    a = np.array([40.0, 20.0])
    sl = env.step(s, a, light).next_state
    sh = env.step(s, a, heavy).next_state
    assert abs(sl[2]) > abs(sh[2])


# -- hopper ---------------------------------------------------------------------


def test_hopper_constants_and_reward():
    env = make_env("hopper")
    c = env.config
    assert (c.k1, c.k2, c.alive_bonus) == (1.0, 0.002, 3.0)
    assert c.mu_bounds == ((0.3, 1.0),)
    assert (c.contact_stiffness, c.contact_damping) == (2e5, 2e3)
    s = env.reset(np.array([0.6]), make_rng(0))
    s[6:] = 0.0
    assert env.reward(s, np.zeros(3)) == 3.0
    s[6] = 0.5
    assert env.reward(s, np.zeros(3)) == 3.5


def test_hopper_termination_thresholds():
    env = make_env("hopper")
    s = env.reset(np.array([0.6]), make_rng(0))
    assert not env.terminated(s)
    h = env.standing_height
    t = s.copy()
    t[1] = 0.8 * h - 1e-6
    assert env.terminated(t)
    t = s.copy()
    t[2] = 1.0 + 1e-6
    assert env.terminated(t)
    t[2] = -1.0 - 1e-6
    assert env.terminated(t)


def test_hopper_observation_translation_invariant():
    env = make_env("hopper")
    s = env.reset(np.array([0.6]), make_rng(0))
    t = s.copy()
    t[0] += 7.3
    np.testing.assert_array_equal(env.observe(s), env.observe(t))
    assert env.spec.obs_dim == s.size - 1


def test_hopper_settles_within_friction_cone():
    for c in check_hopper_cone(seconds=5.0):
        assert c.passed, c.line()


def test_hopper_dropped_settles_shallow():
    env = make_env("hopper")
    mu = np.array([0.9])
    s = env.reset(mu, make_rng(0))
    s[1] += 0.05
    for _ in range(1500):
        r = env.step(s, -300.0 * s[3:6] - 3.0 * s[9:12], mu)
        s = r.next_state
    pen = r.info["penetration"]
    assert 0.0 < pen.max() <= 2e-3
    # static support carries the weight: sum f_n = m g
    total_mass = sum(env.config.link_masses)
    assert r.info["normal_force"].sum() == pytest.approx(total_mass * env.config.gravity, rel=0.02)


def test_hopper_track_friction_lookup():
    env = make_env("hopper", {"track": (1.0, 2.0, 0.9)})
    s = env.reset(np.array([0.4]), make_rng(0))
    assert env.friction(s, np.array([0.4])) == 0.9
    ax = float(env.ankle_x(s[None])[0])
    t = s.copy()
    t[0] += 1.5 - ax
    assert env.friction(t, np.array([0.4])) == pytest.approx(0.4)
    lo, hi = env.mu_bounds[0]
    assert env.target(t, np.array([0.4]))[0] == pytest.approx(2 * (0.4 - lo) / (hi - lo) - 1)


def test_hopper_sliding_respects_cone():
    """Push the torso sideways hard enough to slide; the clamp holds every step."""
    env = make_env("hopper")
    mu = np.array([[0.3], [1.0]])
    s = env.reset(mu, make_rng(0))
    s[:, 6] = 2.0
    worst = 0.0
    for _ in range(200):
        r = env.step(s, -300.0 * s[:, 3:6] - 3.0 * s[:, 9:12], mu)
        s = r.next_state
        fn, ft = r.info["normal_force"], r.info["tangential_force"]
        assert np.all(fn >= 0)
        worst = max(worst, float(np.max(np.abs(ft) - mu * fn)))
    assert worst <= 0.0
