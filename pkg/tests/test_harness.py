import json

import numpy as np
import pytest

from uposi.core import ConfigError, make_rng
from uposi.envs import make_env
from uposi.harness import (
    REGULAR, UP_FIXED, UP_OSI, UP_TRUE, Controller, FrictionResult, default_grid, emit_results,
    extrapolation_line, manifest_hash, run_controller, run_lanes, sweep_mu, varying_friction_experiment,
)
from uposi.net import GaussianPolicy
from uposi.osi import ConstantOSI, OracleOSI, OSINetwork

from toy_env import PointMass


def up_policy(env, seed=0):
    return GaussianPolicy(env.spec.obs_dim, env.spec.target_dim, env.spec.act_dim, hidden=(8,), rng=make_rng(seed),
                          output_scale=1.0, obs_scale=env.obs_scale(), angle_dims=env.angle_obs_dims)


def regular_policy(env, seed=0):
    return GaussianPolicy(env.spec.obs_dim, 0, env.spec.act_dim, hidden=(8,), rng=make_rng(seed), output_scale=1.0)


def test_controller_invariants():
    env = PointMass()
    with pytest.raises(ConfigError):
        Controller("UP_MAGIC", up_policy(env))
    with pytest.raises(ConfigError):
        Controller(REGULAR, up_policy(env))
    with pytest.raises(ConfigError):
        Controller(UP_TRUE, regular_policy(env))
    with pytest.raises(ConfigError):
        Controller(UP_OSI, up_policy(env))
    with pytest.raises(ConfigError):
        Controller(UP_FIXED, up_policy(env))
    c = Controller.fixed(up_policy(env), env, [2.0])
    np.testing.assert_array_equal(c.fixed_target, [1.0])
    with pytest.raises(ConfigError):
        Controller.fixed(up_policy(make_env("cartpole")), make_env("cartpole"), [0.5, 0.5])


@pytest.mark.parametrize("task", ["dpend", "cartpole", "hopper"])
def test_oracle_osi_reproduces_up_true_exactly(task):
    env = make_env(task)
    pol = up_policy(env)
    mus = env.sample_mu(make_rng(0), 3)
    rngs = lambda: [make_rng(1, i) for i in range(3)]  # noqa: E731
    a = run_lanes(Controller(UP_TRUE, pol), env, mus, rngs(), max_steps=150)
    b = run_lanes(Controller(UP_OSI, pol, osi=OracleOSI()), env, mus, rngs(), max_steps=150)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.actions, b.actions)
    np.testing.assert_array_equal(a.total_reward, b.total_reward)
    np.testing.assert_array_equal(a.mu_hat, b.mu_hat)


def test_up_osi_warms_up_with_midpoint_then_uses_estimate():
    env = PointMass()
    pol = up_policy(env)
    res = run_controller(Controller(UP_OSI, pol, osi=ConstantOSI([0.7])), env, [1.0], max_steps=10)
    np.testing.assert_array_equal(res.mu_hat[:3, 0, 0], 0.0)
    np.testing.assert_array_equal(res.mu_hat[3:, 0, 0], 0.7)


def test_fixed_controller_feeds_constant():
    env = PointMass()
    res = run_controller(Controller.fixed(up_policy(env), env, [0.5]), env, [2.0], max_steps=5)
    np.testing.assert_array_equal(res.mu_hat[..., 0], -1.0)
    np.testing.assert_array_equal(res.truth[..., 0], 1.0)


class SpyEnv(PointMass):
    def target(self, state, mu):
        raise AssertionError("the regular controller must not see the parameters")


def test_regular_never_reads_parameters():
    env = SpyEnv()
    res = run_controller(Controller(REGULAR, regular_policy(env)), env, [1.0], max_steps=20)
    assert res.steps[0] == 20
    assert np.all(np.isnan(res.mu_hat))


def test_terminated_lanes_freeze():
    env = PointMass()
    pol = up_policy(env)
    # constant full push drives x past the limit
    pol.mean_net.weights[-1][:] = 0.0
    pol.mean_net.biases[-1][:] = 10.0
    res = run_controller(Controller(UP_TRUE, pol), env, [0.5], max_steps=50)
    assert res.terminated[0] and res.steps[0] < 50
    k = int(res.steps[0])
    assert np.all(res.states[k:] == res.states[k])


def test_sweep_pairs_seeds_and_reports_estimates():
    env = PointMass()
    pol = up_policy(env)
    grid = default_grid(env, 4)
    a = sweep_mu(Controller(UP_TRUE, pol), env, grid, n_eval=3, seed=2, max_steps=20)
    b = sweep_mu(Controller(UP_OSI, pol, osi=OracleOSI()), env, grid, n_eval=3, seed=2, max_steps=20)
    np.testing.assert_array_equal(a.perf, b.perf)
    assert a.mu_hat is None
    np.testing.assert_allclose(b.mean_mu_hat[:, 0], grid[:, 0], atol=1e-12)
    assert a.columns() == ["mu_true", "mean_perf", "std_perf", "mean_mu_hat", "std_mu_hat", "n_eval"]
    assert len(a.rows()) == 4 and a.rows()[0][-1] == 3
    np.testing.assert_allclose(a.mean_perf, a.perf.mean(axis=1))
    with pytest.raises(ValueError):
        sweep_mu(Controller(UP_TRUE, pol), env, np.zeros((0, 1)))
    with pytest.raises(ValueError):
        sweep_mu(Controller(UP_TRUE, pol), env, grid, n_eval=0)


def test_default_grid():
    env = make_env("dpend")
    g = default_grid(env, 25)
    assert g.shape == (25, 1) and g[0, 0] == -0.6 and g[-1, 0] == 0.6
    assert default_grid(make_env("cartpole"), 5).shape == (25, 2)


def test_sweep_multi_dim_columns():
    env = make_env("cartpole")
    sw = sweep_mu(Controller(UP_OSI, up_policy(env), osi=OracleOSI()), env, default_grid(env, 2), 1, max_steps=5)
    cols = sw.columns()
    assert cols[:2] == ["mu_true_0", "mu_true_1"] and "mean_mu_hat_1" in cols and cols[-1] == "n_eval"
    assert sw.mean_mu_hat.shape == (4, 2)


def test_extrapolation_line():
    line = extrapolation_line(13)
    np.testing.assert_allclose(line[0], [1.0, 0.8])
    np.testing.assert_allclose(line[-1], [1.9, 1.4])
    env = make_env("cartpole")
    assert not np.all((line >= env.mu_bounds[:, 0]) & (line <= env.mu_bounds[:, 1]))


def test_friction_experiment_small():
    env = make_env("hopper")
    pol = up_policy(env)
    osi = OSINetwork(env.spec.obs_dim, env.spec.act_dim, 1, hidden=(8,), rng=make_rng(0))
    ctrls = [Controller(UP_OSI, pol, osi=osi, label="UP-OSI"), Controller.fixed(pol, env, [0.9], label="fixed")]
    res = varying_friction_experiment(ctrls, env, [0.4, 0.6], n_eval=2, seed=0, region=(0.0, 0.05), steps=30,
                                      trace_mu=0.5)
    assert isinstance(res, FrictionResult)
    assert set(res.distance) == {"UP-OSI", "fixed"} and res.distance["fixed"].shape == (2, 2)
    tr = res.trace
    assert len(tr["time"]) == len(tr["mu_hat"]) == len(tr["mu_true"])
    assert np.all(np.isnan(tr["mu_hat"][:3]))
    assert set(np.round(tr["mu_true"], 6)) <= {0.5, 0.9}


def test_emit_results_writes_csv_png_and_manifest(tmp_path):
    env = PointMass()
    pol = up_policy(env)
    grid = default_grid(env, 3)
    sweeps = {"UP-true": sweep_mu(Controller(UP_TRUE, pol), env, grid, 2, max_steps=10),
              "UP-OSI": sweep_mu(Controller(UP_OSI, pol, osi=OracleOSI()), env, grid, 2, max_steps=10)}
    rounds = [{"iteration": 0, "heldout_mse": 0.1, "up_osi_perf": 0.5, "epoch_losses": [1.0]},
              {"iteration": 1, "heldout_mse": 0.05, "up_osi_perf": 0.6, "epoch_losses": [0.5]}]
    files = emit_results({"sweep": sweeps, "rounds": rounds}, tmp_path, manifest={"seed": 1})
    for name in ("sweep_UP-true.csv", "sweep_UP-OSI.csv", "sweep.png", "sweep_UP-OSI_estimates.png",
                 "sweep_plot.json", "rounds.csv", "rounds.png", "manifest.json"):
        assert name in files and (tmp_path / name).stat().st_size > 0
    header = (tmp_path / "sweep_UP-true.csv").read_text().splitlines()[0]
    assert header == "mu_true,mean_perf,std_perf,mean_mu_hat,std_mu_hat,n_eval"
    assert (tmp_path / "sweep.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["manifest_hash"] == manifest_hash(m)
    assert set(m["outputs"]) == set(files) - {"manifest.json"}
    # a second emission is byte-identical
    files2 = emit_results({"sweep": sweeps, "rounds": rounds}, tmp_path / "again", manifest={"seed": 1})
    for name in files:
        assert (tmp_path / name).read_bytes() == files2[name].read_bytes()
    with pytest.raises(TypeError):
        emit_results({"bad": 3}, tmp_path)
