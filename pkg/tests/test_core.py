import numpy as np
import pytest

from uposi.core import (
    HISTORY_LEN, ConfigError, HistoryBuffer, HistorySegment, ModelParams, Rollout, Transition, denormalize,
    denormalize_mu, flatten_history, history_dim, history_push, make_rng, normalize, normalize_mu,
)


def test_normalize_maps_bounds_to_unit_interval():
    b = [[-0.6, 0.6]]
    assert normalize([-0.6], b)[0] == -1.0
    assert normalize([0.6], b)[0] == 1.0
    assert normalize([0.0], b)[0] == 0.0


def test_normalize_multi_dim_and_roundtrip(rng):
    b = np.array([[0.1, 1.0], [0.2, 0.8]])
    x = rng.uniform(b[:, 0], b[:, 1], size=(50, 2))
    np.testing.assert_allclose(denormalize(normalize(x, b), b), x, atol=1e-12)
    np.testing.assert_allclose(normalize(b[:, 1], b), [1.0, 1.0])


def test_normalize_extrapolates_linearly():
    assert normalize([1.4], [[0.2, 0.8]])[0] == pytest.approx(3.0)


@pytest.mark.parametrize("bounds", [[[1.0, 1.0]], [[2.0, 1.0]], [1.0, 2.0]])
def test_degenerate_bounds_rejected(bounds):
    with pytest.raises(ConfigError):
        normalize([1.0], bounds)


def test_dimension_mismatch_rejected():
    with pytest.raises(ConfigError):
        normalize([1.0, 2.0], [[0.0, 1.0]])


def test_model_params_range_and_normalization():
    p = ModelParams([1.2], [[0.2, 0.8]])
    assert not p.in_range
    assert p.dim == 1
    q = denormalize_mu(normalize_mu(ModelParams([0.5], [[0.2, 0.8]])), [[0.2, 0.8]])
    assert q.in_range and q.values[0] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        p.values[0] = 0.0


def test_model_params_shape_checked():
    with pytest.raises(ConfigError):
        ModelParams([0.1, 0.2], [[0.0, 1.0]])


def test_rng_streams_deterministic_and_independent():
    a = make_rng(7, 3).random(5)
    np.testing.assert_array_equal(a, make_rng(7, 3).random(5))
    assert not np.allclose(a, make_rng(7, 4).random(5))
    assert not np.allclose(a, make_rng(8, 3).random(5))


def test_history_layout_oldest_first():
    H = HistorySegment.zeros(obs_dim=2, act_dim=1)
    assert H.h == HISTORY_LEN
    o = [np.array([k, 10 + k], dtype=float) for k in range(5)]
    for k in range(4):
        H = history_push(H, o[k], [100.0 + k], o[k + 1])
    flat = flatten_history(H)
    expected = [1, 11, 101, 2, 12, 102, 3, 13, 103, 4, 14]
    np.testing.assert_array_equal(flat, expected)
    assert flat.size == history_dim(2, 1) == H.flat_dim


def test_history_push_dimension_checks():
    H = HistorySegment.zeros(obs_dim=2, act_dim=1)
    with pytest.raises(ValueError):
        history_push(H, [1.0], [0.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        history_push(H, [1.0, 2.0], [0.0, 1.0], [1.0, 2.0])


def test_history_buffer_matches_segment(rng):
    n, od, ad = 3, 2, 1
    buf = HistoryBuffer(n, od, ad)
    obs0 = rng.standard_normal((n, od))
    buf.reset(np.arange(n), obs0)
    segs = [HistorySegment(np.zeros((3, od)), np.zeros((3, ad)), obs0[i]) for i in range(n)]
    for t in range(5):
        a, nxt = rng.standard_normal((n, ad)), rng.standard_normal((n, od))
        segs = [history_push(segs[i], buf.current_obs[i], a[i], nxt[i]) for i in range(n)]
        buf.push(a, nxt)
        assert np.all(buf.full == (t + 1 >= 3))
    for i in range(n):
        np.testing.assert_array_equal(buf.flatten()[i], flatten_history(segs[i]))
        np.testing.assert_array_equal(flatten_history(buf.segment(i)), flatten_history(segs[i]))


def test_history_buffer_lane_reset():
    buf = HistoryBuffer(2, 1, 1)
    buf.reset([0, 1], np.ones((2, 1)))
    for _ in range(3):
        buf.push(np.ones((2, 1)), np.ones((2, 1)))
    buf.reset([1], np.full((1, 1), 5.0))
    assert buf.full.tolist() == [True, False]
    np.testing.assert_array_equal(buf.flatten()[1], [0, 0, 0, 0, 0, 0, 5])


def test_rollout_from_transitions():
    tr = [Transition(np.zeros(2), np.zeros(1), 1.0, np.ones(2), False),
          Transition(np.ones(2), np.zeros(1), 2.0, np.ones(2), True)]
    r = Rollout.from_transitions([0.3], tr)
    assert len(r) == 2 and r.total_reward == 3.0
    assert [t.reward for t in r] == [1.0, 2.0]
    with pytest.raises(ValueError):
        Rollout.from_transitions([0.3], tr[::-1])
