import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adaptive_cbf.envs.nav import (
    NavConfig,
    NavEnv,
    NavWorld,
    cap_speed,
    nav_barrier,
    nav_cost,
    nav_reset,
    nav_reward,
    nav_step,
    opponent_policy,
    waypoint_controller,
)


def world(pos, vel, goals=None, ds=None, dt=0.1, a_max=1.0):
    pos = np.asarray(pos, dtype=float)
    vel = np.asarray(vel, dtype=float)
    goals = pos.copy() if goals is None else np.asarray(goals, dtype=float)
    ds = np.zeros(len(pos)) if ds is None else np.asarray(ds, dtype=float)
    return NavWorld(pos, vel, goals, ds, dt, a_max, 1.0, 150)


def test_step_example():
    w = world([[0, 0]], [[1, 0]])
    n = nav_step(w, [0, 1], np.zeros((0, 2)))
    np.testing.assert_allclose(n.pos[0], [0.1, 0.0])
    np.testing.assert_allclose(n.vel[0], [1.0, 0.1])
    assert n.t == 1 and w.t == 0


def test_zero_accel_is_straight_line():
    w = world([[1, 2], [3, 4]], [[0.5, -0.2], [0.0, 0.3]])
    for _ in range(20):
        w = nav_step(w, [0, 0], [[0, 0]])
    np.testing.assert_allclose(w.pos, [[1 + 20 * 0.05, 2 - 20 * 0.02], [3, 4 + 20 * 0.03]], atol=1e-12)


def test_rollout_matches_scalar_integrator():
    rng = np.random.default_rng(3)
    n = 4
    w = world(rng.uniform(0, 10, (n, 2)), rng.uniform(-0.5, 0.5, (n, 2)))
    p = w.pos.copy().tolist()
    v = w.vel.copy().tolist()
    for _ in range(100):
        a = rng.uniform(-1, 1, (n, 2))
        w = nav_step(w, a[0], a[1:])  # no speed cap
        for i in range(n):
            for k in range(2):
                p[i][k] = p[i][k] + 0.1 * v[i][k]
                v[i][k] = v[i][k] + 0.1 * a[i][k]
    np.testing.assert_allclose(w.pos, p, rtol=0, atol=1e-12)
    np.testing.assert_allclose(w.vel, v, rtol=0, atol=1e-12)


def test_step_clamps_accel_and_caps_speed():
    w = world([[0, 0]], [[1.95, 0.0]])
    n = nav_step(w, [5.0, 0.0], np.zeros((0, 2)), v_cap=2.0)
    assert np.linalg.norm(n.vel[0]) == pytest.approx(2.0)
    n = nav_step(world([[0, 0]], [[0, 0]]), [5.0, -5.0], np.zeros((0, 2)))
    np.testing.assert_allclose(n.vel[0], [0.1, -0.1])
    with pytest.raises(ValueError):
        nav_step(w, [0, 0], np.zeros((2, 2)))


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=2), st.floats(0.1, 5))
def test_cap_speed_property(v, cap):
    out = cap_speed(np.array(v), cap)
    assert np.linalg.norm(out) <= cap + 1e-12
    if np.linalg.norm(v) <= cap:
        np.testing.assert_array_equal(out, v)


def test_waypoint_controller_examples():
    np.testing.assert_array_equal(waypoint_controller([0, 0], [0, 0]), [0, 0])
    a = waypoint_controller([0, 0], [0.1, 0.05])
    assert a[0] > 0 and a[1] > 0 and a[0] / a[1] == pytest.approx(2.0)


def test_waypoint_closed_loop_converges():
    target = np.array([0.6, -0.4])
    w = world([[0, 0]], [[0, 0]])
    for _ in range(30):
        a = waypoint_controller(w.vel[0], target - w.pos[0])
        w = nav_step(w, a, np.zeros((0, 2)))
    assert np.linalg.norm(w.pos[0] - target) < 0.05


def test_opponent_policy_examples():
    w = world([[0, 0], [5, 5]], [[0.1, 0.0], [0, 0]], goals=[[0, 0], [5.2, 5.1]], ds=[0, 0])
    expected = np.clip(4.0 * np.array([0.2, 0.1]), -1, 1)
    np.testing.assert_allclose(opponent_policy(w, 1), expected)
    # neighbour exactly on the D_s boundary: no repulsion
    w = world([[0, 0], [3, 0]], [[0, 0], [0, 0]], goals=[[0, 0], [3.1, 0.0]], ds=[0, 3.0])
    np.testing.assert_allclose(opponent_policy(w, 1), [0.4, 0.0])
    # neighbour at half D_s straight ahead (toward the goal): pushed back
    w = world([[1.5, 0], [0, 0]], [[0, 0], [0, 0]], goals=[[0, 0], [0.1, 0.0]], ds=[0, 3.0])
    assert opponent_policy(w, 1)[0] < 0


def test_barrier_examples():
    assert nav_barrier([2, 0], [-1, 0], 1.0, 1.0) == pytest.approx(0.0)
    assert nav_barrier([0, 3], [0, 0], 3.0, 1.0) == 0.0
    root = np.sqrt(1.0 * (2.0 - 1.0))
    assert nav_barrier([2, 0], [0.5, 0], 1.0, 1.0) > root
    assert nav_barrier([0.5, 0], [0, 0], 1.0, 1.0) == pytest.approx(-np.sqrt(0.5))
    with pytest.raises(ValueError):
        nav_barrier([0, 0], [1, 0], 1.0, 1.0)


def test_barrier_vectorised_matches_scalar():
    rng = np.random.default_rng(0)
    dp = rng.normal(size=(5, 3, 2)) * 3
    dv = rng.normal(size=(5, 3, 2))
    out = nav_barrier(dp, dv, 1.0, 1.0)
    assert out.shape == (5, 3)
    assert out[2, 1] == nav_barrier(dp[2, 1], dv[2, 1], 1.0, 1.0)


def test_reward_and_cost_examples():
    assert nav_reward(3.0, 3.0, 5.0) == 0.0
    assert nav_reward(3.0, 2.0, 5.0) == pytest.approx(0.2)
    assert nav_cost(world([[0, 0], [0.4, 0]], np.zeros((2, 2))), 0.5) == 1
    assert nav_cost(world([[0, 0], [0.6, 0]], np.zeros((2, 2))), 0.5) == 0


def test_reward_telescopes_to_one_when_goal_reached():
    cfg = NavConfig(min_agents=3, max_agents=3, fixed_ds=0.0, frame_stack=1)
    env = NavEnv(cfg)
    rng = np.random.default_rng(11)
    reached = 0
    for _ in range(10):
        env.reset(rng)
        total, done = 0.0, False
        while not done:
            st_ = env.step(env.goal_accel(), gamma=None)
            total += st_.reward
            done = st_.done
        if st_.info["success"]:
            reached += 1
            assert total == pytest.approx(1.0, abs=1e-12)
        assert total == pytest.approx(env.episode_return)
    assert reached > 0


def test_collision_terminates():
    cfg = NavConfig(frame_stack=1)
    env = NavEnv(cfg)
    env.reset(np.random.default_rng(0))
    w = env.world
    w.pos[1] = w.pos[0] + np.array([0.45, 0.0])
    w.vel[:] = 0.0
    out = env.step(np.zeros(2), gamma=None)
    assert out.cost == 1 and out.done and out.info["collision"]


def test_reset_statistics():
    cfg = NavConfig()
    rng = np.random.default_rng(2024)
    n = 10_000
    counts = np.zeros(8)
    ds = []
    for _ in range(n):
        w = nav_reset(rng, cfg)
        counts[w.n_agents] += 1
        ds.extend(w.ds[1:])
        gaps = np.linalg.norm(w.pos[:, None] - w.pos[None], axis=-1) + np.eye(w.n_agents) * 99
        assert gaps.min() >= 2.0
        assert w.ds[0] == cfg.ego_safety_distance
        assert w.horizon == 150
    np.testing.assert_allclose(counts[3:] / n, 0.2, atol=0.02)
    ds = np.asarray(ds)
    freq = [np.mean(ds == v) for v in (0.0, 5.0, 6.0)]
    np.testing.assert_allclose(freq, [0.5, 0.25, 0.25], atol=0.02)


def test_reset_placement_failure():
    cfg = NavConfig(arena=1.0, min_separation=2.0, max_placement_tries=5)
    with pytest.raises(RuntimeError):
        nav_reset(np.random.default_rng(0), cfg)


def test_observation_dimension_fixed_and_hides_ds():
    cfg = NavConfig(frame_stack=2)
    env = NavEnv(cfg)
    rng = np.random.default_rng(1)
    for _ in range(30):
        obs = env.reset(rng)
        assert obs.shape == (env.obs_dim,) == (2 * (7 * 6 + 8),)
        present = obs[6 : 7 * 6 : 7]
        assert present.sum() == env.world.n_agents - 1
    # changing the hidden safety distances leaves the observation unchanged
    env.reset(np.random.default_rng(4))
    before = env.frame()
    env.world.ds[1:] = 123.0
    np.testing.assert_array_equal(env.frame(), before)


def rollout(seed):
    env = NavEnv(NavConfig(frame_stack=1), record=True)
    env.reset(np.random.default_rng(seed))
    done = False
    while not done:
        done = env.step(env.goal_accel(), gamma=0.5).done
    return env.trace


def test_deterministic_trace():
    a, b = rollout(8), rollout(8)
    assert a == b
    assert rollout(9) != a


def test_filtered_steps_against_constant_velocity_opponents_never_collide():
    cfg = NavConfig(opponent_model="cvm", fixed_ds=0.0, frame_stack=1)
    env = NavEnv(cfg)
    rngs = np.random.default_rng(77).spawn(500)
    collisions = 0
    for rng in rngs:
        env.reset(rng)
        done = False
        while not done:
            out = env.step(env.goal_accel(), gamma=0.5)
            done = out.done
        collisions += out.cost
    assert collisions == 0
