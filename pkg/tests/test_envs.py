"""Environment tests: dynamics fixtures, rendering, determinism, expert."""

from __future__ import annotations

import numpy as np
import pytest

from covr import envs, numcore


def _lane(seed=0, **kw):
    cfg = envs.EnvConfig(name="lanedrive", **kw)
    env = envs.make_env(cfg)
    obs = env.reset(numcore.rng_stream(seed, domain=1))
    return env, obs


def _point(seed=0, **kw):
    cfg = envs.EnvConfig(name="pointreach", **kw)
    env = envs.make_env(cfg)
    obs = env.reset(numcore.rng_stream(seed, domain=1))
    return env, obs


# ---------- observation contract ----------


def test_observation_shape_and_range():
    for make in (_lane, _point):
        env, obs = make()
        assert obs.shape == (16 * 16 * 3,)
        assert obs.dtype == np.float64
        assert np.all(obs >= 0.0) and np.all(obs <= 1.0)


def test_reset_fills_frame_stack_with_initial_frame():
    env, obs = _lane()
    frames = obs.reshape(3, 256)
    assert np.array_equal(frames[0], frames[1])
    assert np.array_equal(frames[1], frames[2])


# ---------- lanedrive dynamics ----------


def test_lanedrive_single_inner_step_reward_fixture():
    # at top speed with steer 0.2: 1*5*0.1 - 0 - 1*0.2 = 0.3
    env, _ = _lane(action_repeat=1, obstacles=0)
    env.speed = 5.0
    res = env.step(np.array([0.2, 0.0]))
    assert res.reward == pytest.approx(0.3, abs=1e-12)
    assert not res.done


def test_lanedrive_dynamics_follow_stated_update_rules():
    env, _ = _lane(action_repeat=1, obstacles=0)
    env.speed = 1.0
    env.lateral = 0.2
    env.progress = 5.0
    env.step(np.array([0.5, 1.0]))
    assert env.lateral == pytest.approx(0.2 + 0.5 * 0.5 * 0.1)
    assert env.speed == pytest.approx(1.0 + 2.0 * 1.0 * 0.1)
    assert env.progress == pytest.approx(5.0 + env.speed * 0.1)


def test_lanedrive_speed_clamped_to_bounds():
    env, _ = _lane(action_repeat=4, obstacles=0)
    for _ in range(20):
        env.step(np.array([0.0, 1.0]))
    assert env.speed == pytest.approx(5.0)
    for _ in range(40):
        env.step(np.array([0.0, -1.0]))
    assert env.speed == pytest.approx(0.0)


def test_lanedrive_lane_departure_terminates_without_collision_flag():
    env, _ = _lane(obstacles=0)
    done = False
    steps = 0
    while not done:
        res = env.step(np.array([1.0, 0.3]))
        done = res.done
        steps += 1
    assert abs(env.lateral) > 1.0
    assert not res.info["collision"]
    assert not res.info["time_limit"]
    assert steps < 60


def test_lanedrive_obstacle_hit_sets_collision_and_penalty():
    env, _ = _lane(action_repeat=1, obstacles=0)
    env.speed = 5.0
    # plant an obstacle straight ahead, within one inner step's travel
    env.obstacle_list = [(env.progress + 0.4, env.lateral)]
    res = env.step(np.array([0.0, 0.0]))
    assert res.done and res.info["collision"]
    assert res.reward == pytest.approx(1.0 * 5.0 * 0.1 - 1e-4 * 100.0, abs=1e-12)


def test_lanedrive_time_limit_truncates_with_flag():
    env, _ = _lane(obstacles=0, max_steps=5)
    for _ in range(4):
        res = env.step(np.array([0.0, 0.1]))
        assert not res.done
    res = env.step(np.array([0.0, 0.1]))
    assert res.done and res.info["time_limit"]


def test_lanedrive_reward_bounded_by_distance_term():
    env, _ = _lane(obstacles=0)
    rng = numcore.rng_stream(8)
    for _ in range(50):
        res = env.step(rng.uniform(-1, 1, size=2))
        assert res.reward <= 1.0 * 5.0 * 0.1 * 4 + 1e-12
        assert np.isfinite(res.reward)
        if res.done:
            break


# ---------- lanedrive reset and obstacles ----------


def test_lanedrive_reset_state_is_canonical():
    env, _ = _lane(obstacles=3)
    assert env.lateral == 0.0 and env.speed == 0.0 and env.progress == 0.0
    assert len(env.obstacle_list) == 3


def test_lanedrive_obstacle_positions_differ_across_seeds():
    env_a, _ = _lane(seed=1, obstacles=3)
    env_b, _ = _lane(seed=2, obstacles=3)
    assert env_a.obstacle_list != env_b.obstacle_list


def test_lanedrive_obstacles_ahead_of_start():
    env, _ = _lane(seed=5, obstacles=3)
    for prog, lat in env.obstacle_list:
        assert prog > 2.0
        assert -0.9 < lat < 0.9


# ---------- rendering ----------


def test_lanedrive_empty_scene_render_counts():
    env, _ = _lane(obstacles=0)
    frame = env.render()
    assert frame.shape == (16, 16)
    vals, counts = np.unique(frame, return_counts=True)
    lut = dict(zip(vals.tolist(), counts.tolist()))
    assert lut[0.5] == 32  # two full lane-edge columns
    assert lut[1.0] == 1  # the agent cell
    assert lut[0.0] == 256 - 33
    assert set(lut) == {0.0, 0.5, 1.0}


def test_lanedrive_obstacle_rendered_ahead_of_agent():
    env, _ = _lane(action_repeat=1, obstacles=0)
    env.obstacle_list = [(env.progress + 3.0, 0.0)]
    frame = env.render()
    rows, cols = np.where(frame == 0.8)
    assert len(rows) == 1
    agent_rows, _ = np.where(frame == 1.0)
    assert rows[0] < agent_rows[0]  # drawn above the agent (farther ahead)


def test_pointreach_render_has_agent_and_goal_cells():
    env, _ = _point()
    frame = env.render()
    assert np.count_nonzero(frame == 1.0) == 1
    assert np.count_nonzero(frame == 0.9) == 1
    assert np.count_nonzero(frame) == 2


# ---------- pointreach dynamics ----------


def test_pointreach_reward_is_distance_integral():
    env, _ = _point(action_repeat=1)
    env.pos = np.array([0.0, 0.0])
    env.goal = np.array([0.5, 0.0])
    res = env.step(np.array([0.0, 0.0]))  # stay put
    assert res.reward == pytest.approx(-0.5 * 0.1, abs=1e-12)


def test_pointreach_at_goal_terminates_with_zero_reward():
    env, _ = _point(action_repeat=1)
    env.pos = env.goal.copy()
    res = env.step(np.array([0.0, 0.0]))
    assert res.done
    assert not res.info["time_limit"]
    assert res.reward == pytest.approx(0.0, abs=1e-12)


def test_pointreach_position_moves_by_action_times_dt():
    env, _ = _point(action_repeat=1)
    env.pos = np.array([0.0, 0.0])
    env.goal = np.array([0.9, 0.9])
    env.step(np.array([1.0, -0.5]))
    assert env.pos[0] == pytest.approx(0.1)
    assert env.pos[1] == pytest.approx(-0.05)


def test_pointreach_position_clipped_to_arena():
    env, _ = _point()
    env.goal = np.array([-0.9, -0.9])
    for _ in range(30):
        res = env.step(np.array([1.0, 1.0]))
        if res.done:
            break
    assert np.all(env.pos <= 1.0)


def test_pointreach_goal_snaps_to_cell_center_away_from_start():
    for seed in range(6):
        env, _ = _point(seed=seed)
        gx = (env.goal[0] + 1.0) / (2.0 / 16) - 0.5
        gy = (env.goal[1] + 1.0) / (2.0 / 16) - 0.5
        assert gx == pytest.approx(round(gx), abs=1e-9)
        assert gy == pytest.approx(round(gy), abs=1e-9)
        assert np.linalg.norm(env.goal - env.start_pos) >= 0.3


# ---------- determinism ----------


def test_same_seed_same_actions_identical_trajectories():
    for make in (_lane, _point):
        env_a, obs_a = make(seed=7)
        env_b, obs_b = make(seed=7)
        assert np.array_equal(obs_a, obs_b)
        act_rng = numcore.rng_stream(99)
        for _ in range(30):
            a = act_rng.uniform(-1, 1, size=2)
            ra = env_a.step(a)
            rb = env_b.step(a)
            assert np.array_equal(ra.observation, rb.observation)
            assert ra.reward == rb.reward and ra.done == rb.done
            if ra.done:
                break


def test_random_state_teleport_is_deterministic():
    env_a, _ = _lane(seed=3)
    env_b, _ = _lane(seed=3)
    obs_a = env_a.random_state(numcore.rng_stream(17))
    obs_b = env_b.random_state(numcore.rng_stream(17))
    assert np.array_equal(obs_a, obs_b)
    assert obs_a.shape == (768,)


# ---------- scripted expert ----------


def test_expert_steers_against_lateral_offset():
    env, _ = _lane(obstacles=0)
    env.lateral = 0.5
    action = env.expert_action()
    assert action[0] == pytest.approx(-0.4)  # -0.8 * lateral
    assert action[1] == pytest.approx(1.0)


def test_expert_dodges_obstacle_directly_ahead():
    env, _ = _lane(obstacles=0)
    env.speed = 5.0
    env.lateral = 0.3
    env.obstacle_list = [(env.progress + 2.0, 0.3)]
    action = env.expert_action()
    assert abs(action[0]) > 0.5  # hard steer
    assert action[0] < 0  # freer side is the left (more room toward -1)
    assert action[1] == pytest.approx(0.2)


def test_expert_moves_straight_toward_goal():
    env, _ = _point()
    env.pos = np.array([0.0, 0.0])
    env.goal = np.array([0.6, -0.8])
    action = env.expert_action()
    assert action[0] == pytest.approx(0.6, abs=1e-12)
    assert action[1] == pytest.approx(-0.8, abs=1e-12)
    assert np.linalg.norm(action) == pytest.approx(1.0)


def _rollout_return(env_cfg, seed, policy):
    cfg = envs.EnvConfig(**env_cfg)
    env = envs.make_env(cfg)
    env.reset(numcore.rng_stream(seed, domain=1))
    rng = numcore.rng_stream(seed, domain=2)
    total = 0.0
    while True:
        a = env.expert_action() if policy == "expert" else rng.uniform(-1, 1, size=2)
        res = env.step(a)
        total += res.reward
        if res.done:
            return total


@pytest.mark.parametrize("name", ["lanedrive", "pointreach"])
def test_expert_beats_random_policy(name):
    expert = np.mean([_rollout_return({"name": name}, s, "expert") for s in range(3)])
    random_ = np.mean([_rollout_return({"name": name}, s, "random") for s in range(3)])
    assert expert > random_


def test_expert_survives_full_episode_on_lanedrive():
    cfg = envs.EnvConfig(name="lanedrive", obstacles=2)
    env = envs.make_env(cfg)
    env.reset(numcore.rng_stream(11, domain=1))
    steps = 0
    while True:
        res = env.step(env.expert_action())
        steps += 1
        if res.done:
            break
    assert res.info["time_limit"], f"expert crashed at step {steps}"
