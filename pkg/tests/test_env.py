import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ratelab.dynamics import AirframeModel, BodyState, hover_command
from ratelab.env import (
    IDLE,
    EnvConfig,
    EpisodeFinished,
    RateEnv,
    RewardBreakdown,
    TaskScript,
    compute_reward,
    inject_gyro_noise,
    observe,
    reward_delta,
    reward_e,
    reward_y,
    sample_task,
)

CFG = EnvConfig()


class TestObserve:
    def test_perfect_tracking(self):
        ob = observe([0, 0, 0], [50.0, -20.0, 3.0], [50.0, -20.0, 3.0])
        assert np.array_equal(ob.e, np.zeros(3))

    def test_unchanged_error(self):
        ob = observe([7.0, 8.0, 9.0], [10.0, 10.0, 10.0], [3.0, 2.0, 1.0])
        assert np.array_equal(ob.delta_e, np.zeros(3))

    def test_worked_example(self):
        ob = observe([70.0, 0.0, 0.0], [100.0, 0.0, 0.0], [40.0, 0.0, 0.0])
        assert np.array_equal(ob.e, [60.0, 0.0, 0.0])
        assert np.array_equal(ob.delta_e, [-10.0, 0.0, 0.0])
        assert ob.vector.shape == (6,)


class TestGyroNoise:
    def test_zero_sigma_is_identity(self):
        w = np.array([1.5, -2.0, 300.0])
        out = inject_gyro_noise(w, 0.0, np.random.default_rng(0))
        assert np.array_equal(out, w)
        assert out is not w

    def test_statistics(self):
        rng = np.random.default_rng(42)
        n = 1_000_000
        samples = inject_gyro_noise(np.zeros((n, 3)), 5.0, rng)
        assert np.all(np.abs(samples.mean(axis=0)) <= 0.02)
        assert np.all(np.abs(samples.std(axis=0) / 5.0 - 1.0) <= 0.01)
        c = np.corrcoef(samples.T)
        off = c[~np.eye(3, dtype=bool)]
        assert np.all(np.abs(off) < 0.01)


class TestRewards:
    def test_reward_e(self):
        assert reward_e([0, 0, 0]) == 0.0
        assert reward_e([10, -5, 2]) == -129.0

    @given(st.lists(st.floats(-1e4, 1e4), min_size=3, max_size=3))
    def test_reward_e_even(self, e):
        assert reward_e(e) == reward_e([-v for v in e])
        assert reward_e(e) <= 0.0

    def test_reward_y(self):
        assert reward_y([1, 1, 1, 1], 300.0) == 0.0
        assert reward_y([0, 0, 0, 0], 300.0) == 300.0
        assert reward_y([0.25, 0.0, 0.5, 0.25], 300.0) == 225.0

    def test_delta_frozen_output_in_band(self):
        y = np.array([0.3, 0.6, 0.2, 0.9])
        assert CFG.delta_y_max == 100.0**2
        assert reward_delta(y, y, [0.0, 0.0, 0.0], CFG) == 20_000.0

    def test_delta_gate(self):
        y = np.full(4, 0.5)
        assert reward_delta(y, y, [CFG.error_band, 0.0, 0.0], CFG) == 0.0
        assert reward_delta(y, y, [0.0, 0.0, -CFG.error_band - 1], CFG) == 0.0
        assert reward_delta(y, y, [CFG.error_band - 1e-9, 0.0, 0.0], CFG) == 20_000.0

    def test_delta_clamp_per_rotor(self):
        prev = np.full(4, 0.5)
        y = prev.copy()
        y[1] += 0.2  # 200 milli-units: (200)^2 = 40000 >= 10000
        assert reward_delta(y, prev, np.zeros(3), CFG) == 15_000.0
        y[1] = 0.55  # 50 milli-units -> 0.5 * (10000 - 2500) for that rotor
        assert reward_delta(y, prev, np.zeros(3), CFG) == pytest.approx(15_000.0 + 3_750.0)

    def test_constants(self):
        assert (CFG.alpha, CFG.beta, CFG.delta_y_max) == (300.0, 0.5, 10_000.0)

    @settings(max_examples=200)
    @given(
        st.lists(st.floats(-500, 500), min_size=3, max_size=3),
        st.lists(st.floats(0, 1), min_size=4, max_size=4),
        st.lists(st.floats(0, 1), min_size=4, max_size=4),
    )
    def test_decomposition_and_signs(self, e, y, y_prev):
        r = compute_reward(e, y, y_prev, CFG)
        assert r.total == r.r_e + r.r_y + r.r_delta
        assert r.r_e <= 0 and r.r_y >= 0 and r.r_delta >= 0
        if max(abs(v) for v in e) >= CFG.error_band:
            assert r.r_delta == 0.0

    def test_breakdown_total(self):
        assert RewardBreakdown(-5.0, 2.0, 1.0).total == -2.0


class TestTaskScript:
    def test_deterministic(self):
        assert sample_task(3, CFG) == sample_task(3, CFG)
        assert sample_task(3, CFG) != sample_task(4, CFG)

    def test_thirty_second_episode_has_30000_steps(self):
        cfg = EnvConfig(episode_time=30.0)
        task = sample_task(0, cfg)
        assert task.total_time == pytest.approx(30.0, abs=1e-9)
        assert len(task.setpoints(0.001)) == 30_000

    @settings(max_examples=50)
    @given(st.integers(0, 2**31 - 1), st.floats(0.05, 20.0))
    def test_structure(self, seed, episode_time):
        cfg = EnvConfig(episode_time=episode_time)
        task = sample_task(seed, cfg)
        assert task.total_time == pytest.approx(episode_time, rel=1e-12)
        for i, (sp, dur) in enumerate(task.segments):
            assert dur > 0
            if i % 2 == 1:
                assert sp == IDLE
            else:
                assert all(abs(v) <= cfg.setpoint_bound for v in sp)

    def test_setpoints_follow_segments(self):
        task = TaskScript((((100.0, 0.0, 0.0), 0.003), (IDLE, 0.002)))
        sp = task.setpoints(0.001)
        assert sp.shape == (5, 3)
        assert np.array_equal(sp[:, 0], [100, 100, 100, 0, 0])

    def test_round_trip(self):
        task = sample_task(11, CFG)
        assert TaskScript.from_dict(task.to_dict()) == task

    def test_episodic_mode_single_segment(self):
        task = sample_task(5, EnvConfig(task_mode="episodic"))
        assert len(task.segments) == 1


class TestEnvConfig:
    @pytest.mark.parametrize("kw", [
        {"alpha": 0.0}, {"beta": -1.0}, {"delta_y_max": 0.0}, {"error_band": 0.0},
        {"episode_time": 0.0}, {"gyro_noise_sigma": -1.0}, {"observation_mode": "raw"},
        {"task_mode": "forever"}, {"idle_duration_range": (1.0, 0.5)},
    ])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            EnvConfig(**kw)

    def test_round_trip(self):
        cfg = EnvConfig(alpha=10.0, idle_duration_range=(0.3, 0.4))
        assert EnvConfig.from_dict(cfg.to_dict()) == cfg


class TestRateEnv:
    def test_first_observation(self):
        env = RateEnv(EnvConfig(gyro_noise_sigma=0.0))
        obs = env.reset(seed=1)
        sp = env.task.segments[0][0]
        # e(-1) is zero at a rest start, so delta_e equals e
        assert np.array_equal(obs[:3], sp)
        assert np.array_equal(obs[3:], sp)

    def test_episode_length_and_finish(self):
        cfg = EnvConfig(episode_time=0.05, gyro_noise_sigma=0.0)
        env = RateEnv(cfg)
        env.reset(seed=0)
        done = False
        n = 0
        while not done:
            _, _, done = env.step(np.full(4, 0.5))
            n += 1
        assert n == 50
        assert env.status == "time_limit"
        with pytest.raises(EpisodeFinished):
            env.step(np.full(4, 0.5))

    def test_equal_seeds_equal_rewards(self):
        rng = np.random.default_rng(0)
        actions = rng.uniform(0, 1, (300, 4))
        traces = []
        for _ in range(2):
            env = RateEnv(EnvConfig(episode_time=0.3))
            obs = [env.reset(seed=9)]
            rew = []
            for a in actions:
                o, r, _ = env.step(a)
                obs.append(o)
                rew.append(r.total)
            traces.append((np.array(obs), np.array(rew)))
        assert np.array_equal(traces[0][0], traces[1][0])
        assert np.array_equal(traces[0][1], traces[1][1])

    def test_perfect_tracking_frozen_output(self):
        cfg = EnvConfig(gyro_noise_sigma=0.0)
        env = RateEnv(cfg)
        hover = hover_command(env.airframe)
        speed = np.full(4, hover * env.airframe.omega_max)
        # rotors already at the commanded speed: zero error, zero integral
        state = BodyState(np.zeros(3), speed, np.zeros(4), 0.0)
        task = TaskScript(((IDLE, 0.01),))
        env.reset(task=task, state=state)
        y = np.full(4, hover)
        env.y_prev = y.copy()
        _, r, _ = env.step(y)
        assert r.r_e == 0.0
        assert r.total == reward_y(y, cfg.alpha) + 20_000.0 * (cfg.beta / 0.5)

    def test_actions_are_clipped(self):
        env = RateEnv(EnvConfig(gyro_noise_sigma=0.0))
        env.reset(seed=0)
        _, r, _ = env.step([2.0, -1.0, 0.5, 0.5])
        assert r.r_y == reward_y([1.0, 0.0, 0.5, 0.5], 300.0)

    def test_error_motor_mode(self):
        env = RateEnv(EnvConfig(observation_mode="error_motor"))
        obs = env.reset(seed=0)
        assert obs.shape == (7,) == (env.obs_dim,)
        obs, _, _ = env.step(np.full(4, 1.0))
        assert 0 < obs[3] <= 1.0
        assert np.array_equal(obs[3:], env.state.rotor_speed / env.airframe.omega_max)

    def test_obs_dim_constant(self):
        env = RateEnv()
        shapes = {env.reset(seed=2).shape}
        for _ in range(20):
            shapes.add(env.step(np.random.default_rng(1).uniform(0, 1, 4))[0].shape)
        assert shapes == {(6,)}

    def test_divergence_ends_episode(self):
        air = AirframeModel(rate_limit=50.0)
        env = RateEnv(EnvConfig(gyro_noise_sigma=0.0), air)
        env.reset(seed=0)
        done, n = False, 0
        while not done:
            _, r, done = env.step([0.0, 0.0, 1.0, 1.0])
            n += 1
        assert env.status == "diverged"
        assert n < 1000
        # the penalty covers every step the episode had left
        assert r.r_e == -3.0 * 50.0**2 * (2000 - (n - 1))

    def test_reset_needs_seed_or_task(self):
        with pytest.raises(ValueError):
            RateEnv().reset()
