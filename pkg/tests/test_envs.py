import math

import numpy as np
import pytest
from scipy import stats

from bitrl import envs
from bitrl.tensor_core import RngStream


class TestApi:
    def test_env_ids(self):
        assert set(envs.ENV_IDS) == {"cartpole", "mountaincar", "acrobot", "textgrid"}

    def test_unknown_env(self):
        with pytest.raises(KeyError):
            envs.reset("pendulum", RngStream(0))

    @pytest.mark.parametrize("env_id", envs.ENV_IDS)
    def test_reset_shapes(self, env_id):
        s = envs.reset(env_id, RngStream(0, 1))
        assert s.obs.shape == (envs.obs_dim(env_id),)
        assert not s.done and s.step_index == 0

    @pytest.mark.parametrize("env_id", envs.ENV_IDS)
    def test_invalid_action(self, env_id):
        s = envs.reset(env_id, RngStream(0, 1))
        with pytest.raises(ValueError):
            envs.step(s, envs.action_count(env_id))

    def test_step_after_done_raises(self):
        s = envs.reset("mountaincar", RngStream(0, 2))
        for _ in range(200):
            _, s = envs.step(s, 1)
        assert s.done
        with pytest.raises(envs.EpisodeDoneError):
            envs.step(s, 1)

    def test_reset_is_deterministic(self):
        a = envs.reset("cartpole", RngStream(5, 3))
        b = envs.reset("cartpole", RngStream(5, 3))
        np.testing.assert_array_equal(a.obs, b.obs)


class TestCartPole:
    def _oracle(self, obs, action):
        """Independent transcription of the canonical Euler dynamics."""
        x, x_dot, th, th_dot = obs
        f = 10.0 if action == 1 else -10.0
        ct, st = math.cos(th), math.sin(th)
        temp = (f + 0.05 * th_dot ** 2 * st) / 1.1
        th_acc = (9.8 * st - ct * temp) / (0.5 * (4.0 / 3.0 - 0.1 * ct ** 2 / 1.1))
        x_acc = temp - 0.05 * th_acc * ct / 1.1
        return np.array([x + 0.02 * x_dot, x_dot + 0.02 * x_acc,
                         th + 0.02 * th_dot, th_dot + 0.02 * th_acc])

    def test_transition_matches_oracle(self):
        rng = RngStream(1, 4)
        for ep in range(20):
            s = envs.reset("cartpole", rng.derive(ep))
            a = int(rng.integers(0, 2))
            result, _ = envs.step(s, a)
            np.testing.assert_allclose(result.next_obs, self._oracle(s.obs, a),
                                       rtol=1e-12)

    def test_reward_is_one_per_step(self):
        s = envs.reset("cartpole", RngStream(2, 4))
        total = 0.0
        while not s.done:
            r, s = envs.step(s, 1)
            total += r.reward
        assert total == s.step_index  # 1 per step, including the terminal one

    def test_termination_limits(self):
        s = envs.EnvState("cartpole", np.array([2.39, 5.0, 0.0, 0.0]), 0, False)
        result, _ = envs.step(s, 1)
        assert result.done  # x exceeds 2.4 after the step

    def test_reset_uniform_distribution(self):
        rng = RngStream(3, 4)
        draws = np.concatenate([envs.reset("cartpole", rng.derive(i)).obs
                                for i in range(250)])
        p = stats.kstest(draws, stats.uniform(loc=-0.05, scale=0.1).cdf).pvalue
        assert p > 0.01

    def test_uniform_policy_episode_length(self):
        # documented sanity band for random play
        rng = RngStream(4, 4)
        lengths = []
        for ep in range(100):
            s = envs.reset("cartpole", rng.derive(ep))
            while not s.done:
                _, s = envs.step(s, int(rng.integers(0, 2)))
            lengths.append(s.step_index)
        assert 15 <= np.mean(lengths) <= 35


class TestMountainCar:
    def test_coasting_never_reaches_goal(self):
        s = envs.reset("mountaincar", RngStream(5, 5))
        total = 0.0
        while not s.done:
            r, s = envs.step(s, 1)  # no push
            total += r.reward
        assert s.step_index == 200 and total == -200.0

    def test_left_wall_zeroes_velocity(self):
        s = envs.EnvState("mountaincar", np.array([-1.2, -0.07]), 0, False)
        result, _ = envs.step(s, 0)
        assert result.next_obs[0] == -1.2 and result.next_obs[1] == 0.0

    def test_velocity_clipped(self):
        s = envs.EnvState("mountaincar", np.array([0.0, 0.069]), 0, False)
        result, _ = envs.step(s, 2)
        assert abs(result.next_obs[1]) <= 0.07

    def test_transition_formula(self):
        s = envs.EnvState("mountaincar", np.array([-0.5, 0.0]), 0, False)
        result, _ = envs.step(s, 2)
        vel = 0.001 - math.cos(3 * -0.5) * 0.0025
        np.testing.assert_allclose(result.next_obs, [-0.5 + vel, vel], rtol=1e-12)

    def test_goal_terminates(self):
        s = envs.EnvState("mountaincar", np.array([0.499, 0.07]), 0, False)
        result, _ = envs.step(s, 2)
        assert result.done and not result.truncated


class TestAcrobot:
    def test_observation_is_trig_embedding(self):
        s = envs.reset("acrobot", RngStream(6, 6))
        t1, t2 = s.internal[0], s.internal[1]
        np.testing.assert_allclose(
            s.obs[:4], [math.cos(t1), math.sin(t1), math.cos(t2), math.sin(t2)])

    def test_energy_conserved_under_fine_integration(self):
        # zero torque, small dt: total mechanical energy must be stable
        s = np.array([0.1, -0.05, 0.0, 0.0])
        e0 = envs.acrobot_energy(s)
        for _ in range(2000):
            s = envs.rk4_step(lambda v: envs.acrobot_dsdt(v, 0.0), s, 0.001)
        assert abs(envs.acrobot_energy(s) - e0) < 1e-6 * max(1.0, abs(e0))

    def test_step_matches_independent_rk4(self):
        s = envs.reset("acrobot", RngStream(7, 6))
        result, _ = envs.step(s, 2)
        expected = envs.rk4_step(lambda v: envs.acrobot_dsdt(v, 1.0),
                                 s.internal, 0.2)
        # small initial state: no wrap or clip applies
        np.testing.assert_allclose(result.next_obs[4:], expected[2:], rtol=1e-10)

    def test_velocities_clipped(self):
        internal = np.array([0.0, 0.0, 12.0, 28.0])
        s = envs.EnvState("acrobot", envs._acrobot_obs(internal), 0, False,
                          internal=internal)
        result, nxt = envs.step(s, 1)
        assert abs(nxt.internal[2]) <= 4 * math.pi + 1e-9
        assert abs(nxt.internal[3]) <= 9 * math.pi + 1e-9

    def test_reward_structure(self):
        s = envs.reset("acrobot", RngStream(8, 6))
        result, _ = envs.step(s, 0)
        assert result.reward == -1.0

    def test_truncates_at_500(self):
        s = envs.reset("acrobot", RngStream(9, 6))
        steps = 0
        while not s.done and steps < 600:
            r, s = envs.step(s, 1)  # zero torque: swing never completes
            steps += 1
        assert s.step_index == 500 and r.truncated


class TestTextGrid:
    def test_instruction_matches_target(self):
        s = envs.reset("textgrid", RngStream(10, 7))
        tr, tc = int(s.internal[2]), int(s.internal[3])
        assert s.instruction == f"go to the red cell at row {tr} column {tc}"

    def test_target_never_at_start(self):
        for i in range(50):
            s = envs.reset("textgrid", RngStream(11, 7).derive(i))
            assert (int(s.internal[2]), int(s.internal[3])) != (0, 0)

    def test_shortest_path_return(self):
        s = envs.reset("textgrid", RngStream(12, 7))
        tr, tc = int(s.internal[2]), int(s.internal[3])
        total = 0.0
        for _ in range(tr):        # move down
            r, s = envs.step(s, 1)
            total += r.reward
        for _ in range(tc):        # move right
            r, s = envs.step(s, 3)
            total += r.reward
        assert s.done
        assert total == pytest.approx(1.0 - 0.01 * (tr + tc))

    def test_walls_clamp(self):
        s = envs.reset("textgrid", RngStream(13, 7))
        r, nxt = envs.step(s, 0)  # up from row 0
        assert nxt.internal[0] == 0 and nxt.internal[1] == 0

    def test_truncation_at_100(self):
        s = envs.reset("textgrid", RngStream(14, 7))
        count = 0
        while not s.done:
            r, s = envs.step(s, 0)  # bump into the wall forever
            count += 1
        assert count == 100 and r.truncated


class TestFailureFloors:
    def test_floor_below_max(self):
        for env_id in envs.ENV_IDS:
            assert envs.FAILURE_FLOOR[env_id] < envs.MAX_RETURN[env_id]

    def test_cartpole_floor_is_ten_percent(self):
        assert envs.FAILURE_FLOOR["cartpole"] == 0.1 * envs.MAX_RETURN["cartpole"]
