import math

import numpy as np
import pytest

from mirrorlab import envs
from mirrorlab.envs import OBS_BOUNDS, EnvSpec, VecEnv
from mirrorlab.errors import ConfigError, DivergenceError


def cartpole_oracle(state, action):
    """Scalar transcription of the classic cart-pole Euler step."""
    x, x_dot, theta, theta_dot = state
    g, mc, mp, l, fm, tau = 9.8, 1.0, 0.1, 0.5, 10.0, 0.02
    total = mc + mp
    force = fm if action == 1 else -fm
    c, s = math.cos(theta), math.sin(theta)
    temp = (force + mp * l * theta_dot * theta_dot * s) / total
    thacc = (g * s - c * temp) / (l * (4.0 / 3.0 - mp * c * c / total))
    xacc = temp - mp * l * thacc * c / total
    return [x + tau * x_dot, x_dot + tau * xacc, theta + tau * theta_dot, theta_dot + tau * thacc]


def pendulum_oracle(th, thdot, u):
    u = min(max(u, -2.0), 2.0)
    norm = ((th + math.pi) % (2 * math.pi)) - math.pi
    cost = norm ** 2 + 0.1 * thdot ** 2 + 0.001 * u ** 2
    thdot = min(max(thdot + (3 * 10.0 / 2 * math.sin(th) + 3.0 * u) * 0.05, -8.0), 8.0)
    return th + thdot * 0.05, thdot, -cost


def test_spec_defaults_and_validation():
    assert EnvSpec("cartpole").horizon == 500
    assert EnvSpec("pendulum").horizon == 200
    assert EnvSpec("cartpole").obs_dim == 4 and EnvSpec("pendulum").obs_dim == 3
    for bad in [dict(id="mountaincar"), dict(horizon=0), dict(gamma=1.0), dict(gamma=0.0)]:
        with pytest.raises(ConfigError):
            EnvSpec(**bad)


@pytest.mark.parametrize("env_id", ["cartpole", "pendulum"])
def test_reset_is_deterministic(env_id):
    _, a = envs.reset(EnvSpec(env_id), 8, 42)
    _, b = envs.reset(EnvSpec(env_id), 8, 42)
    _, c = envs.reset(EnvSpec(env_id), 8, 43)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.shape == (8, EnvSpec(env_id).obs_dim)
    # instances are distinct from each other
    assert len({tuple(row) for row in a}) == 8


def test_cartpole_matches_scalar_oracle():
    env = VecEnv(EnvSpec("cartpole"), 3)
    env.reset(0)
    rng = np.random.default_rng(1)
    for _ in range(8):
        before = env.state.copy()
        acts = rng.integers(0, 2, size=3)
        _, rew, dones, info = env.step(acts)
        for i in range(3):
            np.testing.assert_allclose(info["final_obs"][i], cartpole_oracle(before[i], acts[i]), rtol=1e-13,
                                       atol=1e-15)
        np.testing.assert_array_equal(rew, 1.0)
        assert not dones.any()


def test_pendulum_matches_scalar_oracle():
    env = VecEnv(EnvSpec("pendulum"), 4)
    env.reset(0)
    rng = np.random.default_rng(2)
    for _ in range(10):
        before = env.state.copy()
        u = rng.uniform(-3, 3, size=(4, 1))
        obs, rew, _, _ = env.step(u)
        for i in range(4):
            th, thdot, r = pendulum_oracle(before[i, 0], before[i, 1], u[i, 0])
            np.testing.assert_allclose(obs[i], [math.cos(th), math.sin(th), thdot], rtol=1e-13, atol=1e-14)
            assert rew[i] == pytest.approx(r, rel=1e-13)
        assert np.all(rew <= 0)


def test_cartpole_terminates_and_auto_resets():
    env = VecEnv(EnvSpec("cartpole"), 2)
    env.reset(3)
    total = np.zeros(2)
    for t in range(200):
        obs, rew, dones, info = env.step(np.ones(2, dtype=int))  # always push right: falls quickly
        total += rew
        if dones.all():
            break
    assert dones.all() and t < 100
    assert not info["truncated"].any()
    np.testing.assert_allclose(info["episode_returns"], total)
    # fresh state after auto-reset
    assert np.all(np.abs(obs) <= 0.05)
    assert np.all(env.t == 0)


@pytest.mark.parametrize("env_id", ["cartpole", "pendulum"])
def test_horizon_truncation(env_id):
    spec = EnvSpec(env_id, horizon=5)
    env = VecEnv(spec, 4)
    env.reset(0)
    zero = np.zeros(4, dtype=int) if spec.discrete else np.zeros((4, 1))
    for t in range(5):
        acts = (np.arange(4) % 2) if spec.discrete else zero
        _, _, dones, info = env.step(acts)
        if t < 4:
            assert not dones.any()
    assert dones.all() and info["truncated"].all()
    assert len(info["episode_returns"]) == 4


@pytest.mark.parametrize("env_id", ["cartpole", "pendulum"])
def test_observations_stay_within_documented_bounds(env_id):
    spec = EnvSpec(env_id)
    env = VecEnv(spec, 16)
    obs = env.reset(7)
    rng = np.random.default_rng(7)
    for _ in range(600):
        acts = rng.integers(0, 2, 16) if spec.discrete else rng.normal(0, 3, (16, 1))
        obs, rew, _, info = env.step(acts)
        assert np.all(np.abs(obs) <= OBS_BOUNDS[env_id])
        assert np.all(np.abs(info["final_obs"]) <= OBS_BOUNDS[env_id])
        assert np.all(np.isfinite(rew))


def test_same_actions_same_trajectory():
    def run():
        env = VecEnv(EnvSpec("pendulum"), 3)
        env.reset(11)
        rng = np.random.default_rng(5)
        return np.stack([env.step(rng.normal(size=(3, 1)))[0] for _ in range(250)])

    np.testing.assert_array_equal(run(), run())


def test_step_errors():
    env = VecEnv(EnvSpec("pendulum"), 2)
    with pytest.raises(ConfigError):
        env.step(np.zeros((2, 1)))
    env.reset(0)
    with pytest.raises(DivergenceError):
        env.step(np.array([[np.nan], [0.0]]))
    with pytest.raises(ConfigError):
        env.step(np.zeros((3, 1)))
