"""Vectorised, seedable cart-pole and pendulum.

Dynamics follow the classic-control formulations (Euler-integrated cart-pole
with a 12 degree / 2.4 m failure box, torque-limited pendulum with the
``theta^2 + 0.1 thetadot^2 + 0.001 u^2`` cost). Instances that finish an
episode are reset inside :meth:`VecEnv.step`; the observation that ended the
episode is returned in ``info["final_obs"]``.

Observation bounds (checked by the property tests):

* cartpole: ``|x| <= 2.4 + 0.1``, ``|theta| <= 0.21 + 0.1``, ``|xdot|, |thetadot| <= 10``
* pendulum: ``|cos|, |sin| <= 1``, ``|thetadot| <= 8``
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mirrorlab.errors import ConfigError, DivergenceError

ENV_IDS = ("cartpole", "pendulum")

OBS_BOUNDS = {
    "cartpole": np.array([2.5, 10.0, 0.31, 10.0]),
    "pendulum": np.array([1.0, 1.0, 8.0]),
}


@dataclass(frozen=True)
class EnvSpec:
    id: str = "cartpole"
    horizon: int | None = None
    gamma: float = 0.99

    def __post_init__(self):
        if self.id not in ENV_IDS:
            raise ConfigError(f"unknown env {self.id!r}; expected one of {ENV_IDS}")
        if self.horizon is None:
            object.__setattr__(self, "horizon", 500 if self.id == "cartpole" else 200)
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")

    @property
    def obs_dim(self) -> int:
        return 4 if self.id == "cartpole" else 3

    @property
    def discrete(self) -> bool:
        return self.id == "cartpole"

    @property
    def action_dim(self) -> int:
        """Number of logits for discrete envs, action dimension otherwise."""
        return 2 if self.id == "cartpole" else 1

    @property
    def action_bound(self) -> float:
        return 2.0

    def to_dict(self) -> dict:
        return {"id": self.id, "horizon": self.horizon, "gamma": self.gamma}


# cart-pole constants
GRAVITY = 9.8
MASS_CART = 1.0
MASS_POLE = 0.1
TOTAL_MASS = MASS_CART + MASS_POLE
HALF_LENGTH = 0.5
POLE_MOMENT = MASS_POLE * HALF_LENGTH
FORCE_MAG = 10.0
TAU = 0.02
THETA_LIMIT = 12 * 2 * np.pi / 360
X_LIMIT = 2.4

# pendulum constants
MAX_SPEED = 8.0
MAX_TORQUE = 2.0
DT = 0.05
G = 10.0
MASS = 1.0
LENGTH = 1.0


def _cartpole_init(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-0.05, 0.05, size=4)


def _pendulum_init(rng: np.random.Generator) -> np.ndarray:
    return np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-1.0, 1.0)])


def _cartpole_step(s: np.ndarray, a: np.ndarray):
    x, x_dot, theta, theta_dot = s.T
    force = np.where(a == 1, FORCE_MAG, -FORCE_MAG)
    cos, sin = np.cos(theta), np.sin(theta)
    temp = (force + POLE_MOMENT * theta_dot ** 2 * sin) / TOTAL_MASS
    theta_acc = (GRAVITY * sin - cos * temp) / (
        HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos ** 2 / TOTAL_MASS))
    x_acc = temp - POLE_MOMENT * theta_acc * cos / TOTAL_MASS
    x = x + TAU * x_dot
    x_dot = x_dot + TAU * x_acc
    theta = theta + TAU * theta_dot
    theta_dot = theta_dot + TAU * theta_acc
    new = np.stack([x, x_dot, theta, theta_dot], axis=1)
    failed = (np.abs(x) > X_LIMIT) | (np.abs(theta) > THETA_LIMIT)
    return new, np.ones(len(s)), failed


def _angle_normalize(th):
    return ((th + np.pi) % (2 * np.pi)) - np.pi


def _pendulum_step(s: np.ndarray, u: np.ndarray):
    th, thdot = s.T
    u = np.clip(u.reshape(len(s)), -MAX_TORQUE, MAX_TORQUE)
    cost = _angle_normalize(th) ** 2 + 0.1 * thdot ** 2 + 0.001 * u ** 2
    thdot = thdot + (3 * G / (2 * LENGTH) * np.sin(th) + 3.0 / (MASS * LENGTH ** 2) * u) * DT
    thdot = np.clip(thdot, -MAX_SPEED, MAX_SPEED)
    th = th + thdot * DT
    return np.stack([th, thdot], axis=1), -cost, np.zeros(len(s), dtype=bool)


def _pendulum_obs(s: np.ndarray) -> np.ndarray:
    return np.stack([np.cos(s[:, 0]), np.sin(s[:, 0]), s[:, 1]], axis=1)


class VecEnv:
    """``n_envs`` independent copies of one environment, stepped together.

    Each instance owns its own generator (spawned from ``seed``), so an
    instance's reset sequence does not depend on what the others do.
    """

    def __init__(self, spec: EnvSpec, n_envs: int):
        if n_envs < 1:
            raise ConfigError("n_envs must be >= 1")
        self.spec = spec
        self.n_envs = n_envs
        self._init = _cartpole_init if spec.id == "cartpole" else _pendulum_init
        self._step = _cartpole_step if spec.id == "cartpole" else _pendulum_step
        self.state: np.ndarray | None = None
        self.t = np.zeros(n_envs, dtype=np.int64)
        self.rngs: list[np.random.Generator] = []
        self.obs: np.ndarray | None = None
        self.ep_return = np.zeros(n_envs)

    def _observe(self, s: np.ndarray) -> np.ndarray:
        return s.copy() if self.spec.id == "cartpole" else _pendulum_obs(s)

    def reset(self, seed: int) -> np.ndarray:
        children = np.random.SeedSequence(seed).spawn(self.n_envs)
        self.rngs = [np.random.default_rng(c) for c in children]
        self.state = np.stack([self._init(r) for r in self.rngs])
        self.t = np.zeros(self.n_envs, dtype=np.int64)
        self.ep_return = np.zeros(self.n_envs)
        self.obs = self._observe(self.state)
        return self.obs

    def step(self, actions: np.ndarray):
        """Advance every instance by one step.

        Returns ``(obs, rewards, dones, info)`` with info keys:

        - ``truncated``: the episode hit the horizon without failing
        - ``final_obs``: pre-reset observation of every instance
        - ``episode_returns``: undiscounted returns of the episodes that ended
        """
        if self.state is None:
            raise ConfigError("reset() must be called before step()")
        actions = np.asarray(actions)
        if actions.shape[0] != self.n_envs:
            raise ConfigError(f"expected {self.n_envs} actions, got {actions.shape[0]}")
        if not np.all(np.isfinite(actions)):
            raise DivergenceError("non-finite action passed to env.step")
        if self.spec.discrete:
            actions = actions.astype(np.int64).reshape(self.n_envs)
        else:
            actions = np.clip(actions.astype(np.float64), -self.spec.action_bound, self.spec.action_bound)
        state, rewards, failed = self._step(self.state, actions)
        self.t = self.t + 1
        truncated = (self.t >= self.spec.horizon) & ~failed
        dones = failed | truncated
        final_obs = self._observe(state)
        self.ep_return = self.ep_return + rewards
        finished = self.ep_return[dones].copy()
        self.ep_return[dones] = 0.0
        if dones.any():
            for i in np.flatnonzero(dones):
                state[i] = self._init(self.rngs[i])
                self.t[i] = 0
        self.state = state
        self.obs = self._observe(state)
        return self.obs, rewards, dones, {
            "truncated": truncated, "final_obs": final_obs, "episode_returns": finished}


def reset(spec: EnvSpec, n_envs: int, seed: int) -> tuple[VecEnv, np.ndarray]:
    env = VecEnv(spec, n_envs)
    obs = env.reset(seed)
    return env, obs


def step(env: VecEnv, actions: np.ndarray):
    """Functional alias for :meth:`VecEnv.step` (mutates ``env``)."""
    return (env,) + tuple(env.step(actions))
