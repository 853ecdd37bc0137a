"""Trajectory collection, GAE and batch-level advantage normalisation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mirrorlab import nncore
from mirrorlab.envs import VecEnv
from mirrorlab.errors import ConfigError, DivergenceError
from mirrorlab.policy import PolicyParams, sample_actions

log = logging.getLogger(__name__)


@dataclass
class Batch:
    """One on-policy batch, flattened time-major to ``T * N`` rows."""

    states: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    episode_returns: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.old_log_probs)

    def dump_csv(self, path: str | Path) -> None:
        """Columnar debug dump, one row per transition."""
        obs_dim = self.states.shape[1]
        acts = self.actions.reshape(len(self), -1)
        header = ([f"state_{i}" for i in range(obs_dim)] + [f"action_{i}" for i in range(acts.shape[1])]
                  + ["old_log_prob", "reward", "done", "value", "advantage", "return"])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(len(self)):
                w.writerow([repr(float(v)) for v in self.states[i]] + [repr(float(v)) for v in acts[i]] + [
                    repr(float(self.old_log_probs[i])), repr(float(self.rewards[i])), int(self.dones[i]),
                    repr(float(self.values[i])), repr(float(self.advantages[i])), repr(float(self.returns[i]))])


def gae(rewards, values, dones, bootstrap_values, gamma: float, lam: float):
    """Generalised advantage estimation.

    Arrays are ``(T,)`` or ``(T, N)``; ``bootstrap_values`` is the value of the
    state after the last step. ``dones[t]`` cuts both the bootstrap and the
    recursion at step ``t``. Returns ``(advantages, returns)``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    notdone = 1.0 - np.asarray(dones, dtype=np.float64)
    T = len(rewards)
    adv = np.zeros_like(rewards)
    next_value = np.asarray(bootstrap_values, dtype=np.float64)
    running = np.zeros_like(next_value)
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * next_value * notdone[t] - values[t]
        running = delta + gamma * lam * notdone[t] * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def normalise_advantages(adv: np.ndarray) -> np.ndarray:
    """Zero mean, unit (1/N) standard deviation over the whole batch."""
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size < 2:
        raise ConfigError("advantage normalisation needs at least 2 samples")
    centred = adv - adv.mean()
    std = np.sqrt(np.mean(centred * centred))
    if std < 1e-12:
        log.warning("advantages have zero variance; returning zeros")
        return np.zeros_like(adv)
    return centred / std


def value_forward(critic: nncore.MlpWeights | None, states: np.ndarray) -> np.ndarray:
    if critic is None:
        return np.zeros(len(states))
    return nncore.mlp_forward(critic.spec, critic, states)[:, 0]


def collect(policy: PolicyParams, env: VecEnv, unroll_length: int, rng: np.random.Generator,
            critic: nncore.MlpWeights | None = None, gamma: float = 0.99, lam: float = 0.95,
            normalise: bool = True) -> Batch:
    """Roll ``env`` forward ``unroll_length`` steps under ``policy``.

    ``env`` keeps its state between calls, so consecutive batches continue the
    same episodes. Truncated episodes are bootstrapped with the critic's value
    of the final observation.
    """
    if unroll_length < 1:
        raise ConfigError("unroll_length must be >= 1")
    if env.obs is None:
        raise ConfigError("env must be reset before collecting")
    T, N = unroll_length, env.n_envs
    obs_buf = np.zeros((T, N, env.spec.obs_dim))
    act_shape = (T, N) if policy.kind == "categorical" else (T, N, policy.spec.output_dim)
    act_buf = np.zeros(act_shape, dtype=np.int64 if policy.kind == "categorical" else np.float64)
    logp_buf = np.zeros((T, N))
    rew_buf = np.zeros((T, N))
    done_buf = np.zeros((T, N), dtype=bool)
    val_buf = np.zeros((T, N))
    finished: list[float] = []

    obs = env.obs
    for t in range(T):
        actions, logp = sample_actions(policy, obs, rng)
        if not np.all(np.isfinite(logp)):
            bad = np.flatnonzero(~np.isfinite(logp))
            raise DivergenceError(f"non-finite log-prob at step {t}, instances {bad.tolist()}")
        obs_buf[t] = obs
        act_buf[t] = actions
        logp_buf[t] = logp
        val_buf[t] = value_forward(critic, obs)
        obs, rewards, dones, info = env.step(actions)
        rewards = rewards.astype(np.float64)
        trunc = info["truncated"]
        if trunc.any() and critic is not None:
            rewards = rewards + gamma * np.where(trunc, value_forward(critic, info["final_obs"]), 0.0)
        rew_buf[t] = rewards
        done_buf[t] = dones
        finished.extend(info["episode_returns"].tolist())

    bootstrap = value_forward(critic, obs)
    adv, ret = gae(rew_buf, val_buf, done_buf, bootstrap, gamma, lam)
    adv = adv.reshape(T * N)
    if normalise:
        adv = normalise_advantages(adv)
    return Batch(
        states=obs_buf.reshape(T * N, -1),
        actions=act_buf.reshape((T * N,) + act_buf.shape[2:]),
        old_log_probs=logp_buf.reshape(T * N),
        rewards=rew_buf.reshape(T * N),
        dones=done_buf.reshape(T * N),
        values=val_buf.reshape(T * N),
        advantages=adv,
        returns=ret.reshape(T * N),
        episode_returns=finished,
    )
