"""Stochastic policies: categorical logits or a diagonal Gaussian with state-independent log-std."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mirrorlab import nncore
from mirrorlab.envs import EnvSpec
from mirrorlab.errors import ConfigError

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class PolicyParams:
    kind: str  # "categorical" | "gaussian"
    net: nncore.MlpWeights
    log_std: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("categorical", "gaussian"):
            raise ConfigError(f"unknown policy kind {self.kind!r}")
        if self.kind == "gaussian":
            self.log_std = np.asarray(self.log_std, dtype=np.float64)
            if self.log_std.shape != (self.net.spec.output_dim,):
                raise ConfigError("log_std must have one entry per action dimension")
            if not np.all(np.isfinite(self.log_std)):
                raise ConfigError("log_std must be finite")

    @property
    def spec(self) -> nncore.MlpSpec:
        return self.net.spec

    @property
    def flat(self) -> np.ndarray:
        """Trainable parameters: network weights followed by log-std (Gaussian only)."""
        if self.kind == "gaussian":
            return np.concatenate([self.net.flat, self.log_std])
        return self.net.flat

    def with_flat(self, flat: np.ndarray) -> "PolicyParams":
        n = self.spec.n_params
        flat = np.asarray(flat, dtype=np.float64)
        if self.kind == "gaussian":
            return PolicyParams(self.kind, nncore.MlpWeights(self.spec, flat[:n].copy()), flat[n:].copy())
        return PolicyParams(self.kind, nncore.MlpWeights(self.spec, flat.copy()))

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "net": nncore.weights_to_dict(self.net)}
        if self.log_std is not None:
            d["log_std"] = self.log_std.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyParams":
        return cls(d["kind"], nncore.weights_from_dict(d["net"]), d.get("log_std"))


def make_policy(env_spec: EnvSpec, rng: np.random.Generator, hidden=(64, 64),
                activation: str = "tanh", log_std_init: float = 0.0) -> PolicyParams:
    spec = nncore.MlpSpec(env_spec.obs_dim, tuple(hidden), env_spec.action_dim, activation, True)
    net = nncore.init_weights(spec, rng)
    if env_spec.discrete:
        return PolicyParams("categorical", net)
    return PolicyParams("gaussian", net, np.full(env_spec.action_dim, float(log_std_init)))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _gaussian_logp(mean, log_std, actions):
    z = (actions - mean) * np.exp(-log_std)
    return (-0.5 * z * z - log_std - 0.5 * LOG_2PI).sum(axis=-1)


def sample_actions(policy: PolicyParams, states: np.ndarray, rng: np.random.Generator,
                   deterministic: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Draw one action per state row; returns ``(actions, log_probs)``."""
    out = nncore.mlp_forward(policy.spec, policy.net, states)
    if policy.kind == "categorical":
        logp_all = _log_softmax(out)
        if deterministic:
            actions = logp_all.argmax(axis=-1)
        else:
            # inverse-CDF sampling keeps exactly one uniform draw per row
            cdf = np.cumsum(np.exp(logp_all), axis=-1)
            u = rng.random(len(states))[:, None]
            actions = np.minimum((u > cdf).sum(axis=-1), out.shape[-1] - 1)
        return actions, logp_all[np.arange(len(states)), actions]
    if deterministic:
        actions = out.copy()
    else:
        actions = out + np.exp(policy.log_std) * rng.standard_normal(out.shape)
    return actions, _gaussian_logp(out, policy.log_std, actions)


def policy_log_prob(policy: PolicyParams, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Log-density of ``actions`` under ``policy`` for each state row."""
    states = np.atleast_2d(states)
    out = nncore.mlp_forward(policy.spec, policy.net, states)
    if policy.kind == "categorical":
        actions = np.asarray(actions, dtype=np.int64).reshape(len(states))
        return _log_softmax(out)[np.arange(len(states)), actions]
    actions = np.asarray(actions, dtype=np.float64).reshape(out.shape)
    return _gaussian_logp(out, policy.log_std, actions)


def entropy_per_state(policy: PolicyParams, states: np.ndarray) -> np.ndarray:
    states = np.atleast_2d(states)
    if policy.kind == "categorical":
        logp = _log_softmax(nncore.mlp_forward(policy.spec, policy.net, states))
        return -(np.exp(logp) * logp).sum(axis=-1)
    h = float(np.sum(policy.log_std + 0.5 * (LOG_2PI + 1.0)))
    return np.full(len(states), h)


def policy_entropy(policy: PolicyParams, states: np.ndarray) -> float:
    """Mean per-state entropy over ``states``."""
    return float(entropy_per_state(policy, states).mean())


def log_prob_forward(policy: PolicyParams, states: np.ndarray, actions: np.ndarray):
    """Log-probs plus the context :func:`log_prob_backward` needs."""
    out, cache = nncore.forward_cached(policy.spec, policy.net.flat, states)
    B = len(states)
    if policy.kind == "categorical":
        logp_all = _log_softmax(out)
        idx = np.asarray(actions, dtype=np.int64).reshape(B)
        return logp_all[np.arange(B), idx], (cache, logp_all, idx)
    actions = np.asarray(actions, dtype=np.float64).reshape(out.shape)
    z = (actions - out) * np.exp(-policy.log_std)
    logp = (-0.5 * z * z - policy.log_std - 0.5 * LOG_2PI).sum(axis=-1)
    return logp, (cache, z, None)


def log_prob_backward(policy: PolicyParams, ctx, dlogp: np.ndarray, dentropy: float = 0.0) -> np.ndarray:
    """Gradient of ``sum(dlogp * logp) + dentropy * mean_entropy`` w.r.t. ``policy.flat``."""
    cache = ctx[0]
    B = len(dlogp)
    if policy.kind == "categorical":
        _, logp_all, idx = ctx
        probs = np.exp(logp_all)
        g_out = -dlogp[:, None] * probs
        g_out[np.arange(B), idx] += dlogp
        if dentropy:
            # d/dlogits of -sum p log p  =  -p * (log p + H)
            H = -(probs * logp_all).sum(axis=-1, keepdims=True)
            g_out = g_out + (dentropy / B) * (-probs * (logp_all + H))
        dnet, _ = nncore.backward(policy.spec, cache, g_out)
        return dnet
    _, z, _ = ctx
    g_out = dlogp[:, None] * z * np.exp(-policy.log_std)
    dlog_std = (dlogp[:, None] * (z * z - 1.0)).sum(axis=0) + dentropy
    dnet, _ = nncore.backward(policy.spec, cache, g_out)
    return np.concatenate([dnet, dlog_std])
