"""Inner-loop policy optimisation for any drift.

Each iteration collects ``unroll_length * n_envs`` transitions, computes GAE,
normalises advantages over the batch and then runs ``n_update_epochs`` passes
of ``n_minibatches`` Adam steps on

    loss = -mean(r * A - f(r, A)) + value_loss_coeff * mean((V(s) - R)^2)
           - entropy_bonus_coeff * mean(H)

with ``r = exp(log pi(a|s) - old_log_prob)``. ``mode="pg"`` drops the drift and
takes a single full-batch step per iteration (vanilla policy gradient).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from mirrorlab import nncore
from mirrorlab.drift import ClampCounter, DriftSpec, describe, drift_to_dict, drift_value_and_dr, verify_drift
from mirrorlab.envs import EnvSpec, VecEnv
from mirrorlab.errors import ConfigError, DivergenceError
from mirrorlab.policy import (
    PolicyParams, entropy_per_state, log_prob_backward, log_prob_forward, make_policy, policy_entropy,
    policy_log_prob, sample_actions,
)
from mirrorlab.rollout import Batch, collect

log = logging.getLogger(__name__)

LOG_RATIO_CLAMP = 20.0

__all__ = [
    "TrainConfig", "RunRecord", "train", "evaluate", "evaluate_returns", "surrogate_loss_and_grad",
    "policy_log_prob", "policy_entropy",
]


@dataclass
class TrainConfig:
    total_timesteps: int = 200_000
    unroll_length: int = 32
    n_envs: int = 16
    n_minibatches: int = 8
    n_update_epochs: int = 4
    learning_rate: float = 3e-4
    grad_clip_norm: float = 0.5
    value_loss_coeff: float = 0.5
    entropy_bonus_coeff: float = 0.0
    gamma: float = 0.99
    lam: float = 0.95
    seed: int = 0
    mode: str = "mirror"
    policy_hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    log_std_init: float = 0.0
    eval_episodes: int = 10
    eval_interval: int = 10
    deterministic_eval: bool = False

    def __post_init__(self):
        self.policy_hidden = tuple(int(h) for h in self.policy_hidden)
        if self.mode not in ("mirror", "pg"):
            raise ConfigError(f"mode must be 'mirror' or 'pg', got {self.mode!r}")
        for name in ("unroll_length", "n_envs", "n_minibatches", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_update_epochs < 0 or self.total_timesteps < 0:
            raise ConfigError("n_update_epochs and total_timesteps must be >= 0")
        if self.batch_size % self.n_minibatches:
            raise ConfigError(
                f"n_minibatches={self.n_minibatches} does not divide batch size {self.batch_size}")
        if not 0.0 < self.gamma < 1.0 or not 0.0 <= self.lam <= 1.0:
            raise ConfigError("need gamma in (0, 1) and lam in [0, 1]")

    @property
    def batch_size(self) -> int:
        return self.unroll_length * self.n_envs

    @property
    def n_iterations(self) -> int:
        return self.total_timesteps // self.batch_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policy_hidden"] = list(self.policy_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunRecord:
    env: dict
    drift: dict
    config: dict
    metrics: list[dict] = field(default_factory=list)
    final_eval_return: float | None = None
    final_entropy: float | None = None
    diverged: bool = False
    divergence_reason: str | None = None
    policy: dict | None = None
    critic: dict | None = None

    METRIC_FIELDS = (
        "iteration", "timesteps", "train_return", "eval_return", "entropy", "policy_loss", "value_loss",
        "drift_mean", "first_pass_max_ratio_dev", "first_pass_drift_mean", "ratio_clamps", "log_ratio_clamps",
        "grad_norm",
    )

    def to_dict(self) -> dict:
        return {
            "format": "mirrorlab.runrecord", "version": 1, "env": self.env, "drift": self.drift,
            "config": self.config, "final_eval_return": self.final_eval_return,
            "final_entropy": self.final_entropy, "diverged": self.diverged,
            "divergence_reason": self.divergence_reason, "metrics": self.metrics,
            "policy": self.policy, "critic": self.critic,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        if d.get("format") != "mirrorlab.runrecord":
            raise ConfigError("not a mirrorlab run record")
        return cls(d["env"], d["drift"], d["config"], d["metrics"], d["final_eval_return"],
                   d["final_entropy"], d["diverged"], d.get("divergence_reason"), d.get("policy"),
                   d.get("critic"))

    def save(self, out_dir: str | Path, stem: str = "run") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out_dir / f"{stem}.json", out_dir / f"{stem}_metrics.csv"
        jpath.write_text(json.dumps(self.to_dict()))
        with open(cpath, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.METRIC_FIELDS)
            for m in self.metrics:
                w.writerow(["" if m.get(k) is None else repr(m[k]) for k in self.METRIC_FIELDS])
        return jpath, cpath

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def final_policy(self) -> PolicyParams:
        return PolicyParams.from_dict(self.policy)

    def series(self, key: str) -> np.ndarray:
        return np.array([np.nan if m.get(key) is None else m[key] for m in self.metrics], dtype=np.float64)


def _seed(seed: int, tag: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), tag])


def evaluate_returns(policy: PolicyParams, env_spec: EnvSpec, n_episodes: int, seed: int,
                     deterministic: bool = False) -> np.ndarray:
    """Undiscounted return of the first episode of each of ``n_episodes`` parallel instances."""
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    env_ss, act_ss = np.random.SeedSequence(int(seed)).spawn(2)
    env = VecEnv(env_spec, n_episodes)
    obs = env.reset(int(env_ss.generate_state(1)[0]))
    rng = np.random.default_rng(act_ss)
    totals = np.zeros(n_episodes)
    alive = np.ones(n_episodes, dtype=bool)
    while alive.any():
        actions, _ = sample_actions(policy, obs, rng, deterministic)
        obs, rewards, dones, _ = env.step(actions)
        totals += np.where(alive, rewards, 0.0)
        alive &= ~dones
    return totals


def evaluate(policy: PolicyParams, env_spec: EnvSpec, n_episodes: int, seed: int,
             deterministic: bool = False) -> float:
    return float(evaluate_returns(policy, env_spec, n_episodes, seed, deterministic).mean())


def surrogate_loss_and_grad(policy: PolicyParams, drift: DriftSpec | None, states, actions, old_log_probs,
                            advantages, entropy_coeff: float = 0.0, counter: ClampCounter | None = None):
    """Negative mean surrogate and its gradient w.r.t. ``policy.flat``.

    ``drift=None`` gives the undrifted surrogate ``r * A``. Returns
    ``(loss, grad, info)`` where ``info`` has the ratios and drift values.
    """
    B = len(advantages)
    logp, ctx = log_prob_forward(policy, states, actions)
    delta = logp - old_log_probs
    clamped = np.abs(delta) > LOG_RATIO_CLAMP
    r = np.exp(np.clip(delta, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP))
    if drift is None:
        f, fp = np.zeros(B), np.zeros(B)
    else:
        f, fp = drift_value_and_dr(drift, r, advantages, counter)
    obj = r * advantages - f
    loss = -float(obj.mean())
    dlogp = np.where(clamped, 0.0, -(advantages - fp) * r / B)
    ent = 0.0
    if entropy_coeff:
        ent = float(entropy_per_state(policy, states).mean())
        loss -= entropy_coeff * ent
    grad = log_prob_backward(policy, ctx, dlogp, dentropy=-entropy_coeff)
    return loss, grad, {"ratio": r, "drift": f, "log_ratio_clamps": int(clamped.sum()), "entropy": ent}


def value_loss_and_grad(critic: nncore.MlpWeights, states, returns, coeff: float):
    out, cache = nncore.forward_cached(critic.spec, critic.flat, states)
    err = out[:, 0] - returns
    loss = coeff * float(np.mean(err * err))
    g_out = (2.0 * coeff / len(returns)) * err[:, None]
    grad, _ = nncore.backward(critic.spec, cache, g_out)
    return loss, grad


def _mean_or_none(xs):
    return float(np.mean(xs)) if len(xs) else None


def train(env_spec: EnvSpec, drift: DriftSpec | None, cfg: TrainConfig, check_drift: bool = True,
          record_weights: bool = True) -> RunRecord:
    """Train a fresh policy and critic; returns the per-iteration record.

    Divergence (non-finite loss, gradient or action) stops training early and
    marks the record ``diverged`` instead of raising.
    """
    if cfg.mode == "mirror" and drift is None:
        raise ConfigError("mirror mode needs a drift")
    if check_drift and cfg.mode == "mirror":
        report = verify_drift(drift)
        if not report.valid:
            raise ConfigError(f"invalid drift {describe(drift)}: {report.failures}")

    init_ss, env_ss, act_ss, perm_ss, eval_ss = (_seed(cfg.seed, k) for k in range(5))
    init_rng = np.random.default_rng(init_ss)
    policy = make_policy(env_spec, init_rng, cfg.policy_hidden, cfg.activation, cfg.log_std_init)
    critic_spec = nncore.MlpSpec(env_spec.obs_dim, cfg.policy_hidden, 1, cfg.activation, True)
    critic = nncore.init_weights(critic_spec, init_rng)
    n_pol = len(policy.flat)
    params = np.concatenate([policy.flat, critic.flat])
    adam = nncore.AdamState.zeros(len(params), lr=cfg.learning_rate)

    env = VecEnv(env_spec, cfg.n_envs)
    env.reset(int(env_ss.generate_state(1)[0]))
    act_rng = np.random.default_rng(act_ss)
    perm_rng = np.random.default_rng(perm_ss)
    eval_seed = int(eval_ss.generate_state(1)[0])

    record = RunRecord(env=env_spec.to_dict(), drift=_drift_summary(drift, cfg), config=cfg.to_dict())
    pg = cfg.mode == "pg"
    n_epochs = 1 if pg and cfg.n_update_epochs > 0 else cfg.n_update_epochs
    n_mb = 1 if pg else cfg.n_minibatches
    step_drift = None if pg else drift
    mb_size = cfg.batch_size // n_mb

    def evaluate_now(p):
        return evaluate(p, env_spec, cfg.eval_episodes, eval_seed, cfg.deterministic_eval)

    try:
        for it in range(cfg.n_iterations):
            batch: Batch = collect(policy, env, cfg.unroll_length, act_rng, critic, cfg.gamma, cfg.lam)
            counter = ClampCounter()
            pol_losses, val_losses, drift_means, norms = [], [], [], []
            log_clamps = 0
            first_dev = first_drift = None
            for epoch in range(n_epochs):
                perm = perm_rng.permutation(len(batch))
                for mb in range(n_mb):
                    idx = perm[mb * mb_size:(mb + 1) * mb_size]
                    s = batch.states[idx]
                    p_loss, p_grad, info = surrogate_loss_and_grad(
                        policy, step_drift, s, batch.actions[idx], batch.old_log_probs[idx],
                        batch.advantages[idx], cfg.entropy_bonus_coeff, counter)
                    v_loss, v_grad = value_loss_and_grad(critic, s, batch.returns[idx], cfg.value_loss_coeff)
                    if epoch == 0 and mb == 0:
                        first_dev = float(np.max(np.abs(info["ratio"] - 1.0)))
                        first_drift = float(np.mean(info["drift"]))
                    grad = np.concatenate([p_grad, v_grad])
                    if not (math.isfinite(p_loss) and math.isfinite(v_loss) and np.all(np.isfinite(grad))):
                        raise DivergenceError(f"non-finite loss or gradient at iteration {it}")
                    grad, norm = nncore.clip_by_global_norm(grad, cfg.grad_clip_norm)
                    adam, params = nncore.adam_step(adam, params, grad)
                    policy = policy.with_flat(params[:n_pol])
                    critic = nncore.MlpWeights(critic_spec, params[n_pol:])
                    pol_losses.append(p_loss)
                    val_losses.append(v_loss)
                    drift_means.append(float(np.mean(info["drift"])))
                    norms.append(norm)
                    log_clamps += info["log_ratio_clamps"]
            eval_ret = None
            if cfg.eval_interval > 0 and (it + 1) % cfg.eval_interval == 0:
                eval_ret = evaluate_now(policy)
            record.metrics.append({
                "iteration": it, "timesteps": (it + 1) * cfg.batch_size,
                "train_return": _mean_or_none(batch.episode_returns), "eval_return": eval_ret,
                "entropy": policy_entropy(policy, batch.states),
                "policy_loss": _mean_or_none(pol_losses), "value_loss": _mean_or_none(val_losses),
                "drift_mean": _mean_or_none(drift_means), "first_pass_max_ratio_dev": first_dev,
                "first_pass_drift_mean": first_drift, "ratio_clamps": counter.count,
                "log_ratio_clamps": log_clamps, "grad_norm": _mean_or_none(norms),
            })
    except (DivergenceError, FloatingPointError) as exc:
        log.warning("training diverged: %s", exc)
        record.diverged = True
        record.divergence_reason = str(exc)

    if not record.diverged:
        record.final_eval_return = evaluate_now(policy)
        record.final_entropy = float(policy_entropy(policy, np.zeros((1, env_spec.obs_dim)))) \
            if policy.kind == "gaussian" else _last_entropy(record, policy, env_spec)
    if record_weights:
        record.policy = policy.to_dict()
        record.critic = nncore.weights_to_dict(critic)
    return record


def _last_entropy(record: RunRecord, policy: PolicyParams, env_spec: EnvSpec) -> float:
    if record.metrics:
        return record.metrics[-1]["entropy"]
    env = VecEnv(env_spec, 16)
    return policy_entropy(policy, env.reset(0))


def _drift_summary(drift: DriftSpec | None, cfg: TrainConfig) -> dict:
    if cfg.mode == "pg" or drift is None:
        return {"kind": "none", "mode": cfg.mode}
    d = drift_to_dict(drift)
    d["description"] = describe(drift)
    return d
