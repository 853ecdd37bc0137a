import math

import numpy as np
import pytest

from mirrorlab import nncore
from mirrorlab.drift import Constant, Dpo, PpoClip, learned_drift, objective_per_sample
from mirrorlab.envs import EnvSpec
from mirrorlab.errors import ConfigError
from mirrorlab.policy import (
    PolicyParams, entropy_per_state, log_prob_backward, log_prob_forward, make_policy, policy_entropy,
    policy_log_prob, sample_actions,
)
from mirrorlab.trainer import RunRecord, TrainConfig, evaluate, evaluate_returns, surrogate_loss_and_grad, train

TINY = dict(total_timesteps=1024, unroll_length=16, n_envs=8, n_minibatches=4, n_update_epochs=2,
            policy_hidden=(8,), eval_episodes=3, eval_interval=2)


# --- policies ------------------------------------------------------------------


def test_entropy_closed_forms():
    uniform = PolicyParams("categorical", nncore.zero_weights(nncore.MlpSpec(4, (3,), 2)))
    assert policy_entropy(uniform, np.zeros((3, 4))) == pytest.approx(math.log(2), abs=1e-15)
    g = PolicyParams("gaussian", nncore.zero_weights(nncore.MlpSpec(3, (3,), 1)), np.zeros(1))
    assert policy_entropy(g, np.zeros((1, 3))) == pytest.approx(0.5 * math.log(2 * math.pi * math.e), abs=1e-15)
    assert policy_entropy(g, np.zeros((1, 3))) == pytest.approx(1.418939, abs=1e-6)


def test_gaussian_entropy_ignores_state_and_sums_dims():
    spec = nncore.MlpSpec(3, (4,), 2)
    log_std = np.array([-0.5, 0.3])
    p = PolicyParams("gaussian", nncore.init_weights(spec, np.random.default_rng(0)), log_std)
    states = np.random.default_rng(1).standard_normal((10, 3)) * 5
    h = entropy_per_state(p, states)
    ref = sum(0.5 * math.log(2 * math.pi * math.e * math.exp(2 * s)) for s in log_std)
    np.testing.assert_allclose(h, ref, rtol=1e-14)


def test_categorical_entropy_matches_definition():
    p = make_policy(EnvSpec("cartpole"), np.random.default_rng(2), hidden=(8,))
    s = np.random.default_rng(3).standard_normal((6, 4))
    logits = nncore.mlp_forward(p.spec, p.net, s)
    q = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(entropy_per_state(p, s), -(q * np.log(q)).sum(axis=1), rtol=1e-12)


def test_gaussian_log_prob_matches_density():
    p = make_policy(EnvSpec("pendulum"), np.random.default_rng(4), hidden=(8,), log_std_init=-0.3)
    s = np.random.default_rng(5).standard_normal((5, 3))
    a = np.random.default_rng(6).standard_normal((5, 1))
    mu = nncore.mlp_forward(p.spec, p.net, s)[:, 0]
    sd = math.exp(-0.3)
    ref = -0.5 * ((a[:, 0] - mu) / sd) ** 2 - math.log(sd) - 0.5 * math.log(2 * math.pi)
    np.testing.assert_allclose(policy_log_prob(p, s, a), ref, rtol=1e-13)


def test_sample_actions_logp_consistent():
    for env in ("cartpole", "pendulum"):
        p = make_policy(EnvSpec(env), np.random.default_rng(7), hidden=(8,))
        s = np.random.default_rng(8).standard_normal((20, EnvSpec(env).obs_dim))
        a, logp = sample_actions(p, s, np.random.default_rng(9))
        np.testing.assert_allclose(logp, policy_log_prob(p, s, a), atol=1e-13)


@pytest.mark.parametrize("env_id", ["cartpole", "pendulum"])
def test_log_prob_backward_with_entropy_matches_fd(env_id):
    env = EnvSpec(env_id)
    p = make_policy(env, np.random.default_rng(10), hidden=(3,), log_std_init=0.2)
    rng = np.random.default_rng(11)
    s = rng.standard_normal((7, env.obs_dim))
    a, _ = sample_actions(p, s, rng)
    w = rng.standard_normal(7)

    def objective(flat):
        q = p.with_flat(flat)
        return float(w @ policy_log_prob(q, s, a)) + 0.3 * policy_entropy(q, s)

    _, ctx = log_prob_forward(p, s, a)
    g = log_prob_backward(p, ctx, w, dentropy=0.3)
    fd = np.array([(objective(p.flat + h) - objective(p.flat - h)) / 2e-6
                   for h in np.eye(len(p.flat)) * 1e-6])
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


# --- surrogate -------------------------------------------------------------------


def _surrogate_setup(env_id, seed):
    env = EnvSpec(env_id)
    rng = np.random.default_rng(seed)
    old = make_policy(env, rng, hidden=(2,))
    s = rng.standard_normal((32, env.obs_dim))
    a, old_logp = sample_actions(old, s, rng)
    cur = old.with_flat(old.flat + 0.3 * rng.standard_normal(len(old.flat)))
    adv = rng.standard_normal(32)
    return cur, s, a, old_logp, adv


@pytest.mark.parametrize("drift", [PpoClip(0.2), Dpo(2.0, 0.6), None])
@pytest.mark.parametrize("env_id", ["cartpole", "pendulum"])
def test_surrogate_gradient_matches_fd(drift, env_id):
    errs = []
    for seed in range(5):
        cur, s, a, old_logp, adv = _surrogate_setup(env_id, seed)

        def loss(flat):
            return surrogate_loss_and_grad(cur.with_flat(flat), drift, s, a, old_logp, adv)[0]

        _, g, _ = surrogate_loss_and_grad(cur, drift, s, a, old_logp, adv)
        fd = np.array([(loss(cur.flat + h) - loss(cur.flat - h)) / 2e-6 for h in np.eye(len(cur.flat)) * 1e-6])
        errs.append(np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-8))
    assert max(errs) < 1e-4


def test_ppo_surrogate_is_negative_clip_objective():
    cur, s, a, old_logp, adv = _surrogate_setup("cartpole", 0)
    loss, _, info = surrogate_loss_and_grad(cur, PpoClip(0.2), s, a, old_logp, adv)
    r = np.exp(policy_log_prob(cur, s, a) - old_logp)
    ref = -np.mean(np.minimum(r * adv, np.clip(r, 0.8, 1.2) * adv))
    assert loss == pytest.approx(ref, abs=1e-13)
    assert loss == pytest.approx(-np.mean(objective_per_sample(PpoClip(0.2), r, adv)), abs=1e-13)


def test_first_pass_is_policy_gradient():
    """At the collecting policy every drift has r = 1 and the vanilla gradient."""
    _, s, a, _, adv = _surrogate_setup("pendulum", 1)
    p = make_policy(EnvSpec("pendulum"), np.random.default_rng(2), hidden=(2,))
    old_logp = policy_log_prob(p, s, a)
    _, g_pg, _ = surrogate_loss_and_grad(p, None, s, a, old_logp, adv)
    for d in (PpoClip(0.2), Dpo(2.0, 0.6), learned_drift(np.random.default_rng(3), hidden=(16,))):
        _, g, info = surrogate_loss_and_grad(p, d, s, a, old_logp, adv)
        assert np.max(np.abs(info["ratio"] - 1)) == 0.0
        np.testing.assert_array_equal(info["drift"], 0.0)
        np.testing.assert_allclose(g, g_pg, rtol=0, atol=1e-15)


def test_log_ratio_clamp_counted():
    cur, s, a, old_logp, adv = _surrogate_setup("cartpole", 3)
    old_logp = old_logp.copy()
    old_logp[:4] += 50.0
    loss, g, info = surrogate_loss_and_grad(cur, PpoClip(0.2), s, a, old_logp, adv)
    assert info["log_ratio_clamps"] == 4
    assert np.isfinite(loss) and np.all(np.isfinite(g))


# --- evaluate ----------------------------------------------------------------------


def test_random_cartpole_policy_return_band():
    p = PolicyParams("categorical", nncore.zero_weights(nncore.MlpSpec(4, (8,), 2)))
    ret = evaluate(p, EnvSpec("cartpole"), 1000, seed=0)
    assert 20.0 <= ret <= 25.0
    assert evaluate(p, EnvSpec("cartpole"), 50, seed=1) == evaluate(p, EnvSpec("cartpole"), 50, seed=1)


def test_balancing_policy_hits_horizon():
    # push toward the side the pole leans: theta + theta_dot > 0 -> action 1
    spec = nncore.MlpSpec(4, (1,), 2, "relu", use_bias=False)
    flat = np.array([0.0, 0.0, 1.0, 1.0, 0.0, 1e4])
    p = PolicyParams("categorical", nncore.MlpWeights(spec, flat))
    rets = evaluate_returns(p, EnvSpec("cartpole"), 5, seed=0, deterministic=True)
    np.testing.assert_array_equal(rets, 500.0)


# --- training loop -------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(unroll_length=5, n_envs=3, n_minibatches=2)
    with pytest.raises(ConfigError):
        TrainConfig(mode="trpo")
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rte": 1.0})
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()


def test_train_rejects_invalid_drift():
    with pytest.raises(ConfigError):
        train(EnvSpec("cartpole"), Constant(1.0), TrainConfig(**TINY))
    with pytest.raises(ConfigError):
        train(EnvSpec("cartpole"), None, TrainConfig(**TINY))


def test_zero_epochs_leaves_policy_unchanged():
    short = train(EnvSpec("cartpole"), PpoClip(0.2), TrainConfig(**{**TINY, "n_update_epochs": 0}))
    none = train(EnvSpec("cartpole"), PpoClip(0.2), TrainConfig(**{**TINY, "n_update_epochs": 0,
                                                                     "total_timesteps": 0}))
    assert short.policy == none.policy
    assert short.final_eval_return == none.final_eval_return
    init = short.final_policy()
    assert short.final_eval_return == evaluate(init, EnvSpec("cartpole"), 3, _eval_seed(0))


def _eval_seed(seed):
    return int(np.random.SeedSequence([seed, 4]).generate_state(1)[0])


@pytest.mark.parametrize("drift", [PpoClip(0.2), Dpo(2.0, 0.6), learned_drift(np.random.default_rng(0), hidden=(16,)),
                                   learned_drift(np.random.default_rng(1), hidden=(16,), ppo_residual=False)])
@pytest.mark.parametrize("env_id", ["cartpole", "pendulum"])
def test_first_pass_invariant_every_iteration(drift, env_id):
    rec = train(EnvSpec(env_id), drift, TrainConfig(**TINY))
    assert len(rec.metrics) == TrainConfig(**TINY).n_iterations
    for m in rec.metrics:
        assert m["first_pass_max_ratio_dev"] <= 1e-6
        assert m["first_pass_drift_mean"] <= 1e-6


def test_record_fields_and_roundtrip(tmp_path):
    rec = train(EnvSpec("pendulum"), Dpo(2.0, 0.6), TrainConfig(**TINY))
    assert not rec.diverged
    assert [m["iteration"] for m in rec.metrics] == list(range(8))
    assert [m["eval_return"] is not None for m in rec.metrics] == [False, True] * 4
    for m in rec.metrics:
        assert set(m) == set(RunRecord.METRIC_FIELDS)
    jpath, cpath = rec.save(tmp_path, "r")
    back = RunRecord.load(jpath)
    assert back.to_dict() == rec.to_dict()
    assert len(cpath.read_text().splitlines()) == 9
    assert rec.final_entropy == pytest.approx(policy_entropy(back.final_policy(), np.zeros((1, 3))))


def test_training_is_reproducible(tmp_path):
    a = train(EnvSpec("cartpole"), Dpo(2.0, 0.6), TrainConfig(**TINY))
    b = train(EnvSpec("cartpole"), Dpo(2.0, 0.6), TrainConfig(**TINY))
    a.save(tmp_path, "a")
    b.save(tmp_path, "b")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a_metrics.csv").read_bytes() == (tmp_path / "b_metrics.csv").read_bytes()
    c = train(EnvSpec("cartpole"), Dpo(2.0, 0.6), TrainConfig(**{**TINY, "seed": 1}))
    assert c.policy != a.policy


def test_pg_mode_takes_one_step_per_iteration():
    rec = train(EnvSpec("cartpole"), None, TrainConfig(**{**TINY, "mode": "pg"}))
    assert rec.drift == {"kind": "none", "mode": "pg"}
    assert all(m["drift_mean"] == 0.0 for m in rec.metrics)
    assert not rec.diverged


def test_nan_drift_marks_run_diverged():
    rec = train(EnvSpec("cartpole"), Constant(float("nan")), TrainConfig(**TINY), check_drift=False)
    assert rec.diverged and "non-finite" in rec.divergence_reason
    assert rec.final_eval_return is None
    assert rec.policy is not None


def test_cartpole_learns_quickly():
    cfg = TrainConfig(total_timesteps=40_000, eval_interval=0, eval_episodes=10)
    rec = train(EnvSpec("cartpole"), PpoClip(0.2), cfg)
    assert rec.final_eval_return > 100
