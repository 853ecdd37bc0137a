"""Antithetic evolution strategies over learned-drift weights.

The search point is the flat weight vector of a bias-free drift network. Its
fitness is the evaluation return of a policy trained from scratch with that
drift. Each generation draws ``population_size / 2`` Gaussian directions,
evaluates ``phi + sigma*eps`` and ``phi - sigma*eps`` with the same inner seed,
turns the fitness pairs into a gradient estimate and takes an Adam ascent step.

Perturbation ``i`` of generation ``g`` comes from
``default_rng([seed, g, i])``, so any generation can be replayed on its own.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from mirrorlab import nncore
from mirrorlab.drift import N_FEATURES, Learned, PpoClip, learned_drift
from mirrorlab.envs import EnvSpec
from mirrorlab.errors import ConfigError, DivergenceError
from mirrorlab.trainer import TrainConfig, train

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mirrorlab.es_checkpoint"
HISTORY_FIELDS = ("generation", "sigma", "mean_fitness", "max_fitness", "best_so_far", "n_diverged", "grad_norm")


@dataclass
class EsConfig:
    population_size: int = 8
    sigma_init: float = 0.04
    sigma_decay: float = 0.999
    sigma_limit: float = 0.01
    n_generations: int = 20
    learning_rate: float | None = None
    eval_episodes: int = 10
    envs: tuple[str, ...] = ("cartpole",)
    ppo_residual: bool = True
    hidden: tuple[int, ...] = (128,)
    activation: str = "tanh"
    epsilon: float = 0.2
    xi: float = 1e-6
    feature_mask: tuple[bool, ...] = (True,) * N_FEATURES
    fitness_shaping: str = "centered_rank"
    zscore_baseline: bool = False
    baseline_seeds: int = 3
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.envs = tuple(self.envs)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.feature_mask = tuple(bool(m) for m in self.feature_mask)
        if self.population_size < 2 or self.population_size % 2:
            raise ConfigError("population_size must be even and >= 2")
        if not 0 < self.sigma_limit <= self.sigma_init:
            raise ConfigError("need 0 < sigma_limit <= sigma_init")
        if self.fitness_shaping not in ("centered_rank", "none"):
            raise ConfigError(f"unknown fitness_shaping {self.fitness_shaping!r}")
        if not self.envs:
            raise ConfigError("at least one meta-training env is required")
        for e in self.envs:
            EnvSpec(e)
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)

    @property
    def n_pairs(self) -> int:
        return self.population_size // 2

    @property
    def outer_lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 0.003 if self.ppo_residual else 0.006

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(envs=list(self.envs), hidden=list(self.hidden),
                 feature_mask=[int(m) for m in self.feature_mask], train=self.train.to_dict())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EsConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown es config keys: {sorted(unknown)}")
        d = dict(d)
        if "train" in d and isinstance(d["train"], dict):
            d["train"] = TrainConfig.from_dict(d["train"])
        return cls(**d)


def sigma_at(cfg: EsConfig, generation: int) -> float:
    return max(cfg.sigma_limit, cfg.sigma_init * cfg.sigma_decay ** generation)


def perturbation(seed: int, generation: int, pair: int, dim: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(generation), int(pair)]).standard_normal(dim)


def perturbations(seed: int, generation: int, n_pairs: int, dim: int) -> np.ndarray:
    return np.stack([perturbation(seed, generation, i, dim) for i in range(n_pairs)])


def centered_ranks(x: np.ndarray) -> np.ndarray:
    """Map values to ranks spread evenly over [-0.5, 0.5]; ties share their mean rank."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        return np.zeros_like(x)
    return (rankdata(x.ravel()).reshape(x.shape) - 1.0) / (x.size - 1) - 0.5


def antithetic_estimate(eps: np.ndarray, f_plus, f_minus, sigma: float, shaping: str | None = "centered_rank"):
    """Gradient estimate ``sum_i (F+_i - F-_i) eps_i / (2 n sigma)``.

    Pairs with a non-finite fitness on either side are dropped. Returns
    ``(gradient, n_dropped)``.
    """
    if sigma <= 0:
        raise ConfigError("sigma must be > 0")
    f_plus = np.asarray(f_plus, dtype=np.float64)
    f_minus = np.asarray(f_minus, dtype=np.float64)
    ok = np.isfinite(f_plus) & np.isfinite(f_minus)
    n_dropped = int((~ok).sum())
    if not ok.any():
        raise DivergenceError("every fitness pair is non-finite")
    eps, f_plus, f_minus = eps[ok], f_plus[ok], f_minus[ok]
    if shaping == "centered_rank":
        shaped = centered_ranks(np.concatenate([f_plus, f_minus]))
        f_plus, f_minus = shaped[:len(f_plus)], shaped[len(f_plus):]
    n = len(f_plus)
    return (f_plus - f_minus) @ eps / (2.0 * n * sigma), n_dropped


def es_gradient(phi: np.ndarray, fitness_fn: Callable[[np.ndarray], float], n_pairs: int, sigma: float,
                seed: int, generation: int = 0, shaping: str | None = "centered_rank") -> np.ndarray:
    """Antithetic ES gradient of ``fitness_fn`` at ``phi`` (sequential evaluation)."""
    if n_pairs < 1:
        raise ConfigError("n_pairs must be >= 1")
    phi = np.asarray(phi, dtype=np.float64)
    eps = perturbations(seed, generation, n_pairs, phi.size).reshape((n_pairs,) + phi.shape)
    f_plus = np.array([fitness_fn(phi + sigma * e) for e in eps])
    f_minus = np.array([fitness_fn(phi - sigma * e) for e in eps])
    grad, n_dropped = antithetic_estimate(eps.reshape(n_pairs, -1), f_plus, f_minus, sigma, shaping)
    if n_dropped:
        log.warning("dropped %d of %d pairs with non-finite fitness", n_dropped, n_pairs)
    return grad.reshape(phi.shape)


# --- meta-objective -------------------------------------------------------------


def drift_for(phi: np.ndarray, cfg: EsConfig) -> Learned:
    template = learned_drift(None, cfg.hidden, cfg.activation, cfg.ppo_residual, cfg.epsilon, cfg.xi,
                             cfg.feature_mask)
    return template.with_flat(phi)


def n_meta_params(cfg: EsConfig) -> int:
    return nncore.MlpSpec(N_FEATURES, cfg.hidden, 1, cfg.activation, False).n_params


def initial_phi(cfg: EsConfig, seed: int) -> np.ndarray:
    """Starting point of the search.

    From scratch: the usual uniform init. Residual mode: the same hidden
    layer but a zero output layer, so the drift starts exactly at PPO (within
    ``xi``). An all-zero start is a stationary point: the output is a product
    of layer weights, and with tanh the net is even in its weights, so every
    antithetic pair would score the same.
    """
    spec = nncore.MlpSpec(N_FEATURES, cfg.hidden, 1, cfg.activation, False)
    rng = np.random.default_rng([int(seed), 99])
    return nncore.init_weights(spec, rng, output_scale=0.0 if cfg.ppo_residual else 1.0).flat


def meta_objective(phi: np.ndarray, cfg: EsConfig, seed: int, baselines: dict | None = None) -> float:
    """Mean final evaluation return over the env mixture, or NaN if any inner run diverged.

    With ``baselines`` (env id -> (mean, std)), each env's return is z-scored
    before averaging.
    """
    drift = drift_for(phi, cfg)
    # only the final evaluation matters here, so skip the periodic ones
    tcfg = TrainConfig.from_dict({**cfg.train.to_dict(), "seed": int(seed), "eval_episodes": cfg.eval_episodes,
                                  "eval_interval": 0})
    scores = []
    for env_id in cfg.envs:
        rec = train(EnvSpec(env_id, gamma=tcfg.gamma), drift, tcfg, check_drift=False, record_weights=False)
        if rec.diverged or rec.final_eval_return is None:
            return float("nan")
        score = rec.final_eval_return
        if baselines is not None and env_id in baselines:
            mean, std = baselines[env_id]
            score = (score - mean) / max(std, 1e-8)
        scores.append(score)
    return float(np.mean(scores))


def ppo_baselines(cfg: EsConfig, seed: int) -> dict:
    out = {}
    for env_id in cfg.envs:
        rets = []
        for k in range(cfg.baseline_seeds):
            tcfg = TrainConfig.from_dict({**cfg.train.to_dict(), "seed": int(seed) * 1000 + k,
                                          "eval_episodes": cfg.eval_episodes, "eval_interval": 0})
            rec = train(EnvSpec(env_id, gamma=tcfg.gamma), PpoClip(cfg.epsilon), tcfg, record_weights=False)
            rets.append(rec.final_eval_return if rec.final_eval_return is not None else np.nan)
        rets = np.asarray(rets)
        out[env_id] = (float(np.nanmean(rets)), float(np.nanstd(rets)))
    return out


def _fitness_job(args):
    phi, cfg_dict, seed, baselines = args
    return meta_objective(np.asarray(phi), EsConfig.from_dict(cfg_dict), seed, baselines)


def worker_count(n_jobs: int) -> int:
    cap = os.environ.get("MIRRORLAB_THREADS")
    n = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(n, n_jobs))


def map_jobs(fn, jobs: list, workers: int | None = None) -> list:
    """Run ``fn`` over ``jobs`` in worker processes, preserving order."""
    workers = worker_count(len(jobs)) if workers is None else workers
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def inner_seed(seed: int, generation: int, pair: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(generation), int(pair), 7]).generate_state(1)[0])


# --- outer loop -------------------------------------------------------------------


@dataclass
class MetaState:
    cfg: EsConfig
    seed: int
    generation: int
    phi: np.ndarray
    adam: nncore.AdamState
    best_phi: np.ndarray
    best_fitness: float
    history: list[dict] = field(default_factory=list)
    trajectory: list[list[float]] = field(default_factory=list)
    baselines: dict | None = None

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT, "version": 1, "seed": self.seed, "generation": self.generation,
            "config": self.cfg.to_dict(), "phi": self.phi.tolist(), "adam": self.adam.to_dict(),
            "best_phi": self.best_phi.tolist(), "best_fitness": self.best_fitness,
            "history": self.history, "trajectory": self.trajectory,
            "baselines": {k: list(v) for k, v in self.baselines.items()} if self.baselines else None,
            "rng": {"scheme": "default_rng([seed, generation, pair])", "seed": self.seed},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetaState":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError("not an ES checkpoint")
        return cls(EsConfig.from_dict(d["config"]), int(d["seed"]), int(d["generation"]),
                   np.asarray(d["phi"], dtype=np.float64), nncore.AdamState.from_dict(d["adam"]),
                   np.asarray(d["best_phi"], dtype=np.float64), float(d["best_fitness"]),
                   list(d["history"]), list(d.get("trajectory", [])),
                   {k: tuple(v) for k, v in d["baselines"].items()} if d.get("baselines") else None)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "MetaState":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def best_drift(self) -> Learned:
        return drift_for(self.best_phi, self.cfg)

    def drift(self) -> Learned:
        return drift_for(self.phi, self.cfg)

    def write_history_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_FIELDS)
            for row in self.history:
                w.writerow([repr(row[k]) for k in HISTORY_FIELDS])


def init_meta_state(cfg: EsConfig, seed: int) -> MetaState:
    phi = initial_phi(cfg, seed)
    baselines = ppo_baselines(cfg, seed) if cfg.zscore_baseline else None
    return MetaState(cfg, int(seed), 0, phi, nncore.AdamState.zeros(phi.size, lr=cfg.outer_lr),
                     phi.copy(), float("-inf"), [], [phi.tolist()], baselines)


def run_generation(state: MetaState, workers: int | None = None) -> MetaState:
    """Evaluate one generation, step the outer optimiser and return the new state."""
    cfg, g = state.cfg, state.generation
    sigma = sigma_at(cfg, g)
    eps = perturbations(state.seed, g, cfg.n_pairs, state.phi.size)
    cfg_dict = cfg.to_dict()
    jobs = []
    for i in range(cfg.n_pairs):
        s = inner_seed(state.seed, g, i)
        jobs.append((state.phi + sigma * eps[i], cfg_dict, s, state.baselines))
        jobs.append((state.phi - sigma * eps[i], cfg_dict, s, state.baselines))
    fit = np.asarray(map_jobs(_fitness_job, jobs, workers), dtype=np.float64)
    finite = np.isfinite(fit)
    if not finite.any():
        raise DivergenceError(f"all fitness evaluations diverged in generation {g}")
    n_div = int((~finite).sum())
    if n_div:
        log.warning("generation %d: %d diverged inner runs penalised with the worst fitness", g, n_div)
        fit = np.where(finite, fit, fit[finite].min())
    f_plus, f_minus = fit[0::2], fit[1::2]
    shaping = cfg.fitness_shaping if cfg.fitness_shaping != "none" else None
    grad, _ = antithetic_estimate(eps, f_plus, f_minus, sigma, shaping)
    adam, phi = nncore.adam_step(state.adam, state.phi, -grad)

    best_phi, best_fitness = state.best_phi, state.best_fitness
    k = int(np.argmax(fit))
    if fit[k] > best_fitness:
        best_fitness = float(fit[k])
        best_phi = jobs[k][0].copy()
    row = {"generation": g, "sigma": sigma, "mean_fitness": float(fit.mean()), "max_fitness": float(fit.max()),
           "best_so_far": best_fitness, "n_diverged": n_div, "grad_norm": float(np.linalg.norm(grad))}
    log.info("gen %d sigma=%.5f mean=%.2f max=%.2f best=%.2f", g, sigma, row["mean_fitness"],
             row["max_fitness"], best_fitness)
    return MetaState(cfg, state.seed, g + 1, phi, adam, best_phi, best_fitness,
                     state.history + [row], state.trajectory + [phi.tolist()], state.baselines)


def meta_train(cfg: EsConfig, seed: int, checkpoint: str | Path | None = None,
               resume: MetaState | None = None, workers: int | None = None) -> MetaState:
    """Run (or continue) ES meta-training up to ``cfg.n_generations``.

    When ``checkpoint`` is given the state is written there after every generation.
    """
    state = resume if resume is not None else init_meta_state(cfg, seed)
    while state.generation < cfg.n_generations:
        state = run_generation(state, workers)
        if checkpoint is not None:
            state.save(checkpoint)
    return state
