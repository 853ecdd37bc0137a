"""Run configuration: one YAML file that enumerates every setting.

Sections: ``env``, ``drift``, ``train``, ``es``, ``verify``, ``heatmap``,
``ablate`` plus top-level ``seed`` and ``n_seeds``. Missing keys take the
defaults below; unknown keys are an error. :func:`resolved_dict` gives the
fully expanded form that every subcommand writes next to its outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from mirrorlab.drift import N_FEATURES, SLICE_ADVANTAGES, DriftSpec, drift_from_dict, drift_to_dict
from mirrorlab.envs import EnvSpec
from mirrorlab.errors import ConfigError
from mirrorlab.esmeta import CHECKPOINT_FORMAT, EsConfig, MetaState
from mirrorlab.trainer import TrainConfig

SECTIONS = ("env", "drift", "train", "es", "verify", "heatmap", "ablate", "seed", "n_seeds")


@dataclass
class GridConfig:
    r_range: tuple[float, float]
    A_range: tuple[float, float]
    resolution: int

    def to_dict(self) -> dict:
        return {"r_range": list(self.r_range), "A_range": list(self.A_range), "resolution": self.resolution}


@dataclass
class RunConfig:
    env_id: str = "cartpole"
    horizon: int | None = None
    drift: dict = field(default_factory=lambda: {"kind": "ppo", "epsilon": 0.2})
    train: TrainConfig = field(default_factory=TrainConfig)
    es: EsConfig = field(default_factory=EsConfig)
    verify: GridConfig = field(default_factory=lambda: GridConfig((0.1, 3.0), (-3.0, 3.0), 300))
    heatmap: GridConfig = field(default_factory=lambda: GridConfig((0.0, 2.0), (-3.0, 3.0), 201))
    slice_A: tuple[float, ...] = SLICE_ADVANTAGES
    feature_masks: list[tuple[bool, ...]] = field(default_factory=lambda: [(True,) * N_FEATURES])
    seed: int = 0
    n_seeds: int = 1

    @property
    def env_spec(self) -> EnvSpec:
        return EnvSpec(self.env_id, self.horizon, self.train.gamma)

    def drift_spec(self) -> DriftSpec:
        return drift_from_dict(self.drift)


def _section(raw: dict, name: str, known: set[str]) -> dict:
    sec = raw.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    unknown = set(sec) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return sec


def _grid(sec: dict, default: GridConfig) -> GridConfig:
    g = GridConfig(tuple(float(v) for v in sec.get("r_range", default.r_range)),
                   tuple(float(v) for v in sec.get("A_range", default.A_range)),
                   int(sec.get("resolution", default.resolution)))
    if len(g.r_range) != 2 or len(g.A_range) != 2 or g.r_range[0] >= g.r_range[1] or g.A_range[0] >= g.A_range[1]:
        raise ConfigError(f"bad grid ranges {g}")
    return g


def _mask(m) -> tuple[bool, ...]:
    m = tuple(bool(v) for v in m)
    if len(m) != N_FEATURES or not any(m):
        raise ConfigError(f"feature mask needs {N_FEATURES} entries with at least one set, got {m}")
    return m


def from_dict(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    base = RunConfig()

    env = _section(raw, "env", {"id", "horizon"})
    train = TrainConfig.from_dict(_section(raw, "train", set(TrainConfig().to_dict())))
    es_raw = _section(raw, "es", set(EsConfig().to_dict()) - {"train"})
    es = EsConfig.from_dict({**es_raw, "train": train})
    verify = _section(raw, "verify", {"r_range", "A_range", "resolution"})
    heat = _section(raw, "heatmap", {"r_range", "A_range", "resolution", "slice_A"})
    ablate = _section(raw, "ablate", {"feature_masks"})

    drift = raw.get("drift") or base.drift
    if not isinstance(drift, dict):
        raise ConfigError("config section 'drift' must be a mapping")
    cfg = RunConfig(
        env_id=str(env.get("id", base.env_id)),
        horizon=env.get("horizon"),
        drift=dict(drift),
        train=train,
        es=es,
        verify=_grid(verify, base.verify),
        heatmap=_grid(heat, base.heatmap),
        slice_A=tuple(float(a) for a in heat.get("slice_A", base.slice_A)),
        feature_masks=[_mask(m) for m in ablate.get("feature_masks", base.feature_masks)],
        seed=int(raw.get("seed", base.seed)),
        n_seeds=int(raw.get("n_seeds", base.n_seeds)),
    )
    if cfg.n_seeds < 1:
        raise ConfigError("n_seeds must be >= 1")
    cfg.env_spec  # validates id and horizon
    cfg.drift_spec()
    return cfg


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return from_dict({})
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path} must contain a mapping at top level")
    return from_dict(raw)


def resolved_dict(cfg: RunConfig) -> dict:
    es = cfg.es.to_dict()
    es.pop("train")
    return {
        "seed": cfg.seed,
        "n_seeds": cfg.n_seeds,
        "env": {"id": cfg.env_id, "horizon": cfg.env_spec.horizon},
        "drift": cfg.drift,
        "train": cfg.train.to_dict(),
        "es": es,
        "verify": cfg.verify.to_dict(),
        "heatmap": cfg.heatmap.to_dict() | {"slice_A": list(cfg.slice_A)},
        "ablate": {"feature_masks": [[int(v) for v in m] for m in cfg.feature_masks]},
    }


def dump(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(resolved_dict(cfg), sort_keys=False, default_flow_style=None))


def load_drift_file(path: str | Path) -> dict:
    """Drift dict from a saved drift JSON, a run record or an ES checkpoint (its best point)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"drift file {path} not found")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if d.get("format") == CHECKPOINT_FORMAT:
        return drift_to_dict(MetaState.from_dict(d).best_drift())
    if d.get("format") == "mirrorlab.runrecord":
        d = d["drift"]
        d.pop("description", None)
    if d.get("kind") not in ("ppo", "dpo", "learned", "constant"):
        raise ConfigError(f"{path} does not describe a drift")
    return d
