"""Drift functions of the probability ratio ``r`` and the normalised advantage ``A``.

A drift ``f(r, A)`` penalises moving the policy away from the one that
collected the data. Per sample, the surrogate that gets maximised is
``r * A - f(r, A)``. A drift is valid when it is non-negative, zero at
``r = 1`` and flat in ``r`` at ``r = 1``; :func:`verify_drift` checks all
three on a grid.

Variants:

``PpoClip``
    ``ReLU((r - clip(r, 1-eps, 1+eps)) * A)``; the surrogate becomes the
    familiar clipped objective.
``Dpo``
    ``ReLU(u - alpha*tanh(u/alpha))`` with ``u = (r-1)A`` for ``A >= 0`` and
    ``ReLU(v - beta*tanh(v/beta))`` with ``v = log(r)A`` for ``A < 0``.
``Learned``
    A bias-free MLP over eight ratio/advantage features, followed by
    ``ReLU(. - xi)``; optionally the PPO drift is added before the ReLU.
``Constant``
    Deliberately invalid drift used to exercise the validity checks.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from mirrorlab import nncore
from mirrorlab.errors import ConfigError

R_MIN = 1e-8
N_FEATURES = 8
FEATURE_NAMES = (
    "1-r", "(1-r)^2", "(1-r)A", "(1-r)^2A", "log r", "(log r)^2", "(log r)A", "(log r)^2A",
)


@dataclass(frozen=True)
class PpoClip:
    epsilon: float = 0.2

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError("PPO epsilon must be > 0")


@dataclass(frozen=True)
class Dpo:
    alpha: float = 2.0
    beta: float = 0.6

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError("DPO alpha and beta must be > 0")


@dataclass(frozen=True, eq=False)
class Learned:
    net: nncore.MlpWeights
    ppo_residual: bool = True
    epsilon: float = 0.2
    xi: float = 1e-6
    feature_mask: tuple[bool, ...] = (True,) * N_FEATURES

    def __post_init__(self):
        spec = self.net.spec
        if spec.use_bias:
            raise ConfigError("learned drift network must not have bias terms")
        if spec.input_dim != N_FEATURES or spec.output_dim != 1:
            raise ConfigError(f"learned drift network must map {N_FEATURES} features to 1 output")
        mask = tuple(bool(m) for m in self.feature_mask)
        if len(mask) != N_FEATURES or not any(mask):
            raise ConfigError("feature_mask must have 8 entries with at least one enabled")
        object.__setattr__(self, "feature_mask", mask)
        if self.xi <= 0:
            raise ConfigError("xi must be > 0")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")

    def with_flat(self, flat: np.ndarray) -> "Learned":
        return Learned(nncore.MlpWeights(self.net.spec, np.array(flat, dtype=np.float64)),
                       self.ppo_residual, self.epsilon, self.xi, self.feature_mask)


@dataclass(frozen=True)
class Constant:
    value: float = 1.0


DriftSpec = Union[PpoClip, Dpo, Learned, Constant]


@dataclass
class ClampCounter:
    """Counts ratios that fell below ``R_MIN`` and were clamped."""

    count: int = 0


def learned_drift(rng: np.random.Generator | None = None, hidden=(128,), activation: str = "tanh",
                  ppo_residual: bool = True, epsilon: float = 0.2, xi: float = 1e-6,
                  feature_mask=(True,) * N_FEATURES) -> Learned:
    """Build a learned drift; zero weights when ``rng`` is None, random init otherwise."""
    spec = nncore.MlpSpec(N_FEATURES, tuple(hidden), 1, activation, use_bias=False)
    net = nncore.zero_weights(spec) if rng is None else nncore.init_weights(spec, rng)
    return Learned(net, ppo_residual, epsilon, xi, tuple(feature_mask))


def _clamp(r, counter: ClampCounter | None):
    r = np.asarray(r, dtype=np.float64)
    low = r < R_MIN
    if counter is not None:
        counter.count += int(np.count_nonzero(low))
    return np.where(low, R_MIN, r)


def features(r, A, feature_mask=None, counter: ClampCounter | None = None) -> np.ndarray:
    """The eight drift-network inputs, stacked on a trailing axis.

    Ratios below ``R_MIN`` are clamped before taking logs. Masked-out
    features are zeroed.
    """
    r = _clamp(r, counter)
    A = np.asarray(A, dtype=np.float64)
    r, A = np.broadcast_arrays(r, A)
    d = 1.0 - r
    lr = np.log(r)
    x = np.stack([d, d * d, d * A, d * d * A, lr, lr * lr, lr * A, lr * lr * A], axis=-1)
    if feature_mask is not None:
        x = x * np.asarray(feature_mask, dtype=np.float64)
    return x


def features_dr(r, A, feature_mask=None) -> np.ndarray:
    """Elementwise derivative of :func:`features` with respect to ``r``."""
    r = np.maximum(np.asarray(r, dtype=np.float64), R_MIN)
    A = np.asarray(A, dtype=np.float64)
    r, A = np.broadcast_arrays(r, A)
    d = 1.0 - r
    lr = np.log(r)
    inv = 1.0 / r
    one = np.ones_like(r)
    g = np.stack([-one, -2 * d, -A, -2 * d * A, inv, 2 * lr * inv, A * inv, 2 * lr * A * inv], axis=-1)
    if feature_mask is not None:
        g = g * np.asarray(feature_mask, dtype=np.float64)
    return g


def _ppo_parts(r, A, eps, right_hand):
    """PPO drift pre-activation ``(r - clip(r)) * A`` and its one-sided r-derivative."""
    g = (r - np.clip(r, 1.0 - eps, 1.0 + eps)) * A
    if right_hand:
        outside = (r >= 1.0 + eps) | (r < 1.0 - eps)
    else:
        outside = (r > 1.0 + eps) | (r < 1.0 - eps)
    gp = np.where(outside, A, 0.0)
    return g, gp


def _relu_with_dr(g, gp, right_hand):
    f = np.maximum(g, 0.0)
    if right_hand:
        d = np.where(g > 0, gp, np.where(g == 0, np.maximum(gp, 0.0), 0.0))
    else:
        d = np.where(g > 0, gp, 0.0)
    return f, d


def _evaluate(spec: DriftSpec, r, A, right_hand: bool, counter: ClampCounter | None = None):
    """Returns ``(f, df/dr, kink)`` broadcast over ``r`` and ``A``."""
    r = np.asarray(r, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    r, A = np.broadcast_arrays(r, A)

    if isinstance(spec, PpoClip):
        g, gp = _ppo_parts(r, A, spec.epsilon, right_hand)
        f, d = _relu_with_dr(g, gp, right_hand)
        kink = ((r == 1.0 + spec.epsilon) | (r == 1.0 - spec.epsilon)) & (A != 0)
        return f, d, kink

    if isinstance(spec, Dpo):
        rc = _clamp(r, counter)
        pos = A >= 0
        u = np.where(pos, (rc - 1.0) * A, np.log(rc) * A)
        scale = np.where(pos, spec.alpha, spec.beta)
        th = np.tanh(u / scale)
        g = u - scale * th
        # d/dr of u - s*tanh(u/s) is u' * tanh^2(u/s); u' = A or A/r
        gp = np.where(pos, A, A / rc) * th * th
        f = np.maximum(g, 0.0)
        d = np.where(g > 0, gp, 0.0)
        return f, d, np.zeros(r.shape, dtype=bool)

    if isinstance(spec, Learned):
        shape = r.shape
        rf, Af = r.reshape(-1), A.reshape(-1)
        x = features(rf, Af, spec.feature_mask, counter)
        net_spec = spec.net.spec
        out, cache = nncore.forward_cached(net_spec, spec.net.flat, x)
        _, dx = nncore.backward(net_spec, cache, np.ones_like(out), need_dx=True)
        pre = out[:, 0] - spec.xi
        dpre = np.sum(dx * features_dr(rf, Af, spec.feature_mask), axis=-1)
        kink = np.zeros(rf.shape, dtype=bool)
        if spec.ppo_residual:
            g, gp = _ppo_parts(rf, Af, spec.epsilon, right_hand)
            ppo_f, ppo_d = _relu_with_dr(g, gp, right_hand)
            pre = pre + ppo_f
            dpre = dpre + ppo_d
            kink |= (g == 0) & (gp != 0)
        f, d = _relu_with_dr(pre, dpre, right_hand)
        kink |= (pre == 0) & (dpre != 0)
        return f.reshape(shape), d.reshape(shape), kink.reshape(shape)

    if isinstance(spec, Constant):
        return np.full(r.shape, float(spec.value)), np.zeros(r.shape), np.zeros(r.shape, dtype=bool)

    raise ConfigError(f"unknown drift spec {spec!r}")


def drift_eval(spec: DriftSpec, r, A, counter: ClampCounter | None = None):
    f, _, _ = _evaluate(spec, r, A, right_hand=True, counter=counter)
    return f if f.ndim else float(f)


def drift_dr(spec: DriftSpec, r, A, return_kinks: bool = False):
    """Analytic ``df/dr``; at ReLU/clip kinks the right-hand derivative is returned.

    With ``return_kinks=True`` a boolean array marking kink points is returned too.
    """
    _, d, kink = _evaluate(spec, r, A, right_hand=True)
    d = d if d.ndim else float(d)
    if return_kinks:
        return d, kink
    return d


def drift_value_and_dr(spec: DriftSpec, r, A, counter: ClampCounter | None = None):
    """``(f, df/dr)`` with subgradient 0 at kinks; this is what training differentiates."""
    f, d, _ = _evaluate(spec, r, A, right_hand=False, counter=counter)
    return f, d


def objective_per_sample(spec: DriftSpec, r, A):
    """Per-sample mirror surrogate ``r * A - f(r, A)``."""
    r = np.asarray(r, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    out = r * A - drift_eval(spec, r, A)
    return out if np.ndim(out) else float(out)


# --- validity -----------------------------------------------------------------


@dataclass
class ValidityTolerances:
    identity: float = 1e-12
    gradient: float = 1e-6
    nonneg: float = 0.0
    fd_step: float = 1e-8


@dataclass
class ValidityReport:
    valid: bool
    min_value: float
    min_at: tuple[float, float]
    max_abs_identity: float
    max_abs_identity_at_A: float
    max_abs_grad_identity: float
    max_abs_grad_identity_at_A: float
    r_range: tuple[float, float]
    A_range: tuple[float, float]
    resolution: int
    tolerances: ValidityTolerances = field(default_factory=ValidityTolerances)
    failures: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "valid": self.valid,
            "checks": {
                "non_negative": {"min_value": self.min_value, "at": {"r": self.min_at[0], "A": self.min_at[1]},
                                 "tolerance": -self.tolerances.nonneg},
                "zero_at_identity": {"max_abs": self.max_abs_identity, "at_A": self.max_abs_identity_at_A,
                                     "tolerance": self.tolerances.identity},
                "zero_gradient_at_identity": {"max_abs": self.max_abs_grad_identity,
                                              "at_A": self.max_abs_grad_identity_at_A,
                                              "fd_step": self.tolerances.fd_step,
                                              "tolerance": self.tolerances.gradient},
            },
            "grid": {"r": list(self.r_range), "A": list(self.A_range), "resolution": self.resolution},
            "failures": list(self.failures),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def verify_drift(spec: DriftSpec, r_range=(0.1, 3.0), A_range=(-3.0, 3.0), resolution: int = 300,
                 tolerances: ValidityTolerances | None = None) -> ValidityReport:
    """Check non-negativity on the grid and the two identity conditions along ``r = 1``.

    The gradient condition uses a central difference at exactly ``r = 1``. The
    step must sit inside the ``xi`` dead zone of learned drifts, hence the
    small default.
    """
    tol = tolerances or ValidityTolerances()
    rs = np.linspace(r_range[0], r_range[1], resolution)
    As = np.linspace(A_range[0], A_range[1], resolution)
    R, AA = np.meshgrid(rs, As)
    f = drift_eval(spec, R, AA)
    i = int(np.argmin(f))
    min_value = float(f.flat[i])
    min_at = (float(R.flat[i]), float(AA.flat[i]))

    f_id = np.abs(drift_eval(spec, np.ones_like(As), As))
    j = int(np.argmax(f_id))
    h = tol.fd_step
    fd = (drift_eval(spec, np.full_like(As, 1.0 + h), As) - drift_eval(spec, np.full_like(As, 1.0 - h), As)) / (2 * h)
    fd = np.abs(fd)
    k = int(np.argmax(fd))

    failures = []
    if not min_value >= -tol.nonneg:
        failures.append(f"negative drift {min_value:.6g} at r={min_at[0]:.6g}, A={min_at[1]:.6g}")
    if not f_id[j] <= tol.identity:
        failures.append(f"f(1, A) = {f_id[j]:.6g} != 0 at A={As[j]:.6g}")
    if not fd[k] <= tol.gradient:
        failures.append(f"df/dr at r=1 is {fd[k]:.6g} at A={As[k]:.6g}")
    return ValidityReport(
        valid=not failures, min_value=min_value, min_at=min_at,
        max_abs_identity=float(f_id[j]), max_abs_identity_at_A=float(As[j]),
        max_abs_grad_identity=float(fd[k]), max_abs_grad_identity_at_A=float(As[k]),
        r_range=(float(r_range[0]), float(r_range[1])), A_range=(float(A_range[0]), float(A_range[1])),
        resolution=resolution, tolerances=tol, failures=failures,
    )


# --- analysis -----------------------------------------------------------------

SLICE_ADVANTAGES = (-3.0, -1.0, 1.0, 3.0)


@dataclass
class Heatmap:
    r: np.ndarray
    A: np.ndarray
    grid: np.ndarray  # rows follow A, columns follow r
    slice_A: tuple[float, ...]
    slices: np.ndarray  # (len(slice_A), len(r))

    def write(self, out_dir: str | Path, stem: str = "heatmap") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        grid_path = out_dir / f"{stem}.csv"
        slice_path = out_dir / f"{stem}_slices.csv"
        with open(grid_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["A\\r"] + [f"{v:.8e}" for v in self.r])
            for a, row in zip(self.A, self.grid):
                w.writerow([f"{a:.8e}"] + [f"{v:.8e}" for v in row])
        with open(slice_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r"] + [f"A={a:g}" for a in self.slice_A])
            for i, rv in enumerate(self.r):
                w.writerow([f"{rv:.8e}"] + [f"{v:.8e}" for v in self.slices[:, i]])
        return grid_path, slice_path


def objective_dr(spec: DriftSpec, r, A):
    """``d/dr`` of the per-sample surrogate, i.e. ``A - df/dr``: the update incentive."""
    return np.asarray(A, dtype=np.float64) - drift_dr(spec, r, A)


def export_heatmap(spec: DriftSpec, r_range=(0.0, 2.0), A_range=(-3.0, 3.0), resolution: int = 201,
                   slice_A=SLICE_ADVANTAGES) -> Heatmap:
    if resolution < 16:
        raise ConfigError("heatmap resolution must be >= 16")
    rs = np.linspace(r_range[0], r_range[1], resolution)
    rs = np.where(rs <= 0, R_MIN, rs)
    As = np.linspace(A_range[0], A_range[1], resolution)
    R, AA = np.meshgrid(rs, As)
    grid = objective_dr(spec, R, AA)
    sl = np.stack([objective_dr(spec, rs, np.full_like(rs, a)) for a in slice_A])
    return Heatmap(rs, As, grid, tuple(float(a) for a in slice_A), sl)


# --- serialisation ------------------------------------------------------------


def drift_to_dict(spec: DriftSpec) -> dict:
    if isinstance(spec, PpoClip):
        return {"kind": "ppo", "epsilon": spec.epsilon}
    if isinstance(spec, Dpo):
        return {"kind": "dpo", "alpha": spec.alpha, "beta": spec.beta}
    if isinstance(spec, Learned):
        return {"kind": "learned", "ppo_residual": spec.ppo_residual, "epsilon": spec.epsilon,
                "xi": spec.xi, "feature_mask": [int(m) for m in spec.feature_mask],
                "net": nncore.weights_to_dict(spec.net)}
    if isinstance(spec, Constant):
        return {"kind": "constant", "value": spec.value}
    raise ConfigError(f"unknown drift spec {spec!r}")


def drift_from_dict(d: dict) -> DriftSpec:
    kind = d.get("kind")
    if kind == "ppo":
        return PpoClip(float(d.get("epsilon", 0.2)))
    if kind == "dpo":
        return Dpo(float(d.get("alpha", 2.0)), float(d.get("beta", 0.6)))
    if kind == "learned":
        mask = tuple(bool(m) for m in d.get("feature_mask", [1] * N_FEATURES))
        common = dict(ppo_residual=bool(d.get("ppo_residual", True)), epsilon=float(d.get("epsilon", 0.2)),
                      xi=float(d.get("xi", 1e-6)), feature_mask=mask)
        if "net" in d:
            return Learned(nncore.weights_from_dict(d["net"]), **common)
        rng = np.random.default_rng(d["init_seed"]) if "init_seed" in d else None
        return learned_drift(rng, hidden=tuple(d.get("hidden", (128,))),
                             activation=d.get("activation", "tanh"), **common)
    if kind == "constant":
        return Constant(float(d.get("value", 1.0)))
    raise ConfigError(f"unknown drift kind {kind!r}")


def describe(spec: DriftSpec) -> str:
    if isinstance(spec, PpoClip):
        return f"ppo(eps={spec.epsilon:g})"
    if isinstance(spec, Dpo):
        return f"dpo(alpha={spec.alpha:g}, beta={spec.beta:g})"
    if isinstance(spec, Learned):
        mode = "residual" if spec.ppo_residual else "scratch"
        return f"learned({mode}, hidden={list(spec.net.spec.layer_widths)})"
    return f"constant({spec.value:g})"
