"""Dense MLPs with hand-derived backprop and an Adam optimiser.

Everything operates on float64 numpy arrays. Weights live in a single flat
vector so that policies, critics and drift networks can be perturbed, clipped
and stepped as one array.

Flat layout (also used by the JSON serialisation): layers are stored in order,
input side first. Each layer contributes its matrix of shape
``(fan_in, fan_out)`` in row-major order, followed by its bias vector of length
``fan_out`` when ``use_bias`` is set. The last layer is linear.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from mirrorlab.errors import ConfigError

ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    layer_widths: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"
    use_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 1:
            raise ConfigError("MlpSpec needs at least one hidden layer")
        if min(self.layer_widths + (self.input_dim, self.output_dim)) < 1:
            raise ConfigError(f"all MLP widths must be >= 1, got {self}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @cached_property
    def shapes(self) -> list[tuple[int, int]]:
        dims = (self.input_dim,) + self.layer_widths + (self.output_dim,)
        return list(zip(dims[:-1], dims[1:]))

    @cached_property
    def n_params(self) -> int:
        return sum(i * o + (o if self.use_bias else 0) for i, o in self.shapes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_widths"] = list(self.layer_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            layer_widths=tuple(d["layer_widths"]),
            output_dim=int(d["output_dim"]),
            activation=d.get("activation", "tanh"),
            use_bias=bool(d.get("use_bias", True)),
        )


@dataclass
class MlpWeights:
    spec: MlpSpec
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.spec.n_params,):
            raise ConfigError(
                f"weight vector has shape {self.flat.shape}, spec needs ({self.spec.n_params},)"
            )

    def layers(self) -> list[tuple[np.ndarray, np.ndarray | None]]:
        return unflatten(self.spec, self.flat)

    def copy(self) -> "MlpWeights":
        return MlpWeights(self.spec, self.flat.copy())


def unflatten(spec: MlpSpec, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray | None]]:
    """Split a flat vector into per-layer ``(W, b)`` views (``b`` is None without bias)."""
    layers = []
    pos = 0
    for fan_in, fan_out in spec.shapes:
        n = fan_in * fan_out
        W = flat[pos:pos + n].reshape(fan_in, fan_out)
        pos += n
        b = None
        if spec.use_bias:
            b = flat[pos:pos + fan_out]
            pos += fan_out
        layers.append((W, b))
    return layers


def flatten(layers: list[tuple[np.ndarray, np.ndarray | None]]) -> np.ndarray:
    parts = []
    for W, b in layers:
        parts.append(np.asarray(W, dtype=np.float64).ravel())
        if b is not None:
            parts.append(np.asarray(b, dtype=np.float64).ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def init_weights(spec: MlpSpec, rng: np.random.Generator, output_scale: float = 1.0) -> MlpWeights:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for every matrix and bias."""
    layers = []
    for k, (fan_in, fan_out) in enumerate(spec.shapes):
        bound = 1.0 / np.sqrt(fan_in)
        if k == len(spec.shapes) - 1:
            bound *= output_scale
        W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out) if spec.use_bias else None
        layers.append((W, b))
    return MlpWeights(spec, flatten(layers))


def zero_weights(spec: MlpSpec) -> MlpWeights:
    return MlpWeights(spec, np.zeros(spec.n_params))


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _act_grad(name: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - h * h
    return (z > 0.0).astype(np.float64)


def _check_input(spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.input_dim or x.ndim not in (1, 2):
        raise ConfigError(f"input of shape {x.shape} does not match input_dim={spec.input_dim}")
    return x


def forward_cached(spec: MlpSpec, flat: np.ndarray, x: np.ndarray):
    """Forward pass returning the output and the activations needed by :func:`backward`."""
    x = _check_input(spec, x)
    layers = unflatten(spec, flat)
    cache = [x]
    h = x
    last = len(layers) - 1
    for k, (W, b) in enumerate(layers):
        z = h @ W
        if b is not None:
            z = z + b
        if k < last:
            h = _act(spec.activation, z)
            cache.append((z, h))
        else:
            h = z
    return h, (layers, cache)


def backward(spec: MlpSpec, state, upstream: np.ndarray, need_dx: bool = False):
    """Reverse pass through a cached forward.

    Returns ``(dflat, dx)``; ``dx`` is None unless requested.
    """
    layers, cache = state
    x = cache[0]
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape[-1] != spec.output_dim:
        raise ConfigError(f"upstream of shape {g.shape} does not match output_dim={spec.output_dim}")
    grads: list[tuple[np.ndarray, np.ndarray | None]] = [None] * len(layers)  # type: ignore[list-item]
    for k in range(len(layers) - 1, -1, -1):
        W, b = layers[k]
        h_in = x if k == 0 else cache[k][1]
        if g.ndim == 1:
            dW = np.outer(h_in, g)
            db = g.copy() if b is not None else None
        else:
            dW = h_in.T @ g
            db = g.sum(axis=0) if b is not None else None
        grads[k] = (dW, db)
        if k > 0 or need_dx:
            g = g @ W.T
            if k > 0:
                z, h = cache[k]
                g = g * _act_grad(spec.activation, z, h)
    return flatten(grads), (g if need_dx else None)


def mlp_forward(spec: MlpSpec, w: MlpWeights | np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of row vectors."""
    flat = w.flat if isinstance(w, MlpWeights) else np.asarray(w, dtype=np.float64)
    out, _ = forward_cached(spec, flat, x)
    return out


def mlp_grad(spec: MlpSpec, w: MlpWeights | np.ndarray, x: np.ndarray, upstream: np.ndarray):
    """Gradient of ``<upstream, mlp_forward(x)>`` w.r.t. the flat weights and the input.

    For batched ``x`` the inner product is summed over rows.
    """
    flat = w.flat if isinstance(w, MlpWeights) else np.asarray(w, dtype=np.float64)
    _, state = forward_cached(spec, flat, x)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape[-1] != spec.output_dim:
        raise ConfigError(f"upstream of shape {upstream.shape} does not match output_dim={spec.output_dim}")
    return backward(spec, state, upstream, need_dx=True)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 3e-4, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)

    def to_dict(self) -> dict:
        return {
            "m": self.m.tolist(), "v": self.v.tolist(), "step": self.step,
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        return cls(np.asarray(d["m"], dtype=np.float64), np.asarray(d["v"], dtype=np.float64),
                   int(d["step"]), float(d["lr"]), float(d["beta1"]), float(d["beta2"]), float(d["eps"]))


def adam_step(state: AdamState, w: np.ndarray, grad: np.ndarray) -> tuple[AdamState, np.ndarray]:
    """One Adam descent step. Inputs are not modified."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.m.shape or np.shape(w) != grad.shape:
        raise ConfigError(f"Adam length mismatch: w{np.shape(w)} grad{grad.shape} m{state.m.shape}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient passed to adam_step")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_w = w - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)
    return new_state, new_w


def clip_by_global_norm(grad: np.ndarray, max_norm: float | None) -> tuple[np.ndarray, float]:
    norm = float(np.sqrt(np.dot(grad, grad)))
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad, norm


def weights_to_dict(w: MlpWeights) -> dict:
    return {"format": "mirrorlab.mlp", "version": 1, "spec": w.spec.to_dict(), "weights": w.flat.tolist()}


def weights_from_dict(d: dict) -> MlpWeights:
    if d.get("format") != "mirrorlab.mlp":
        raise ConfigError("not a mirrorlab.mlp weights document")
    return MlpWeights(MlpSpec.from_dict(d["spec"]), np.asarray(d["weights"], dtype=np.float64))


def save_weights(w: MlpWeights, path: str | Path) -> None:
    Path(path).write_text(json.dumps(weights_to_dict(w)))


def load_weights(path: str | Path) -> MlpWeights:
    return weights_from_dict(json.loads(Path(path).read_text()))
