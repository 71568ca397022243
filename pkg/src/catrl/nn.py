"""Small numpy MLPs with hand-written backprop, a diagonal Gaussian head and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, TrainingError

LOG_2PI = float(np.log(2.0 * np.pi))
ACTIVATIONS = ("elu", "tanh")


@dataclass
class MlpParams:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "elu"
    # bumped by every in-place update so stale caches can be detected
    generation: int = 0

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}")
        if len(self.layer_sizes) < 2 or any(s <= 0 for s in self.layer_sizes):
            raise ConfigError(f"layer_sizes must hold >= 2 positive ints, got {self.layer_sizes}")
        n = len(self.layer_sizes) - 1
        if len(self.weights) != n or len(self.biases) != n:
            raise ConfigError("weights/biases do not match layer_sizes")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_sizes[l + 1], self.layer_sizes[l])
            if w.shape != shape or b.shape != (shape[0],):
                raise ConfigError(f"layer {l}: expected W{shape} and b({shape[0]},), got {w.shape} and {b.shape}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(self.layer_sizes, [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.activation)


@dataclass
class MlpCache:
    params: MlpParams
    generation: int
    squeeze: bool
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)


def orthogonal(shape: tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_mlp(layer_sizes: Sequence[int], activation: str = "elu", *, rng: np.random.Generator,
             hidden_gain: float = float(np.sqrt(2.0)), output_gain: float = 1.0) -> MlpParams:
    sizes = tuple(int(s) for s in layer_sizes)
    weights, biases = [], []
    for l in range(len(sizes) - 1):
        gain = output_gain if l == len(sizes) - 2 else hidden_gain
        weights.append(orthogonal((sizes[l + 1], sizes[l]), gain, rng))
        biases.append(np.zeros(sizes[l + 1]))
    return MlpParams(sizes, weights, biases, activation)


def _act(z: np.ndarray, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Activation output and the term its derivative is rebuilt from."""
    if kind == "tanh":
        h = np.tanh(z)
        return h, h
    e = np.expm1(np.minimum(z, 0.0))
    return np.maximum(z, 0.0) + e, e


def _act_grad(saved: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - saved * saved
    # elu'(z) = exp(min(z, 0)) = expm1(min(z, 0)) + 1
    return saved + 1.0


def forward(params: MlpParams, x) -> tuple[np.ndarray, MlpCache]:
    """Apply the network to one input vector or a (batch, in) matrix.

    Hidden layers use ``params.activation``; the output layer is linear.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.layer_sizes[0]:
        raise ConfigError(f"input of shape {x.shape} does not match input size {params.layer_sizes[0]}")
    cache = MlpCache(params, params.generation, squeeze)
    h = x
    last = params.n_layers - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        z = h @ w.T + b
        if l < last:
            h, saved = _act(z, params.activation)
            cache.pre.append(saved)
        else:
            h = z
    return (h[0] if squeeze else h), cache


def backward(params: MlpParams, cache: MlpCache, output_gradient) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Gradients (dW per layer, db per layer) given dLoss/dOutput."""
    if cache.params is not params or cache.generation != params.generation:
        raise RuntimeError("backward called with a cache from a different or since-modified network")
    g = np.asarray(output_gradient, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != (cache.inputs[0].shape[0], params.layer_sizes[-1]):
        raise RuntimeError(f"output gradient shape {g.shape} does not match the cached forward pass")
    n = params.n_layers
    dws: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    dbs: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for l in range(n - 1, -1, -1):
        dws[l] = g.T @ cache.inputs[l]
        dbs[l] = g.sum(axis=0)
        if l > 0:
            g = (g @ params.weights[l]) * _act_grad(cache.pre[l - 1], params.activation)
    return dws, dbs


def gaussian_log_prob(mean, log_std, action) -> np.ndarray:
    mean, log_std, action = np.asarray(mean), np.asarray(log_std), np.asarray(action)
    if mean.shape[-1] != log_std.shape[-1] or action.shape[-1] != mean.shape[-1]:
        raise ConfigError("mean, log_std and action must share their last dimension")
    z = (action - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def gaussian_entropy(log_std) -> float:
    log_std = np.asarray(log_std, dtype=np.float64)
    return float(np.sum(log_std + 0.5 * (LOG_2PI + 1.0)))


def gaussian_kl(mean_old, log_std_old, mean_new, log_std_new) -> np.ndarray:
    """KL(old || new) for diagonal Gaussians, summed over the last axis."""
    var_old = np.exp(2.0 * log_std_old)
    var_new = np.exp(2.0 * log_std_new)
    kl = log_std_new - log_std_old + (var_old + (mean_old - mean_new) ** 2) / (2.0 * var_new) - 0.5
    return np.sum(kl, axis=-1)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0

    @classmethod
    def like(cls, params: Sequence[np.ndarray], learning_rate: float = 3e-4, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   learning_rate=learning_rate, **kw)


def adam_step(adam: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
    """In-place Adam update of ``params``; returns ``(params, adam)``."""
    if len(params) != len(grads) or len(params) != len(adam.m):
        raise ConfigError("params, grads and optimizer state have different lengths")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient passed to adam_step")
    adam.step += 1
    b1, b2 = adam.beta1, adam.beta2
    c1 = 1.0 - b1 ** adam.step
    c2 = 1.0 - b2 ** adam.step
    for p, g, m, v in zip(params, grads, adam.m, adam.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ConfigError(f"shape mismatch in adam_step: {p.shape} vs {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= adam.learning_rate * (m / c1) / (np.sqrt(v / c2) + adam.epsilon)
    return params, adam


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


class PolicyValueNet:
    """Separate actor and critic MLPs plus a state-independent log-std vector."""

    def __init__(self, obs_dim: int, act_dim: int, actor_hidden=(64, 64), critic_hidden=(64, 64),
                 activation: str = "elu", *, rng: np.random.Generator, log_std_init: float = 0.0,
                 log_std_bounds: tuple[float, float] = (-5.0, 1.0), actor_output_gain: float = 0.01):
        self.obs_dim, self.act_dim = int(obs_dim), int(act_dim)
        self.actor = init_mlp((obs_dim, *actor_hidden, act_dim), activation, rng=rng, output_gain=actor_output_gain)
        self.critic = init_mlp((obs_dim, *critic_hidden, 1), activation, rng=rng, output_gain=1.0)
        self.log_std_bounds = (float(log_std_bounds[0]), float(log_std_bounds[1]))
        self.log_std = np.clip(np.full(act_dim, float(log_std_init)), *self.log_std_bounds)

    def parameters(self) -> list[np.ndarray]:
        return self.actor.arrays() + [self.log_std] + self.critic.arrays()

    def touch(self):
        # call after any in-place parameter update
        self.actor.generation += 1
        self.critic.generation += 1
        np.clip(self.log_std, *self.log_std_bounds, out=self.log_std)

    def mean(self, obs) -> np.ndarray:
        return forward(self.actor, obs)[0]

    def value(self, obs) -> np.ndarray:
        return forward(self.critic, obs)[0][..., 0]

    def act(self, obs, rng: np.random.Generator):
        """Sample actions; returns (action, log_prob, value, mean)."""
        mu = self.mean(obs)
        action = mu + np.exp(self.log_std) * rng.standard_normal(mu.shape)
        return action, gaussian_log_prob(mu, self.log_std, action), self.value(obs), mu

    def state_dict(self) -> dict:
        out = {"log_std": self.log_std.copy()}
        for name, net in (("actor", self.actor), ("critic", self.critic)):
            for l, (w, b) in enumerate(zip(net.weights, net.biases)):
                out[f"{name}.W{l}"] = w.copy()
                out[f"{name}.b{l}"] = b.copy()
        return out

    def load_state_dict(self, state: dict):
        for name, net in (("actor", self.actor), ("critic", self.critic)):
            for l in range(net.n_layers):
                w, b = np.asarray(state[f"{name}.W{l}"]), np.asarray(state[f"{name}.b{l}"])
                if w.shape != net.weights[l].shape or b.shape != net.biases[l].shape:
                    raise ConfigError(f"checkpoint {name} layer {l} has shape {w.shape}, expected {net.weights[l].shape}")
                net.weights[l][...] = w
                net.biases[l][...] = b
        self.log_std[...] = np.asarray(state["log_std"])
        self.touch()
