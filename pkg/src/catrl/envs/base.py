from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from ..constraints import ConstraintSet, Registry, Violations
from ..errors import ConfigError, TrainingError


class TaskMode(str, Enum):
    REWARD = "reward"  # task through a tracking reward
    CONSTRAINT = "constraint"  # constant reward, task through tracking constraints


@dataclass
class EnvState:
    """Batched state; every array has the env index as leading axis."""

    physical: dict[str, np.ndarray]
    prev_action: np.ndarray
    command: np.ndarray
    steps: np.ndarray

    @property
    def n(self) -> int:
        return self.steps.shape[0]

    def take(self, idx) -> "EnvState":
        idx = np.asarray(idx)
        return EnvState({k: v[idx] for k, v in self.physical.items()}, self.prev_action[idx],
                        self.command[idx], self.steps[idx])

    def where(self, mask: np.ndarray, other: "EnvState") -> "EnvState":
        """Entries from ``other`` where ``mask`` is set, else from self."""
        def pick(a, b):
            m = mask.reshape(mask.shape + (1,) * (a.ndim - 1))
            return np.where(m, b, a)
        return EnvState({k: pick(v, other.physical[k]) for k, v in self.physical.items()},
                        pick(self.prev_action, other.prev_action), pick(self.command, other.command),
                        pick(self.steps, other.steps))

    @staticmethod
    def concat(states: Sequence["EnvState"]) -> "EnvState":
        keys = states[0].physical.keys()
        return EnvState({k: np.concatenate([s.physical[k] for s in states]) for k in keys},
                        np.concatenate([s.prev_action for s in states]),
                        np.concatenate([s.command for s in states]),
                        np.concatenate([s.steps for s in states]))


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray
    next_obs: np.ndarray
    reward: np.ndarray
    timeout: np.ndarray
    violations: Violations
    quantities: dict[str, np.ndarray]
    next_state: EnvState


class ConstrainedEnv:
    """Base class for batched analytic environments.

    Subclasses implement ``_sample_initial``, ``observe`` and ``_dynamics`` and
    expose a module-level constraint ``registry``.
    """

    name = "base"
    obs_dim = 0
    act_dim = 0
    registry = Registry()
    default_params: Mapping[str, Any] = {}

    def __init__(self, params: Optional[Mapping[str, Any]] = None, task_mode: TaskMode | str = TaskMode.REWARD,
                 constraints: Optional[ConstraintSet] = None):
        params = dict(params or {})
        unknown = sorted(set(params) - set(self.default_params))
        if unknown:
            raise ConfigError(f"env: unknown parameter(s) for {self.name}: " + ", ".join(f"env.{u}" for u in unknown))
        self.params = {**self.default_params, **params}
        self.task_mode = TaskMode(task_mode)
        self.constraints = constraints if constraints is not None else ConstraintSet([], self.registry)
        self.dt = float(self.params["dt"])
        self.episode_length = int(self.params["episode_length"])

    # -- subclass hooks -------------------------------------------------
    def _sample_initial(self, rng: np.random.Generator) -> tuple[dict[str, np.ndarray], np.ndarray]:
        raise NotImplementedError

    def observe(self, state: EnvState) -> np.ndarray:
        raise NotImplementedError

    def _dynamics(self, state: EnvState, action: np.ndarray) -> tuple[dict, np.ndarray, np.ndarray, dict]:
        """Returns (next physical state, applied action, reward, quantities)."""
        raise NotImplementedError

    def episode_success(self, episode: Mapping[str, np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    # -- public API -------------------------------------------------------
    def reset_batch(self, rngs: Sequence[np.random.Generator]) -> EnvState:
        parts = [self._sample_initial(rng) for rng in rngs]
        physical = {k: np.stack([p[0][k] for p in parts]) for k in parts[0][0]}
        command = np.stack([p[1] for p in parts])
        n = len(rngs)
        return EnvState(physical, np.zeros((n, self.act_dim)), command, np.zeros(n, dtype=np.int64))

    def reset(self, seed) -> tuple[EnvState, np.ndarray]:
        state = self.reset_batch([np.random.default_rng(seed)])
        return state, self.observe(state)

    def step(self, state: EnvState, action) -> Transition:
        action = np.asarray(action, dtype=np.float64).reshape(state.n, self.act_dim)
        if not np.all(np.isfinite(action)):
            bad = np.flatnonzero(~np.all(np.isfinite(action), axis=1))
            raise TrainingError(f"non-finite action for env index(es) {bad.tolist()}")
        physical, applied, reward, quantities = self._dynamics(state, action)
        steps = state.steps + 1
        next_state = EnvState(physical, applied, state.command.copy(), steps)
        violations = self.constraints.evaluate(quantities, (state.n,))
        return Transition(self.observe(state), action, self.observe(next_state), reward,
                          steps >= self.episode_length, violations, quantities, next_state)


def batch_step(env: ConstrainedEnv, states: EnvState, actions) -> Transition:
    """Step N independent instances; errors carry the offending env index."""
    return env.step(states, actions)


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - theta, 2.0 * np.pi)


class VecEnv:
    """N environments with their own random streams and automatic timeout resets.

    Only timeouts reset an environment; constraint terminations never do.
    """

    def __init__(self, env: ConstrainedEnv, num_envs: int, seed: int, randomize_start: bool = False):
        self.env = env
        self.num_envs = int(num_envs)
        self.rngs = [np.random.default_rng([int(seed), 1, i]) for i in range(self.num_envs)]
        self.state = env.reset_batch(self.rngs)
        if randomize_start:
            # desynchronise timeouts; only the first episode of each env is shortened
            self.state.steps[:] = [int(r.integers(0, env.episode_length)) for r in self.rngs]
        self.obs = env.observe(self.state)

    def step(self, actions) -> Transition:
        tr = self.env.step(self.state, actions)
        state = tr.next_state
        if np.any(tr.timeout):
            idx = np.flatnonzero(tr.timeout)
            fresh = self.env.reset_batch([self.rngs[i] for i in idx])
            full = state.take(np.arange(state.n))
            for j, i in enumerate(idx):
                for k in full.physical:
                    full.physical[k][i] = fresh.physical[k][j]
                full.prev_action[i] = fresh.prev_action[j]
                full.command[i] = fresh.command[j]
                full.steps[i] = 0
            state = full
        self.state = state
        self.obs = self.env.observe(state)
        return tr
