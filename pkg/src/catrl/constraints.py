"""Constraint evaluation and the violation -> termination-probability machinery.

Violations are positive when a constraint is broken. Each step's termination
probability is the largest scheduled ``p_max`` weighted by that constraint's
violation normalised against a running estimate of its batch maximum.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError

Quantities = Mapping[str, np.ndarray]
ViolationFunction = Callable[[Quantities, Mapping[str, float]], np.ndarray]
GateFunction = Callable[[Quantities], np.ndarray]


class Kind(str, Enum):
    HARD = "hard"
    SOFT = "soft"


@dataclass(frozen=True)
class SoftSchedule:
    p_start: float = 0.05
    p_end: float = 0.25
    ramp_fraction: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.p_start <= self.p_end <= 1.0):
            raise ConfigError(f"soft schedule needs 0 <= p_start <= p_end <= 1, got {self.p_start}, {self.p_end}")
        if not (0.0 < self.ramp_fraction <= 1.0):
            raise ConfigError(f"ramp_fraction must lie in (0, 1], got {self.ramp_fraction}")


@dataclass(frozen=True)
class ConstraintSpec:
    id: str
    kind: Kind
    violation_fn: str
    params: Mapping[str, float] = field(default_factory=dict)
    gate: Optional[str] = None
    group: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "params", dict(self.params))


@dataclass(frozen=True)
class RegisteredFunction:
    fn: ViolationFunction
    required: tuple[str, ...] = ()
    doc: str = ""


@dataclass
class Registry:
    """Named violation functions and gate predicates supplied by an environment."""

    functions: dict[str, RegisteredFunction] = field(default_factory=dict)
    gates: dict[str, GateFunction] = field(default_factory=dict)

    def add(self, name: str, required: Sequence[str] = (), doc: str = ""):
        def deco(fn):
            self.functions[name] = RegisteredFunction(fn, tuple(required), doc)
            return fn
        return deco

    def add_gate(self, name: str):
        def deco(fn):
            self.gates[name] = fn
            return fn
        return deco


@dataclass
class Violations:
    """Per-step constraint values, shape ``(..., n_constraints)``.

    ``raw`` is the signed value (forced to 0 when gated off), ``positive`` is
    ``max(0, raw)`` and ``active`` records the gate result.
    """

    raw: np.ndarray
    positive: np.ndarray
    active: np.ndarray

    @property
    def violated(self) -> np.ndarray:
        return self.positive > 0.0


class ConstraintSet:
    """Constraint specs resolved against a registry.

    Resolution happens here so a bad function name or missing parameter fails
    when the experiment is built, not during a rollout.
    """

    def __init__(self, specs: Sequence[ConstraintSpec], registry: Registry):
        ids = [s.id for s in specs]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ConfigError(f"duplicate constraint ids: {dupes}")
        self.specs = tuple(specs)
        self._fns = []
        self._gates = []
        for s in self.specs:
            if s.violation_fn not in registry.functions:
                raise ConfigError(f"constraints.{s.id}.fn: unknown violation function {s.violation_fn!r}; "
                                  f"available: {sorted(registry.functions)}")
            reg = registry.functions[s.violation_fn]
            missing = [p for p in reg.required if p not in s.params]
            if missing:
                raise ConfigError(f"constraints.{s.id}: missing parameter field(s) "
                                  + ", ".join(f"constraints.{s.id}.{m}" for m in missing))
            if s.gate is not None and s.gate not in registry.gates:
                raise ConfigError(f"constraints.{s.id}.gate: unknown gate {s.gate!r}; available: {sorted(registry.gates)}")
            self._fns.append(reg.fn)
            self._gates.append(registry.gates[s.gate] if s.gate is not None else None)

    def __len__(self) -> int:
        return len(self.specs)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.specs]

    def evaluate(self, quantities: Quantities, batch_shape: tuple[int, ...]) -> Violations:
        k = len(self.specs)
        raw = np.zeros(batch_shape + (k,))
        active = np.ones(batch_shape + (k,), dtype=bool)
        for i, (spec, fn, gate) in enumerate(zip(self.specs, self._fns, self._gates)):
            value = np.broadcast_to(np.asarray(fn(quantities, spec.params), dtype=np.float64), batch_shape)
            if gate is not None:
                on = np.broadcast_to(np.asarray(gate(quantities), dtype=bool), batch_shape)
                active[..., i] = on
                value = np.where(on, value, 0.0)
            raw[..., i] = value
        return Violations(raw, np.maximum(raw, 0.0), active)


def evaluate_constraints(constraint_set: ConstraintSet, quantities: Quantities,
                         batch_shape: tuple[int, ...] = ()) -> Violations:
    return constraint_set.evaluate(quantities, batch_shape)


def p_max(spec: ConstraintSpec, schedule: SoftSchedule, epoch: float, total_epochs: float) -> float:
    if spec.kind is Kind.HARD:
        return 1.0
    ramp = schedule.ramp_fraction * total_epochs
    progress = 1.0 if ramp <= 0 else min(max(epoch / ramp, 0.0), 1.0)
    return schedule.p_start + (schedule.p_end - schedule.p_start) * progress


def p_max_vector(specs: Sequence[ConstraintSpec], schedule: SoftSchedule, epoch: float,
                 total_epochs: float) -> np.ndarray:
    return np.array([p_max(s, schedule, epoch, total_epochs) for s in specs], dtype=np.float64)


@dataclass(frozen=True)
class TerminationState:
    c_max: np.ndarray
    tau_c: float = 0.95
    c_max_floor: float = 1e-6
    epoch: int = 0

    @classmethod
    def initial(cls, n_constraints: int, tau_c: float = 0.95, c_max_floor: float = 1e-6) -> "TerminationState":
        if not (0.0 < tau_c < 1.0):
            raise ConfigError(f"tau_c must lie in (0, 1), got {tau_c}")
        if c_max_floor <= 0:
            raise ConfigError(f"c_max_floor must be positive, got {c_max_floor}")
        return cls(np.full(n_constraints, float(c_max_floor)), float(tau_c), float(c_max_floor))


def update_c_max(state: TerminationState, batch_positive) -> TerminationState:
    """One moving-average step of c_max from every c+ in the collected batch.

    ``batch_positive`` has shape ``(..., n_constraints)``; the batch max is
    taken over all leading axes.
    """
    batch_positive = np.asarray(batch_positive, dtype=np.float64)
    k = state.c_max.shape[0]
    flat = batch_positive.reshape(-1, k)
    if flat.shape[0] == 0:
        raise ValueError("update_c_max needs a non-empty batch")
    batch_max = flat.max(axis=0)
    c_max = state.tau_c * state.c_max + (1.0 - state.tau_c) * batch_max
    return replace(state, c_max=np.maximum(c_max, state.c_max_floor), epoch=state.epoch + 1)


def termination_probability(state: TerminationState, violations: Violations | np.ndarray,
                            p_maxes) -> np.ndarray:
    """delta = max_i p_max[i] * clip(c+_i / c_max[i], 0, 1) over the last axis."""
    positive = violations.positive if isinstance(violations, Violations) else np.asarray(violations)
    p_maxes = np.asarray(p_maxes, dtype=np.float64)
    if positive.shape[-1] != state.c_max.shape[0] or p_maxes.shape != state.c_max.shape:
        raise ValueError("violations, p_maxes and c_max disagree on the number of constraints")
    if positive.shape[-1] == 0:
        return np.zeros(positive.shape[:-1])
    scaled = p_maxes * np.clip(positive / state.c_max, 0.0, 1.0)
    return scaled.max(axis=-1)


def naive_termination(violations: Violations | np.ndarray) -> np.ndarray:
    """Binary termination: 1 when any active constraint is violated at all."""
    positive = violations.positive if isinstance(violations, Violations) else np.asarray(violations)
    if positive.shape[-1] == 0:
        return np.zeros(positive.shape[:-1])
    return np.any(positive > 0.0, axis=-1).astype(np.float64)
