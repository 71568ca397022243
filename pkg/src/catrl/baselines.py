"""Variant wiring for the comparison runs.

Variants only change how the experiment is wired (termination source,
constraint kinds and gates, reward shaping), never the training loop.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .constraints import ConstraintSpec, Kind
from .config import VARIANTS, VariantConfig
from .errors import ConfigError


@dataclass(frozen=True)
class Wiring:
    variant: str
    specs: tuple[ConstraintSpec, ...]
    # "stochastic" (max of scaled violations), "naive" (binary) or "none"
    termination: str
    penalty_weights: np.ndarray | None = None
    reward_constant: float = 0.0

    def shape_reward(self, reward: np.ndarray, positive: np.ndarray) -> np.ndarray:
        reward = reward + self.reward_constant
        if self.penalty_weights is not None:
            reward = np.maximum(0.0, reward - positive @ self.penalty_weights)
        return reward


def apply_variant(variant: VariantConfig, specs: Sequence[ConstraintSpec]) -> Wiring:
    name = variant.name
    if name not in VARIANTS:
        raise ConfigError(f"variant.name: unknown variant {name!r}; expected one of {list(VARIANTS)}")
    specs = tuple(specs)
    const = float(variant.reward_constant)
    if name == "cat":
        return Wiring(name, specs, "stochastic", reward_constant=const)
    if name == "etmdp":
        return Wiring(name, specs, "naive", reward_constant=const)
    if name == "hard_only":
        return Wiring(name, tuple(replace(s, kind=Kind.HARD) for s in specs), "stochastic", reward_constant=const)
    if name == "style_always":
        return Wiring(name, tuple(replace(s, gate=None) for s in specs), "stochastic", reward_constant=const)
    if name == "unconstrained":
        return Wiring(name, specs, "none", reward_constant=const)
    # penalty
    ids = [s.id for s in specs]
    unknown = sorted(set(variant.penalty_weights) - set(ids))
    if unknown:
        raise ConfigError(f"variant.penalty_weights: unknown constraint id(s) {unknown}")
    if not variant.penalty_weights:
        raise ConfigError("variant.penalty_weights: required for the penalty variant")
    weights = np.array([float(variant.penalty_weights.get(i, 0.0)) for i in ids])
    if np.any(weights < 0):
        raise ConfigError("variant.penalty_weights: weights must be >= 0")
    return Wiring(name, specs, "none", penalty_weights=weights, reward_constant=const)
