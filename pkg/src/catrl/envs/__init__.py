from __future__ import annotations

from typing import Any, Mapping, Optional, Sequence

from ..constraints import ConstraintSet, ConstraintSpec
from ..errors import ConfigError
from .base import ConstrainedEnv, EnvState, TaskMode, Transition, VecEnv, batch_step, wrap_angle
from .pendulum import Pendulum
from .pointmass import PointMass

ENVIRONMENTS: dict[str, type[ConstrainedEnv]] = {"pendulum": Pendulum, "pointmass": PointMass}


def env_class(name: str) -> type[ConstrainedEnv]:
    try:
        return ENVIRONMENTS[name]
    except KeyError:
        raise ConfigError(f"env.name: unknown environment {name!r}; available: {sorted(ENVIRONMENTS)}") from None


def constraint_registry(name: str):
    return env_class(name).registry


def make_env(name: str, params: Optional[Mapping[str, Any]] = None, task_mode: TaskMode | str = TaskMode.REWARD,
             specs: Sequence[ConstraintSpec] = ()) -> ConstrainedEnv:
    cls = env_class(name)
    return cls(params, task_mode, ConstraintSet(list(specs), cls.registry))


__all__ = [
    "ConstrainedEnv", "EnvState", "TaskMode", "Transition", "VecEnv", "batch_step", "wrap_angle",
    "Pendulum", "PointMass", "ENVIRONMENTS", "env_class", "constraint_registry", "make_env",
]
