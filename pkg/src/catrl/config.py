"""Experiment configuration: TOML loading, dotted overrides, validation."""

from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np
import tomli
import tomli_w

from .constraints import ConstraintSpec, Kind, SoftSchedule
from .envs import TaskMode, env_class
from .errors import ConfigError

OUTPUT_ROOT_ENV = "CATRL_OUTPUT_ROOT"
VARIANTS = ("cat", "etmdp", "hard_only", "style_always", "penalty", "unconstrained")
_CONSTRAINT_META = ("fn", "kind", "gate", "group")


@dataclass
class PpoHyper:
    epochs: int = 300
    num_envs: int = 256
    horizon: int = 24
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    entropy_coef: float = 1e-3
    critic_coef: float = 2.0
    mini_epochs: int = 5
    minibatch_size: int = 1536
    learning_rate: float = 3e-4
    lr_schedule: str = "adaptive"
    kl_threshold: float = 8e-3
    max_grad_norm: float = 1.0
    actor_hidden: list[int] = field(default_factory=lambda: [64, 64])
    critic_hidden: list[int] = field(default_factory=lambda: [64, 64])
    activation: str = "elu"
    log_std_init: float = 0.0
    log_std_min: float = -5.0
    log_std_max: float = 1.0
    tau_c: float = 0.95
    c_max_floor: float = 1e-6
    p_start: float = 0.05
    p_end: float = 0.25
    ramp_fraction: float = 1.0
    randomize_start: bool = True

    def schedule(self) -> SoftSchedule:
        return SoftSchedule(self.p_start, self.p_end, self.ramp_fraction)


@dataclass
class VariantConfig:
    name: str = "cat"
    penalty_weights: dict[str, float] = field(default_factory=dict)
    # optional constant added to every reward (ET-MDP survival bonus)
    reward_constant: float = 0.0


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    eval_episodes: int = 32
    min_eval_episodes: int = 1


@dataclass
class ExperimentConfig:
    env_name: str = "pendulum"
    task_mode: str = "reward"
    env_params: dict[str, Any] = field(default_factory=dict)
    # None selects the environment's default constraint set for task_mode
    constraints: Optional[dict[str, dict[str, Any]]] = None
    algo: PpoHyper = field(default_factory=PpoHyper)
    variant: VariantConfig = field(default_factory=VariantConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def resolved_constraints(self) -> dict[str, dict[str, Any]]:
        if self.constraints is None:
            return copy.deepcopy(env_class(self.env_name).default_constraints(TaskMode(self.task_mode)))
        return copy.deepcopy(self.constraints)

    def constraint_specs(self) -> list[ConstraintSpec]:
        specs = []
        for cid, entry in self.resolved_constraints().items():
            params = {k: float(v) for k, v in entry.items() if k not in _CONSTRAINT_META}
            specs.append(ConstraintSpec(cid, Kind(entry["kind"]), entry["fn"], params,
                                        entry.get("gate"), entry.get("group", "")))
        return specs

    def resolve(self) -> "ExperimentConfig":
        """Copy with defaults made explicit (constraint set, env params)."""
        out = copy.deepcopy(self)
        out.constraints = self.resolved_constraints()
        out.env_params = {**env_class(self.env_name).default_params, **self.env_params}
        return out

    def to_dict(self) -> dict:
        env = {"name": self.env_name, "task_mode": self.task_mode, **self.env_params}
        doc: dict[str, Any] = {"env": env}
        if self.constraints is not None:
            doc["constraints"] = copy.deepcopy(self.constraints)
        doc["algo"] = dataclasses.asdict(self.algo)
        doc["variant"] = dataclasses.asdict(self.variant)
        doc["run"] = dataclasses.asdict(self.run)
        return doc

    def output_path(self) -> Path:
        p = Path(self.run.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not p.is_absolute():
            p = Path(root) / p
        return p

    def with_overrides(self, overrides: Sequence[str]) -> "ExperimentConfig":
        return from_dict(apply_overrides(self.to_dict(), overrides))


def _check_section(section: str, data: Mapping[str, Any], cls, errors: list[str]) -> dict:
    known = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, value in data.items():
        if key not in known:
            errors.append(f"{section}.{key}: unknown field")
            continue
        default = known[key].default
        if default is dataclasses.MISSING:
            default = known[key].default_factory()  # type: ignore[misc]
        before = len(errors)
        value = _coerce(f"{section}.{key}", value, default, errors)
        # keep the default on a type error so the remaining checks can still run
        out[key] = value if len(errors) == before else default
    return out


def _coerce(path: str, value, default, errors: list[str]):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            errors.append(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{path}: expected a number, got {value!r}")
            return value
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            errors.append(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            errors.append(f"{path}: expected a list of integers, got {value!r}")
        return list(value) if isinstance(value, list) else value
    if isinstance(default, dict):
        if not isinstance(value, dict):
            errors.append(f"{path}: expected a table, got {value!r}")
            return value
        for k, v in value.items():
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                errors.append(f"{path}.{k}: expected a number, got {v!r}")
        return {k: float(v) for k, v in value.items() if isinstance(v, (int, float))}
    return value


def from_dict(doc: Mapping[str, Any]) -> ExperimentConfig:
    """Build and validate a config; all problems are reported together."""
    errors: list[str] = []
    unknown = sorted(set(doc) - {"env", "constraints", "algo", "variant", "run"})
    errors += [f"{u}: unknown section" for u in unknown]

    env = dict(doc.get("env", {}))
    env_name = env.pop("name", "pendulum")
    task_mode = env.pop("task_mode", "reward")
    cls = None
    try:
        cls = env_class(env_name)
    except ConfigError as e:
        errors.append(str(e))
    if task_mode not in [m.value for m in TaskMode]:
        errors.append(f"env.task_mode: expected one of {[m.value for m in TaskMode]}, got {task_mode!r}")
        task_mode = "reward"
    if cls is not None:
        for key, value in env.items():
            if key not in cls.default_params:
                errors.append(f"env.{key}: unknown parameter for {env_name}")
                continue
            default = cls.default_params[key]
            if isinstance(default, list):
                if not isinstance(value, list) or not all(isinstance(v, (int, float)) for v in value):
                    errors.append(f"env.{key}: expected a list of numbers, got {value!r}")
                else:
                    env[key] = [float(v) for v in value]
            else:
                env[key] = _coerce(f"env.{key}", value, default, errors)

    constraints = None
    if "constraints" in doc:
        constraints = {}
        for cid, entry in doc["constraints"].items():
            if not isinstance(entry, dict):
                errors.append(f"constraints.{cid}: expected a table")
                continue
            entry = dict(entry)
            for req in ("fn", "kind"):
                if req not in entry:
                    errors.append(f"constraints.{cid}.{req}: missing required field")
            if "kind" in entry and entry["kind"] not in [k.value for k in Kind]:
                errors.append(f"constraints.{cid}.kind: expected 'hard' or 'soft', got {entry['kind']!r}")
            for k, v in entry.items():
                if k in ("fn", "kind", "gate", "group"):
                    if not isinstance(v, str):
                        errors.append(f"constraints.{cid}.{k}: expected a string, got {v!r}")
                elif isinstance(v, bool) or not isinstance(v, (int, float)):
                    errors.append(f"constraints.{cid}.{k}: expected a number, got {v!r}")
            if cls is not None and isinstance(entry.get("fn"), str):
                reg = cls.registry
                if entry["fn"] not in reg.functions:
                    errors.append(f"constraints.{cid}.fn: unknown violation function {entry['fn']!r} "
                                  f"for {env_name}; available: {sorted(reg.functions)}")
                else:
                    for req in reg.functions[entry["fn"]].required:
                        if req not in entry:
                            errors.append(f"constraints.{cid}.{req}: missing required field")
                if "gate" in entry and isinstance(entry["gate"], str) and entry["gate"] not in reg.gates:
                    errors.append(f"constraints.{cid}.gate: unknown gate {entry['gate']!r}; "
                                  f"available: {sorted(reg.gates)}")
            constraints[cid] = entry

    algo = _check_section("algo", doc.get("algo", {}), PpoHyper, errors)
    variant = _check_section("variant", doc.get("variant", {}), VariantConfig, errors)
    run = _check_section("run", doc.get("run", {}), RunConfig, errors)
    cfg = None
    if cls is not None:
        cfg = ExperimentConfig(env_name, task_mode, env, constraints, PpoHyper(**algo),
                               VariantConfig(**variant), RunConfig(**run))
        errors += [e for e in validate(cfg) if e not in errors]
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    assert cfg is not None
    return cfg


def validate(cfg: ExperimentConfig) -> list[str]:
    errors = []
    a = cfg.algo
    positive = ("epochs", "num_envs", "horizon", "gamma", "lam", "clip", "critic_coef", "mini_epochs",
                "minibatch_size", "learning_rate", "kl_threshold", "max_grad_norm")
    for name in positive:
        if not getattr(a, name) > 0:
            errors.append(f"algo.{name}: must be positive, got {getattr(a, name)!r}")
    if a.entropy_coef < 0:
        errors.append(f"algo.entropy_coef: must be >= 0, got {a.entropy_coef!r}")
    if not 0 < a.clip < 1:
        errors.append(f"algo.clip: must lie in (0, 1), got {a.clip!r}")
    if a.gamma > 1 or a.lam > 1:
        errors.append("algo.gamma/algo.lam: must be <= 1")
    if a.lr_schedule not in ("adaptive", "fixed"):
        errors.append(f"algo.lr_schedule: expected 'adaptive' or 'fixed', got {a.lr_schedule!r}")
    if a.activation not in ("elu", "tanh"):
        errors.append(f"algo.activation: expected 'elu' or 'tanh', got {a.activation!r}")
    if any(h <= 0 for h in a.actor_hidden + a.critic_hidden):
        errors.append("algo.actor_hidden/critic_hidden: layer sizes must be positive")
    if a.log_std_min >= a.log_std_max:
        errors.append("algo.log_std_min: must be below algo.log_std_max")
    if not 0 < a.tau_c < 1:
        errors.append(f"algo.tau_c: must lie in (0, 1), got {a.tau_c!r}")
    if a.c_max_floor <= 0:
        errors.append("algo.c_max_floor: must be positive")
    try:
        a.schedule()
    except ConfigError as e:
        errors.append(f"algo.p_start/p_end/ramp_fraction: {e}")
    v = cfg.variant
    if v.name not in VARIANTS:
        errors.append(f"variant.name: unknown variant {v.name!r}; expected one of {list(VARIANTS)}")
    ids = set(cfg.resolved_constraints())
    if v.name == "penalty":
        if not v.penalty_weights:
            errors.append("variant.penalty_weights: required for the penalty variant")
        for cid, w in v.penalty_weights.items():
            if cid not in ids:
                errors.append(f"variant.penalty_weights.{cid}: no such constraint")
            if w < 0:
                errors.append(f"variant.penalty_weights.{cid}: must be >= 0")
    elif v.penalty_weights:
        errors.append("variant.penalty_weights: only allowed for the penalty variant")
    if cfg.run.eval_episodes < max(1, cfg.run.min_eval_episodes):
        errors.append("run.eval_episodes: below run.min_eval_episodes")
    return errors


def load_config(path, overrides: Sequence[str] = ()) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            doc = tomli.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return from_dict(apply_overrides(doc, overrides))


def dumps(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def save_config(cfg: ExperimentConfig, path):
    Path(path).write_text(dumps(cfg))


def parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(doc: Mapping[str, Any], overrides: Sequence[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values use TOML syntax, bare words are strings.

    ``variant=NAME`` is shorthand for ``variant.name=NAME``.
    """
    out = copy.deepcopy(dict(doc))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, text = item.split("=", 1)
        keys = key.strip().split(".")
        if keys == ["variant"]:
            keys = ["variant", "name"]
        node = out
        for k in keys[:-1]:
            nxt = node.setdefault(k, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {item!r}: {k} is not a table")
            node = nxt
        node[keys[-1]] = parse_value(text.strip())
    return out


def config_equal(a: ExperimentConfig, b: ExperimentConfig) -> bool:
    return a.to_dict() == b.to_dict()


def seed_everything(seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 0])
