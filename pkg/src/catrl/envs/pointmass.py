"""Planar point mass tracking a velocity command.

The action is a desired acceleration (thrust). Inside the style zone
(``x < style_zone_x``) the ground is calm; beyond it a lateral current pushes
the mass, so tracking there needs thrust that is not aligned with the command.
"""

from __future__ import annotations

import numpy as np

from ..constraints import Registry
from .base import ConstrainedEnv, EnvState, TaskMode

registry = Registry()


def _norm(x):
    return np.sqrt(np.sum(x * x, axis=-1))


@registry.add("arena_bound", required=("half_width",), doc="max(|x|, |y|) - half_width")
def arena_bound(q, p):
    return np.max(np.abs(q["position"]), axis=-1) - p["half_width"]


@registry.add("force_limit", required=("limit",), doc="||a|| - limit")
def force_limit(q, p):
    return _norm(q["accel"]) - p["limit"]


@registry.add("accel_rate", required=("limit",), doc="||a_t - a_{t-1}|| / dt - limit")
def accel_rate(q, p):
    return q["accel_rate"] - p["limit"]


@registry.add("speed_limit", required=("limit",), doc="||v|| - limit")
def speed_limit(q, p):
    return q["speed"] - p["limit"]


@registry.add("stand_still", required=("epsilon",), doc="(||v|| - epsilon) * 1[v_des = 0]")
def stand_still(q, p):
    return (q["speed"] - p["epsilon"]) * q["still_command"]


@registry.add("heading_alignment", required=("max_angle",),
              doc="angle(thrust, v_des) - max_angle; satisfied when either vector vanishes")
def heading_alignment(q, p):
    return np.where(q["heading_defined"], q["heading_angle"] - p["max_angle"], -p["max_angle"])


@registry.add("tracking", required=("epsilon",), doc="||v_des - v|| - epsilon")
def tracking(q, p):
    return q["tracking_error"] - p["epsilon"]


@registry.add_gate("style_zone")
def style_zone(q):
    return q["in_style_zone"]


class PointMass(ConstrainedEnv):
    name = "pointmass"
    obs_dim = 10
    act_dim = 2
    registry = registry
    default_params = {
        "dt": 0.05,
        "episode_length": 200,
        "max_accel": 5.0,
        "action_scale": 1.0,
        "drag": 0.5,
        "arena_half_width": 12.0,
        "style_zone_x": 1.0,
        "current": [0.0, 1.0],
        "vx_range": [-0.3, 1.0],
        "vy_range": [-0.7, 0.7],
        "p_still": 0.1,
        "reward_baseline": 0.5,
        "tracking_epsilon": 0.2,
        "min_thrust": 0.05,
    }

    def _sample_initial(self, rng):
        p = self.params
        if rng.uniform() < p["p_still"]:
            cmd = np.zeros(2)
        else:
            cmd = np.array([rng.uniform(*p["vx_range"]), rng.uniform(*p["vy_range"])])
        return {"position": np.zeros(2), "velocity": np.zeros(2)}, cmd

    def current_at(self, position: np.ndarray) -> np.ndarray:
        outside = position[:, 0] >= self.params["style_zone_x"]
        return outside[:, None] * np.asarray(self.params["current"], dtype=np.float64)[None, :]

    def observe(self, state: EnvState) -> np.ndarray:
        pos = state.physical["position"]
        return np.concatenate([pos / 5.0, state.physical["velocity"], state.command,
                               state.prev_action / self.params["max_accel"], self.current_at(pos)], axis=1)

    def _dynamics(self, state, action):
        p = self.params
        a = np.clip(p["action_scale"] * action, -p["max_accel"], p["max_accel"])
        pos, vel = state.physical["position"], state.physical["velocity"]
        vel_next = vel + self.dt * (a + self.current_at(pos) - p["drag"] * vel)
        pos_next = pos + self.dt * vel_next
        cmd = state.command
        err = _norm(cmd - vel_next)
        if self.task_mode is TaskMode.REWARD:
            reward = np.exp(-err ** 2 / 0.25) + p["reward_baseline"]
        else:
            reward = np.ones(state.n)
        a_norm, c_norm = _norm(a), _norm(cmd)
        defined = (a_norm > p["min_thrust"]) & (c_norm > 0.0)
        cos = np.sum(a * cmd, axis=-1) / np.where(defined, a_norm * c_norm, 1.0)
        quantities = {
            "accel": a,
            "accel_rate": _norm(a - state.prev_action) / self.dt,
            "position": pos_next,
            "velocity": vel_next,
            "speed": _norm(vel_next),
            "tracking_error": err,
            "still_command": (c_norm == 0.0).astype(np.float64),
            "heading_angle": np.arccos(np.clip(cos, -1.0, 1.0)),
            "heading_defined": defined,
            "in_style_zone": pos[:, 0] < p["style_zone_x"],
        }
        return {"position": pos_next, "velocity": vel_next}, a, reward, quantities

    def episode_success(self, episode):
        """Mean tracking error over the episode below tracking_epsilon."""
        return episode["tracking_error"].mean(axis=0) < self.params["tracking_epsilon"]

    @staticmethod
    def default_constraints(task_mode: TaskMode) -> dict:
        out = {
            "arena": {"fn": "arena_bound", "kind": "hard", "half_width": 12.0, "group": "safety"},
            "force": {"fn": "force_limit", "kind": "hard", "limit": 3.0, "group": "safety"},
            "accel_rate": {"fn": "accel_rate", "kind": "soft", "limit": 40.0, "group": "safety"},
            "speed": {"fn": "speed_limit", "kind": "soft", "limit": 1.5, "group": "safety"},
            "stand_still": {"fn": "stand_still", "kind": "soft", "epsilon": 0.05, "group": "style"},
            "heading": {"fn": "heading_alignment", "kind": "soft", "max_angle": 0.5, "gate": "style_zone",
                        "group": "style"},
        }
        if TaskMode(task_mode) is TaskMode.CONSTRAINT:
            out["tracking"] = {"fn": "tracking", "kind": "soft", "epsilon": 0.2, "group": "task"}
        return out
