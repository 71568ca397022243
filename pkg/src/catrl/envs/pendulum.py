"""Torque-limited pendulum swing-up.

Angle 0 is upright; episodes start hanging down (angle pi). The actuator can
command more torque than the torque constraint allows, so the limit binds.
An optional observed disturbance torque ``A sin(w t + phase)`` with a random
per-episode phase keeps the actuator busy after the swing-up.
"""

from __future__ import annotations

import numpy as np

from ..constraints import Registry
from .base import ConstrainedEnv, EnvState, TaskMode, wrap_angle

registry = Registry()


@registry.add("torque_limit", required=("limit",), doc="|u| - limit")
def torque_limit(q, p):
    return np.abs(q["torque"]) - p["limit"]


@registry.add("velocity_limit", required=("limit",), doc="|theta_dot| - limit")
def velocity_limit(q, p):
    return np.abs(q["theta_dot"]) - p["limit"]


@registry.add("action_rate", required=("limit",), doc="|u_t - u_{t-1}| / dt - limit")
def action_rate(q, p):
    return q["action_rate"] - p["limit"]


@registry.add("upright", required=("tolerance",), doc="|theta| - tolerance (task as a constraint)")
def upright(q, p):
    return np.abs(q["theta"]) - p["tolerance"]


class Pendulum(ConstrainedEnv):
    name = "pendulum"
    obs_dim = 5
    act_dim = 1
    registry = registry
    default_params = {
        "dt": 0.05,
        "episode_length": 200,
        "mass": 0.25,
        "length": 1.0,
        "gravity": 9.81,
        "damping": 0.01,
        "max_torque": 4.0,
        "action_scale": 1.0,
        "init_angle_noise": 0.1,
        "init_velocity_noise": 0.1,
        "upright_tolerance": 0.5,
        "disturbance_amplitude": 0.0,
        "disturbance_frequency": 1.5,
    }

    def _sample_initial(self, rng):
        p = self.params
        theta = np.pi + rng.uniform(-p["init_angle_noise"], p["init_angle_noise"])
        theta_dot = rng.uniform(-p["init_velocity_noise"], p["init_velocity_noise"])
        phase = rng.uniform(0.0, 2.0 * np.pi)
        return {"theta": np.float64(wrap_angle(theta)), "theta_dot": np.float64(theta_dot)}, np.array([phase])

    def disturbance(self, state: EnvState) -> np.ndarray:
        p = self.params
        t = state.steps * self.dt
        return p["disturbance_amplitude"] * np.sin(p["disturbance_frequency"] * t + state.command[:, 0])

    def observe(self, state: EnvState) -> np.ndarray:
        th, thd = state.physical["theta"], state.physical["theta_dot"]
        return np.stack([np.cos(th), np.sin(th), thd / 8.0, state.prev_action[:, 0] / self.params["max_torque"],
                         self.disturbance(state) / self.params["max_torque"]], axis=1)

    def _dynamics(self, state, action):
        p = self.params
        inertia = p["mass"] * p["length"] ** 2
        u = np.clip(p["action_scale"] * action[:, 0], -p["max_torque"], p["max_torque"])
        th, thd = state.physical["theta"], state.physical["theta_dot"]
        acc = (p["gravity"] / p["length"]) * np.sin(th) + (u + self.disturbance(state) - p["damping"] * thd) / inertia
        thd_next = thd + self.dt * acc
        th_next = wrap_angle(th + self.dt * thd_next)
        if self.task_mode is TaskMode.REWARD:
            reward = 0.5 * (1.0 + np.cos(th_next))
        else:
            reward = np.ones(state.n)
        quantities = {
            "torque": u,
            "theta": th_next,
            "theta_dot": thd_next,
            "action_rate": np.abs(u - state.prev_action[:, 0]) / self.dt,
        }
        return {"theta": th_next, "theta_dot": thd_next}, u[:, None], reward, quantities

    def energy(self, state: EnvState) -> np.ndarray:
        p = self.params
        th, thd = state.physical["theta"], state.physical["theta_dot"]
        return 0.5 * p["mass"] * p["length"] ** 2 * thd ** 2 + p["mass"] * p["gravity"] * p["length"] * np.cos(th)

    def episode_success(self, episode):
        """Upright (|theta| < upright_tolerance) for at least half of the final 100 steps."""
        theta = episode["theta"]  # (steps, n)
        tail = np.abs(theta[-100:]) < self.params["upright_tolerance"]
        return tail.mean(axis=0) >= 0.5

    @staticmethod
    def default_constraints(task_mode: TaskMode) -> dict:
        out = {
            "torque": {"fn": "torque_limit", "kind": "soft", "limit": 2.0, "group": "safety"},
            "joint_velocity": {"fn": "velocity_limit", "kind": "soft", "limit": 8.0, "group": "safety"},
            "action_rate": {"fn": "action_rate", "kind": "soft", "limit": 10.0, "group": "safety"},
        }
        if TaskMode(task_mode) is TaskMode.CONSTRAINT:
            out["upright"] = {"fn": "upright", "kind": "soft", "tolerance": 0.5, "group": "task"}
        return out
