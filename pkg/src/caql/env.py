"""Environments: Pendulum swing-up and a one-step analytic oracle."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bounds import BoxDomain

G, MASS, LENGTH, DT, MAX_SPEED = 10.0, 1.0, 1.0, 0.05, 8.0


def wrap_angle(theta: float) -> float:
    """Map an angle to [-pi, pi)."""
    return float((theta + np.pi) % (2 * np.pi) - np.pi)


@dataclass(frozen=True)
class PendulumState:
    theta: float
    theta_dot: float

    @property
    def observation(self) -> np.ndarray:
        return np.array([np.cos(self.theta), np.sin(self.theta), self.theta_dot])


def pendulum_step(state: PendulumState, u: float, max_torque: float = 2.0):
    """One Euler step; returns (next state, reward of the current state and torque)."""
    u = float(np.clip(u, -max_torque, max_torque))
    th, thdot = state.theta, state.theta_dot
    reward = -(wrap_angle(th) ** 2 + 0.1 * thdot ** 2 + 0.001 * u ** 2)
    new_thdot = float(np.clip(thdot + (3 * G / (2 * LENGTH) * np.sin(th)
                                       + 3.0 / (MASS * LENGTH ** 2) * u) * DT, -MAX_SPEED, MAX_SPEED))
    return PendulumState(th + new_thdot * DT, new_thdot), reward


class Pendulum:
    state_dim = 3
    action_dim = 1

    def __init__(self, action_range: float = 2.0, seed=None):
        if action_range <= 0:
            raise ValueError("action range must be positive")
        self.action_range = float(action_range)
        self.box = BoxDomain.symmetric(self.action_range, 1)
        self.rng = np.random.default_rng(seed)
        self.state = PendulumState(0.0, 0.0)

    def reset(self) -> np.ndarray:
        self.state = PendulumState(float(self.rng.uniform(-np.pi, np.pi)),
                                   float(self.rng.uniform(-1.0, 1.0)))
        return self.state.observation

    def step(self, action):
        u = float(np.asarray(action, dtype=np.float64).reshape(-1)[0])
        self.state, reward = pendulum_step(self.state, u, self.action_range)
        return self.state.observation, reward, False


def oracle_step(x: float, a: float, rng: np.random.Generator):
    """Reward ``-(a - sin x)^2``; the next state is uniform in [-1, 1]."""
    return float(rng.uniform(-1.0, 1.0)), -(float(a) - np.sin(float(x))) ** 2


class OracleEnv:
    """One-dimensional bandit-like task whose optimal action is ``sin x``."""

    state_dim = 1
    action_dim = 1

    def __init__(self, action_range: float = 1.0, seed=None):
        self.box = BoxDomain.symmetric(action_range, 1)
        self.rng = np.random.default_rng(seed)
        self.x = 0.0

    def reset(self) -> np.ndarray:
        self.x = float(self.rng.uniform(-1.0, 1.0))
        return np.array([self.x])

    def step(self, action):
        a = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0],
                          self.box.lower[0], self.box.upper[0]))
        self.x, reward = oracle_step(self.x, a, self.rng)
        return np.array([self.x]), reward, False


ENVS = {"pendulum": Pendulum, "oracle": OracleEnv}


def make_env(name: str, action_range: float | None = None, seed=None):
    try:
        cls = ENVS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None
    return cls(seed=seed) if action_range is None else cls(action_range, seed=seed)
