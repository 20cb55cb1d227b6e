"""Kinematic bicycle model with forward-Euler discretization.

The reference point is the center of the rear axle. State is
``[px, py, theta, v]`` and input is ``[a, delta]``. Heading is never wrapped
so the discrete map stays smooth for the planner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

HALF_PI = 0.5 * math.pi


class SteeringSingularityError(ValueError):
    """Raised when ``|delta| >= pi/2`` makes ``tan(delta)`` blow up."""


@dataclass(frozen=True)
class AgentState:
    px: float
    py: float
    theta: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.px, self.py, self.theta, self.v], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "AgentState":
        px, py, theta, v = (float(a) for a in arr)
        return cls(px, py, theta, v)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.px, self.py], dtype=float)


@dataclass(frozen=True)
class ControlInput:
    a: float
    delta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.delta], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "ControlInput":
        a, delta = (float(x) for x in arr)
        return cls(a, delta)


@dataclass(frozen=True)
class DynamicsConfig:
    wheelbase_L: float = 2.5
    Ts: float = 0.1

    def __post_init__(self):
        if not self.wheelbase_L > 0:
            raise ValueError(f"wheelbase must be positive, got {self.wheelbase_L}")
        if not self.Ts >= 0:
            raise ValueError(f"sampling time must be nonnegative, got {self.Ts}")


def _as_state(x) -> np.ndarray:
    return x.as_array() if isinstance(x, AgentState) else np.asarray(x, dtype=float)


def _as_input(u) -> np.ndarray:
    return u.as_array() if isinstance(u, ControlInput) else np.asarray(u, dtype=float)


def _check_steering(delta: float) -> None:
    if not abs(delta) < HALF_PI:
        raise SteeringSingularityError(f"|delta| = {abs(delta)} must stay below pi/2")


def continuous_derivative(x, u, cfg: DynamicsConfig) -> np.ndarray:
    """Right-hand side of the bicycle ODE: ``(v cos th, v sin th, v tan(delta)/L, a)``."""
    xs, us = _as_state(x), _as_input(u)
    _check_steering(us[1])
    _, _, theta, v = xs
    return np.array([
        v * math.cos(theta),
        v * math.sin(theta),
        v / cfg.wheelbase_L * math.tan(us[1]),
        us[0],
    ])


def euler_step(x, u, cfg: DynamicsConfig):
    """One forward-Euler step. Returns the same type as ``x``."""
    xs = _as_state(x)
    nxt = xs + cfg.Ts * continuous_derivative(xs, u, cfg)
    return AgentState.from_array(nxt) if isinstance(x, AgentState) else nxt


def rollout(x0, u_seq: Sequence, cfg: DynamicsConfig) -> list:
    """Apply ``u_seq`` from ``x0``; returns the ``len(u_seq)`` successor states."""
    if len(u_seq) == 0:
        raise ValueError("rollout needs at least one input")
    states = []
    x = x0
    for k, u in enumerate(u_seq):
        try:
            x = euler_step(x, u, cfg)
        except SteeringSingularityError as exc:
            raise SteeringSingularityError(f"step {k}: {exc}") from exc
        states.append(x)
    return states


def step_jacobians(x, u, cfg: DynamicsConfig) -> tuple[np.ndarray, np.ndarray]:
    """Exact Jacobians ``(d x'/d x, d x'/d u)`` of :func:`euler_step`."""
    xs, us = _as_state(x), _as_input(u)
    _check_steering(us[1])
    _, _, theta, v = xs
    Ts, L = cfg.Ts, cfg.wheelbase_L
    c, s, t = math.cos(theta), math.sin(theta), math.tan(us[1])
    A = np.eye(4)
    A[0, 2] = -Ts * v * s
    A[0, 3] = Ts * c
    A[1, 2] = Ts * v * c
    A[1, 3] = Ts * s
    A[2, 3] = Ts * t / L
    B = np.zeros((4, 2))
    B[2, 1] = Ts * v / L * (1.0 + t * t)
    B[3, 0] = Ts
    return A, B


def euler_step_batch(X: np.ndarray, U: np.ndarray, cfg: DynamicsConfig) -> np.ndarray:
    """Vectorized Euler map over rows of ``X`` (k x 4) and ``U`` (k x 2)."""
    if np.any(np.abs(U[:, 1]) >= HALF_PI):
        raise SteeringSingularityError("steering at or beyond pi/2 in batch")
    theta, v = X[:, 2], X[:, 3]
    dX = np.column_stack([
        v * np.cos(theta),
        v * np.sin(theta),
        v / cfg.wheelbase_L * np.tan(U[:, 1]),
        U[:, 0],
    ])
    return X + cfg.Ts * dX


def step_jacobians_batch(X: np.ndarray, U: np.ndarray, cfg: DynamicsConfig):
    """Stacked Jacobians, shapes ``(k, 4, 4)`` and ``(k, 4, 2)``."""
    if np.any(np.abs(U[:, 1]) >= HALF_PI):
        raise SteeringSingularityError("steering at or beyond pi/2 in batch")
    k = X.shape[0]
    Ts, L = cfg.Ts, cfg.wheelbase_L
    theta, v = X[:, 2], X[:, 3]
    c, s, t = np.cos(theta), np.sin(theta), np.tan(U[:, 1])
    A = np.tile(np.eye(4), (k, 1, 1))
    A[:, 0, 2] = -Ts * v * s
    A[:, 0, 3] = Ts * c
    A[:, 1, 2] = Ts * v * c
    A[:, 1, 3] = Ts * s
    A[:, 2, 3] = Ts * t / L
    B = np.zeros((k, 4, 2))
    B[:, 2, 1] = Ts * v / L * (1.0 + t * t)
    B[:, 3, 0] = Ts
    return A, B
