"""Obstacle position predictors over the planning horizon."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dynamics import AgentState
from .rkhs import CkmeModel, ckme_predict, ckme_predict_gradient


@dataclass(frozen=True)
class ConstantVelocityPredictor:
    """Obstacle keeps its current speed and heading."""

    obstacle_state: AgentState
    Ts: float

    def __post_init__(self):
        if not self.Ts > 0:
            raise ValueError(f"Ts must be positive, got {self.Ts}")

    def predict(self, i: int) -> np.ndarray:
        return cv_predict(self, i)

    def predict_horizon(self, N: int) -> np.ndarray:
        s = self.obstacle_state
        steps = np.arange(1, N + 1)[:, None]
        heading = np.array([math.cos(s.theta), math.sin(s.theta)])
        return s.position + steps * self.Ts * s.v * heading


def cv_predict(pred: ConstantVelocityPredictor, i: int) -> np.ndarray:
    if i < 1:
        raise ValueError(f"lookahead must be >= 1, got {i}")
    s = pred.obstacle_state
    return s.position + i * pred.Ts * s.v * np.array([math.cos(s.theta), math.sin(s.theta)])


def build_context(ego_positions, obstacle_base, i: int) -> np.ndarray:
    """Flattened context ``[p(0), p(1)-p(0), ..., p(i-1)-p(0), p_obs(0)]``."""
    P = np.asarray(ego_positions, dtype=float).reshape(-1, 2)
    if P.shape[0] != i:
        raise ValueError(f"lookahead {i} needs exactly {i} ego positions, got {P.shape[0]}")
    base = P[0]
    parts = [base, (P[1:] - base).ravel(), np.asarray(obstacle_base, dtype=float).ravel()]
    return np.concatenate(parts)


def context_jacobian(i: int) -> np.ndarray:
    """Constant matrix ``dz / d[p(0), ..., p(i-1)]`` of shape ``(2(i+1), 2i)``."""
    J = np.zeros((2 * (i + 1), 2 * i))
    J[0:2, 0:2] = np.eye(2)
    for t in range(1, i):
        rows = slice(2 * t, 2 * t + 2)
        J[rows, 0:2] = -np.eye(2)
        J[rows, 2 * t:2 * t + 2] = np.eye(2)
    return J


class ContextualPredictor:
    """One CKME model per lookahead step ``1..N``."""

    def __init__(self, models: Sequence[CkmeModel]):
        self.models = {}
        for m in models:
            if m.context_dim != 2 * (m.lookahead + 1):
                raise ValueError(
                    f"model for lookahead {m.lookahead} has context dim {m.context_dim}, "
                    f"expected {2 * (m.lookahead + 1)}")
            self.models[m.lookahead] = m

    @property
    def horizon(self) -> int:
        n = 0
        while n + 1 in self.models:
            n += 1
        return n

    def model(self, i: int) -> CkmeModel:
        try:
            return self.models[i]
        except KeyError:
            raise KeyError(f"no CKME model for lookahead {i}") from None


def cx_predict(pred: ContextualPredictor, z, i: int) -> np.ndarray:
    return ckme_predict(pred.model(i), z)


def cx_predict_sensitivity(pred: ContextualPredictor, z, i: int) -> np.ndarray:
    """Jacobian of the CKME prediction w.r.t. ego positions ``p(0..i-1)``, shape ``(2, 2i)``.

    Columns 0:2 belong to ``p(0)``; the planner drops them since the current
    position is fixed.
    """
    return ckme_predict_gradient(pred.model(i), z) @ context_jacobian(i)
