"""Distributionally robust CVaR collision-avoidance rows for one prediction step.

For step ``i`` with training outputs ``p_hat_j``, output Gram ``K`` and CKME
weights ``beta(z_i)``, the block introduces auxiliaries ``(gamma, t, g_o)`` and
emits, all in ``<= 0`` form::

    C1   g_o + beta^T K gamma + eps * sqrt(gamma^T K gamma + sigma2) - alpha * t
    C2a  d_safe^2 - |p - p_hat_j|^2 + t - g_o - (K gamma)_j        j = 1..N_s
    C2b  -g_o - (K gamma)_j                                          j = 1..N_s

C2a and C2b together are the hinge ``(d_safe^2 - |p - p_hat_j|^2 + t)_+ <= g_o + (K gamma)_j``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rkhs import CkmeModel

SQRT_SMOOTHING = 1e-12


@dataclass(frozen=True)
class AmbiguityConfig:
    epsilon: float = 0.0
    alpha: float = 0.1

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")


def risk_function(p, p_obs, d_safe: float) -> float:
    """Squared-margin risk ``d_safe^2 - |p - p_obs|^2``; nonpositive iff distance >= d_safe."""
    diff = np.asarray(p, dtype=float) - np.asarray(p_obs, dtype=float)
    return d_safe * d_safe - float(diff @ diff)


def risk_gradient(p, p_obs) -> np.ndarray:
    """Gradient of :func:`risk_function` with respect to ``p``."""
    return -2.0 * (np.asarray(p, dtype=float) - np.asarray(p_obs, dtype=float))


@dataclass(frozen=True, eq=False)
class DrCvarBlock:
    """Constant data of one DR-CVaR block; auxiliaries are passed to :meth:`evaluate`."""

    step_i: int
    samples: np.ndarray
    output_gram: np.ndarray
    d_safe: float
    epsilon: float
    alpha: float
    sigma2: float = SQRT_SMOOTHING

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_aux(self) -> int:
        return self.n_samples + 2

    @property
    def n_rows(self) -> int:
        return 1 + 2 * self.n_samples

    def split_aux(self, aux) -> tuple[np.ndarray, float, float]:
        aux = np.asarray(aux, dtype=float)
        n = self.n_samples
        return aux[:n], float(aux[n]), float(aux[n + 1])

    def initial_aux(self) -> np.ndarray:
        return np.zeros(self.n_aux)

    def evaluate(self, p, beta, aux, with_jacobian: bool = True):
        """Row values and Jacobians with respect to ``p``, ``beta`` and ``aux``.

        Returns ``values`` of shape ``(n_rows,)`` and, if requested, the triple
        ``(d/dp (n_rows, 2), d/dbeta (n_rows, N_s), d/daux (n_rows, N_s + 2))``.
        """
        n = self.n_samples
        K = self.output_gram
        gamma, t, g_o = self.split_aux(aux)
        beta = np.asarray(beta, dtype=float)
        p = np.asarray(p, dtype=float)
        Kg = K @ gamma
        root = math.sqrt(max(float(gamma @ Kg), 0.0) + self.sigma2)
        diff = p - self.samples
        loss = self.d_safe**2 - np.einsum("ij,ij->i", diff, diff)

        values = np.empty(self.n_rows)
        values[0] = g_o + beta @ Kg + self.epsilon * root - self.alpha * t
        values[1:1 + n] = loss + t - g_o - Kg
        values[1 + n:] = -g_o - Kg
        if not with_jacobian:
            return values

        d_p = np.zeros((self.n_rows, 2))
        d_p[1:1 + n] = -2.0 * diff
        d_beta = np.zeros((self.n_rows, n))
        d_beta[0] = Kg
        d_aux = np.zeros((self.n_rows, n + 2))
        d_aux[0, :n] = K @ beta
        if self.epsilon:
            d_aux[0, :n] += self.epsilon * Kg / root
        d_aux[0, n] = -self.alpha
        d_aux[0, n + 1] = 1.0
        d_aux[1:1 + n, :n] = -K
        d_aux[1:1 + n, n] = 1.0
        d_aux[1:1 + n, n + 1] = -1.0
        d_aux[1 + n:, :n] = -K
        d_aux[1 + n:, n + 1] = -1.0
        return values, (d_p, d_beta, d_aux)


def build_block(i: int, samples, output_gram, cfg: AmbiguityConfig, d_safe: float,
                sigma2: float = SQRT_SMOOTHING) -> DrCvarBlock:
    samples = np.asarray(samples, dtype=float).reshape(-1, 2)
    if samples.shape[0] == 0:
        raise ValueError("DR-CVaR block needs at least one sample")
    K = np.asarray(output_gram, dtype=float)
    if K.shape != (samples.shape[0], samples.shape[0]):
        raise ValueError(f"output Gram shape {K.shape} does not match {samples.shape[0]} samples")
    return DrCvarBlock(step_i=int(i), samples=samples, output_gram=K, d_safe=float(d_safe),
                       epsilon=float(cfg.epsilon), alpha=float(cfg.alpha), sigma2=float(sigma2))


def block_from_model(model: CkmeModel, cfg: AmbiguityConfig, d_safe: float) -> DrCvarBlock:
    return build_block(model.lookahead, model.outputs, model.output_gram, cfg, d_safe)


def empirical_cvar_oracle(losses, weights, alpha: float) -> float:
    """``min_tau tau + (1/alpha) sum_j w_j (loss_j - tau)_+`` by scanning ``tau`` over the losses.

    The objective is piecewise linear and convex in ``tau`` with kinks at the
    loss values, so the minimum is attained at one of them.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    losses = np.asarray(losses, dtype=float)
    weights = np.asarray(weights, dtype=float)
    best = math.inf
    for tau in losses:
        val = tau + np.sum(weights * np.maximum(losses - tau, 0.0)) / alpha
        best = min(best, float(val))
    return best
