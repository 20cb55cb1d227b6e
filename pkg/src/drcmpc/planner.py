"""Receding-horizon planner in three modes: NMPC, CMPC and DRCMPC.

Decision vector layout (``N`` steps, ``O`` obstacles)::

    [u(0..N-1) | x(1..N) | DR auxiliaries per obstacle (DRCMPC) | safety slacks per obstacle]

Dynamics enter as the two-sided row ``0 <= x(i+1) - f_d(x(i), u(i)) <= 0``,
the paired-inequality form handed to the solver as one range block. State
and input boxes are variable bounds. Safety rows are softened by nonnegative
slacks carrying a quadratic penalty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .drcvar import AmbiguityConfig, DrCvarBlock, block_from_model
from .dynamics import (AgentState, ControlInput, DynamicsConfig, euler_step,
                       euler_step_batch, step_jacobians_batch)
from .nlpsolve import AUGLAG, NUMERICAL_FAILURE, OPTIMAL, SLSQP, NlpProblem, NlpResult, SolverOptions, solve
from .predict import ConstantVelocityPredictor, ContextualPredictor, build_context, context_jacobian
from .rkhs import ckme_predict, ckme_weights_jacobian

NMPC = "nmpc"
CMPC = "cmpc"
DRCMPC = "drcmpc"
MODES = (NMPC, CMPC, DRCMPC)

INF = math.inf


class PlannerConfigError(ValueError):
    pass


class PlannerNumericalFailure(RuntimeError):
    pass


def _diag(*vals) -> np.ndarray:
    return np.diag(np.asarray(vals, dtype=float))


@dataclass
class MpcConfig:
    N: int = 8
    Ts: float = 0.1
    wheelbase_L: float = 2.5
    # heading only; callers that track the target speed set the last entry
    Q_terminal: np.ndarray = field(default_factory=lambda: _diag(0, 0, 0.1, 0))
    Q_stage: np.ndarray = field(default_factory=lambda: np.zeros((4, 4)))
    R1: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    R2: np.ndarray = field(default_factory=lambda: _diag(0, 1e-4))
    u_min: np.ndarray = field(default_factory=lambda: np.array([-4.0, -0.5]))
    u_max: np.ndarray = field(default_factory=lambda: np.array([4.0, 0.5]))
    x_min: np.ndarray = field(default_factory=lambda: np.array([-INF, 0.0, 0.0, 0.0]))
    x_max: np.ndarray = field(default_factory=lambda: np.array([INF, 2.0, 2 * math.pi, 15.0]))
    d_safe: float = 0.5
    x_ref: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.5, 0.0, 15.0]))
    mode: str = NMPC
    ambiguity: AmbiguityConfig = field(default_factory=AmbiguityConfig)
    slack_weight: float = 1e4
    # added to the steering of a straight initial guess to break the left/right tie
    steer_nudge: float = 0.02
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(
        backend=SLSQP, opt_tol=1e-5, slsqp_max_iter=100))
    # re-solve with the augmented Lagrangian when SLSQP stalls
    fallback: bool = True

    def __post_init__(self):
        for name in ("Q_terminal", "Q_stage", "R1", "R2"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        for name in ("u_min", "u_max", "x_min", "x_max", "x_ref"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self.mode = self.mode.lower()
        if self.mode not in MODES:
            raise PlannerConfigError(f"unknown mode {self.mode!r}")
        if self.N < 1:
            raise PlannerConfigError("horizon N must be >= 1")
        if np.any(self.u_min > self.u_max) or np.any(self.x_min > self.x_max):
            raise PlannerConfigError("inconsistent bounds")
        if not self.slack_weight > 0:
            raise PlannerConfigError("slack_weight must be positive")
        shapes = {"Q_terminal": (4, 4), "Q_stage": (4, 4), "R1": (2, 2), "R2": (2, 2),
                  "u_min": (2,), "u_max": (2,), "x_min": (4,), "x_max": (4,), "x_ref": (4,)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise PlannerConfigError(f"{name} must have shape {shape}")
        for name in ("Q_terminal", "Q_stage", "R1", "R2"):
            W = getattr(self, name)
            if np.min(np.linalg.eigvalsh(0.5 * (W + W.T))) < -1e-12:
                raise PlannerConfigError(f"{name} is not positive semidefinite")

    @property
    def dynamics(self) -> DynamicsConfig:
        return DynamicsConfig(wheelbase_L=self.wheelbase_L, Ts=self.Ts)

    def with_mode(self, mode: str, epsilon: float | None = None) -> "MpcConfig":
        amb = self.ambiguity if epsilon is None else replace(self.ambiguity, epsilon=epsilon)
        return replace(self, mode=mode, ambiguity=amb)


@dataclass
class PlanResult:
    u0: ControlInput
    predicted_ego: np.ndarray
    predicted_obstacles: list
    solver: NlpResult
    slack_used: float
    next_warm_start: "WarmStart | None" = None


def _as_state_array(x) -> np.ndarray:
    return x.as_array() if isinstance(x, AgentState) else np.asarray(x, dtype=float)


class _Layout:
    def __init__(self, N: int, n_obs: int, block_sizes: Sequence[int]):
        self.N = N
        self.u = slice(0, 2 * N)
        self.x = slice(2 * N, 6 * N)
        pos = 6 * N
        self.aux = []
        for ns in block_sizes:
            self.aux.append(slice(pos, pos + N * (ns + 2)) if ns else None)
            pos += N * (ns + 2) if ns else 0
        self.slack = []
        for _ in range(n_obs):
            self.slack.append(slice(pos, pos + N))
            pos += N
        self.n = pos

    def x_col(self, i: int, k: int) -> int:
        """Column of component ``k`` of state ``x(i)``, ``i`` in ``1..N``."""
        return 2 * self.N + 4 * (i - 1) + k


class PlanningProblem:
    """Finite-horizon collision-avoidance NLP assembled for one planning instant.

    ``predictors`` holds one entry per obstacle: a
    :class:`ConstantVelocityPredictor` in NMPC mode, a
    :class:`ContextualPredictor` otherwise.
    """

    def __init__(self, x0, u_prev, obstacles: Sequence, predictors: Sequence, cfg: MpcConfig):
        self.cfg = cfg
        self.dyn = cfg.dynamics
        self.x0 = _as_state_array(x0)
        if not np.all(np.isfinite(self.x0)):
            raise PlannerConfigError("initial state must be finite")
        self.u_prev = u_prev.as_array() if isinstance(u_prev, ControlInput) else np.asarray(u_prev, float)
        self.obstacles = [_as_state_array(o) for o in obstacles]
        self.predictors = list(predictors)
        if len(self.predictors) != len(self.obstacles):
            raise PlannerConfigError(
                f"{len(self.obstacles)} obstacles but {len(self.predictors)} predictors")
        N = cfg.N
        self.blocks: list[list[DrCvarBlock] | None] = []
        self.cv_positions: list[np.ndarray | None] = []
        for o, pred in enumerate(self.predictors):
            if cfg.mode == NMPC:
                if not isinstance(pred, ConstantVelocityPredictor):
                    raise PlannerConfigError("NMPC needs constant-velocity predictors")
                self.cv_positions.append(pred.predict_horizon(N))
                self.blocks.append(None)
                continue
            if not isinstance(pred, ContextualPredictor) or pred.horizon < N:
                raise PlannerConfigError(f"{cfg.mode} needs fitted CKME models for lookahead 1..{N}")
            self.cv_positions.append(None)
            if cfg.mode == DRCMPC:
                self.blocks.append([block_from_model(pred.model(i), cfg.ambiguity, cfg.d_safe)
                                    for i in range(1, N + 1)])
            else:
                self.blocks.append(None)
        sizes = [b[0].n_samples if b else 0 for b in self.blocks]
        self.layout = _Layout(N, len(self.obstacles), sizes)
        self.rows_per_step = [b[0].n_rows if b else 1 for b in self.blocks]
        self._build_objective()
        self._build_bounds()
        self._build_dynamics_pattern()

    # -- objective -------------------------------------------------------
    def _build_objective(self):
        cfg, L, N = self.cfg, self.layout, self.cfg.N
        H = np.zeros((L.n, L.n))
        c = np.zeros(L.n)
        const = 0.0
        for i in range(N):
            Q = cfg.Q_terminal if i == N - 1 else cfg.Q_stage
            xs = slice(L.x.start + 4 * i, L.x.start + 4 * i + 4)
            H[xs, xs] += 2 * Q
            c[xs] -= 2 * Q @ cfg.x_ref
            const += cfg.x_ref @ Q @ cfg.x_ref
            us = slice(2 * i, 2 * i + 2)
            H[us, us] += 2 * cfg.R1 + 2 * cfg.R2
            if i == 0:
                c[us] -= 2 * cfg.R2 @ self.u_prev
                const += self.u_prev @ cfg.R2 @ self.u_prev
            else:
                up = slice(2 * i - 2, 2 * i)
                H[up, up] += 2 * cfg.R2
                H[us, up] -= 2 * cfg.R2
                H[up, us] -= 2 * cfg.R2
        for s in L.slack:
            idx = np.arange(s.start, s.stop)
            H[idx, idx] += 2 * cfg.slack_weight
        self.H, self.c, self.const = H, c, const

    def objective(self, z):
        Hz = self.H @ z
        return 0.5 * z @ Hz + self.c @ z + self.const, Hz + self.c

    # -- bounds ----------------------------------------------------------
    def _build_bounds(self):
        cfg, L, N = self.cfg, self.layout, self.cfg.N
        lo = np.full(L.n, -INF)
        hi = np.full(L.n, INF)
        lo[L.u] = np.tile(cfg.u_min, N)
        hi[L.u] = np.tile(cfg.u_max, N)
        lo[L.x] = np.tile(cfg.x_min, N)
        hi[L.x] = np.tile(cfg.x_max, N)
        for s in L.slack:
            lo[s] = 0.0
        self.lower, self.upper = lo, hi

    # -- helpers ---------------------------------------------------------
    def unpack(self, z):
        L, N = self.layout, self.cfg.N
        U = z[L.u].reshape(N, 2)
        X = z[L.x].reshape(N, 4)
        return U, X

    def ego_positions(self, z) -> np.ndarray:
        """Positions ``p(0..N)``."""
        _, X = self.unpack(z)
        return np.vstack([self.x0[None, :2], X[:, :2]])

    # -- dynamics rows ---------------------------------------------------
    def _build_dynamics_pattern(self):
        L, N = self.layout, self.cfg.N
        J = np.zeros((4 * N, L.n))
        r = np.arange(4 * N)
        J[r, L.x.start + r] = 1.0
        # fancy indices of the -A (previous state) and -B (input) blocks
        i, a, b = np.meshgrid(np.arange(1, N), np.arange(4), np.arange(4), indexing="ij")
        self._dyn_a_idx = (4 * i + a, L.x.start + 4 * (i - 1) + b)
        i, a, b = np.meshgrid(np.arange(N), np.arange(4), np.arange(2), indexing="ij")
        self._dyn_b_idx = (4 * i + a, 2 * i + b)
        self._dyn_template = J

    def dynamics_rows(self, z):
        """Dynamics gaps ``x(i+1) - f_d(x(i), u(i))`` for ``i = 0..N-1`` and their Jacobian."""
        U, X = self.unpack(z)
        Xprev = np.vstack([self.x0[None, :], X[:-1]])
        gap = (X - euler_step_batch(Xprev, U, self.dyn)).ravel()
        A, B = step_jacobians_batch(Xprev, U, self.dyn)
        J = self._dyn_template.copy()
        J[self._dyn_a_idx] = -A[1:]
        J[self._dyn_b_idx] = -B
        return gap, J

    # -- safety rows -----------------------------------------------------
    def safety_rows(self, o: int, z):
        """Rows for obstacle ``o`` over steps ``1..N`` (``rows_per_step[o]`` each)."""
        cfg, L, N = self.cfg, self.layout, self.cfg.N
        P = self.ego_positions(z)
        r = self.rows_per_step[o]
        vals = np.zeros(N * r)
        J = np.zeros((N * r, L.n))
        slack = L.slack[o]
        d2 = cfg.d_safe**2
        for i in range(1, N + 1):
            row = (i - 1) * r
            pcol = L.x_col(i, 0)
            s_col = slack.start + i - 1
            if cfg.mode == NMPC:
                diff = P[i] - self.cv_positions[o][i - 1]
                vals[row] = d2 - diff @ diff - z[s_col]
                J[row, pcol:pcol + 2] = -2 * diff
                J[row, s_col] = -1.0
                continue
            model = self.predictors[o].model(i)
            zc = build_context(P[:i], self.obstacles[o][:2], i)
            beta, dbeta_dz = ckme_weights_jacobian(model, zc)
            # drop the columns of the fixed current position p(0)
            dbeta_dp = (dbeta_dz @ context_jacobian(i))[:, 2:]
            if cfg.mode == CMPC:
                pred = beta @ model.outputs
                diff = P[i] - pred
                vals[row] = d2 - diff @ diff - z[s_col]
                J[row, pcol:pcol + 2] = -2 * diff
                dpred = model.outputs.T @ dbeta_dp
                self._scatter_positions(J, row, 2 * diff @ dpred, i)
                J[row, s_col] = -1.0
                continue
            block = self.blocks[o][i - 1]
            aux_cols = slice(L.aux[o].start + (i - 1) * block.n_aux,
                             L.aux[o].start + i * block.n_aux)
            v, (d_p, d_beta, d_aux) = block.evaluate(P[i], beta, z[aux_cols])
            rows = slice(row, row + r)
            vals[rows] = v
            vals[row] -= z[s_col]
            J[rows, pcol:pcol + 2] = d_p
            J[rows, aux_cols] = d_aux
            J[row, s_col] = -1.0
            self._scatter_positions(J, row, d_beta[0] @ dbeta_dp, i)
        return vals, J

    def _scatter_positions(self, J, row, grad, i):
        """Add ``grad`` (over ``p(1..i-1)``, flattened) into the position columns of ``row``."""
        for t in range(1, i):
            col = self.layout.x_col(t, 0)
            J[row, col:col + 2] += grad[2 * (t - 1):2 * t]

    # -- assembly --------------------------------------------------------
    def to_nlp(self, initial_point=None) -> NlpProblem:
        cons = [(lambda z, o=o: self.safety_rows(o, z)) for o in range(len(self.obstacles))]
        zero = np.zeros(4 * self.cfg.N)
        z0 = self.default_initial_point() if initial_point is None else initial_point
        z0 = np.clip(z0, self.lower, self.upper)
        return NlpProblem(n_vars=self.layout.n, objective=self.objective, inequalities=cons,
                          ranges=[(self.dynamics_rows, zero, zero)],
                          lower=self.lower, upper=self.upper, initial_point=z0)

    def default_initial_point(self) -> np.ndarray:
        """Zero inputs (plus the steering nudge) rolled out from ``x0``."""
        return self.rollout_guess(np.zeros(self.layout.n))

    def rollout_guess(self, z) -> np.ndarray:
        """Re-roll the states of ``z`` from ``x0``.

        With obstacles present, an all-zero steering guess is nudged so the
        solver does not sit on the symmetric stationary point.

        Keeps auxiliaries and slacks. The result satisfies the dynamics rows
        exactly, up to clipping at the state box.
        """
        cfg, L, N = self.cfg, self.layout, self.cfg.N
        z = np.array(z, dtype=float)
        U = z[L.u].reshape(N, 2)
        if self.obstacles and np.max(np.abs(U[:, 1])) < abs(cfg.steer_nudge):
            U[:, 1] += cfg.steer_nudge
        U = np.clip(U, cfg.u_min, cfg.u_max)
        X = []
        x = self.x0
        for i in range(N):
            x = np.clip(euler_step(x, U[i], self.dyn), cfg.x_min, cfg.x_max)
            X.append(x)
        z[L.u] = U.ravel()
        z[L.x] = np.concatenate(X)
        return z

    def random_point(self, rng: np.random.Generator) -> np.ndarray:
        """Random inputs rolled out from ``x0``, random auxiliaries and positive slacks.

        States are kept strictly inside their box so central differences around
        the point stay valid.
        """
        cfg, L, N = self.cfg, self.layout, self.cfg.N
        z = np.zeros(L.n)
        z[L.u] = rng.uniform(0.8 * cfg.u_min, 0.8 * cfg.u_max, size=(N, 2)).ravel()
        for s in L.aux:
            if s is not None:
                z[s] = rng.normal(0.0, 0.5, size=s.stop - s.start)
        for s in L.slack:
            z[s] = rng.uniform(0.1, 1.0, size=s.stop - s.start)
        z = self.rollout_guess(z)
        return np.clip(z, self.lower + 1e-3, self.upper - 1e-3)

    def predicted_obstacles(self, z) -> list:
        P = self.ego_positions(z)
        out = []
        for o in range(len(self.obstacles)):
            if self.cfg.mode == NMPC:
                out.append(self.cv_positions[o].copy())
            else:
                pred = self.predictors[o]
                out.append(np.array([
                    ckme_predict(pred.model(i), build_context(P[:i], self.obstacles[o][:2], i))
                    for i in range(1, self.cfg.N + 1)]))
        return out

    def shift(self, z, multipliers):
        """Shift a solution one step forward, repeating the last step."""
        L, N = self.layout, self.cfg.N
        z = z.copy()
        U, X = self.unpack(z)
        u_last = U[-1]
        x_last = euler_step(X[-1], u_last, self.dyn)
        z[L.u] = np.concatenate([U[1:].ravel(), u_last])
        z[L.x] = np.concatenate([X[1:].ravel(), x_last])
        for s in list(L.aux) + list(L.slack):
            if s is None:
                continue
            blk = z[s].reshape(N, -1)
            z[s] = np.vstack([blk[1:], blk[-1:]]).ravel()
        mu = None
        if multipliers is not None:
            parts = []
            pos = 0
            for width in self.rows_per_step + [4]:
                blk = multipliers[pos:pos + N * width].reshape(N, width)
                parts.append(np.vstack([blk[1:], blk[-1:]]).ravel())
                pos += N * width
            mu = np.concatenate(parts)
        return np.clip(z, self.lower, self.upper), mu


def build_problem(x0, u_prev, obstacles, predictors, cfg: MpcConfig) -> PlanningProblem:
    return PlanningProblem(x0, u_prev, obstacles, predictors, cfg)


def make_predictors(obstacles: Sequence, cfg: MpcConfig, contextual: Sequence | None = None):
    """Predictors matching ``cfg.mode``: constant velocity for NMPC, CKME otherwise."""
    if cfg.mode == NMPC:
        return [ConstantVelocityPredictor(
            o if isinstance(o, AgentState) else AgentState.from_array(o), cfg.Ts) for o in obstacles]
    if contextual is None or len(contextual) != len(obstacles):
        raise PlannerConfigError(f"{cfg.mode} needs one contextual predictor per obstacle")
    return list(contextual)


@dataclass
class WarmStart:
    z: np.ndarray
    multipliers: np.ndarray | None
    layout_n: int


class Planner:
    """Stateful receding-horizon wrapper that carries the warm start between calls."""

    def __init__(self, cfg: MpcConfig, contextual: Sequence[ContextualPredictor] | None = None):
        self.cfg = cfg
        self.contextual = contextual
        self.warm: WarmStart | None = None

    def reset(self):
        self.warm = None

    def plan(self, x0, u_prev, obstacles: Sequence) -> PlanResult:
        predictors = make_predictors(obstacles, self.cfg, self.contextual)
        result = plan_step(x0, u_prev, obstacles, predictors, self.cfg, self.warm)
        self.warm = result.next_warm_start
        return result


def _rank(res: NlpResult, opts: SolverOptions) -> tuple:
    """Sort key for competing solves: feasibility first, then objective."""
    return (max(res.max_constraint_violation, opts.feas_tol), res.objective_value)


def plan_step(x0, u_prev, obstacles, predictors, cfg: MpcConfig,
              warm_start: WarmStart | None = None) -> PlanResult:
    """Solve one receding-horizon problem and return the clamped first input.

    ``warm_start`` is the shifted previous solution (see
    :attr:`PlanResult.next_warm_start`); it is ignored if the layout changed.
    """
    prob = build_problem(x0, u_prev, obstacles, predictors, cfg)
    z0, mu0 = None, None
    if warm_start is not None and warm_start.layout_n == prob.layout.n:
        z0, mu0 = prob.rollout_guess(warm_start.z), warm_start.multipliers
    nlp = prob.to_nlp(z0)
    opts = replace(cfg.solver, initial_multipliers=mu0)
    res = solve(nlp, opts)
    if cfg.fallback and opts.backend == SLSQP and res.status not in (OPTIMAL, NUMERICAL_FAILURE):
        alt = solve(nlp, replace(opts, backend=AUGLAG))
        if alt.status != NUMERICAL_FAILURE and _rank(alt, opts) < _rank(res, opts):
            res = alt
    if res.status == NUMERICAL_FAILURE:
        raise PlannerNumericalFailure("solver hit a non-finite value")
    U, X = prob.unpack(res.x_star)
    u0 = np.clip(U[0], cfg.u_min, cfg.u_max)
    slack = float(sum(np.sum(res.x_star[s]) for s in prob.layout.slack))
    z_next, mu_next = prob.shift(res.x_star, res.multipliers)
    return PlanResult(u0=ControlInput.from_array(u0), predicted_ego=X.copy(),
                      predicted_obstacles=prob.predicted_obstacles(res.x_star),
                      solver=res, slack_used=slack,
                      next_warm_start=WarmStart(z_next, mu_next, prob.layout.n))
