"""Smooth inequality-constrained NLP solver and gradient checker.

Problems have the form::

    min f(x)  s.t.  g(x) <= 0,  lo <= c(x) <= hi,  lower <= x <= upper

and are solved with a Powell-Hestenes-Rockafellar augmented Lagrangian whose
bound-constrained subproblems go to L-BFGS-B. A second backend hands the same
problem to scipy's SLSQP, which is much faster on the small, badly scaled
planning problems. Both report status through the same KKT measures.
Everything is deterministic.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence, TextIO

import numpy as np
from scipy.optimize import lsq_linear, minimize

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"
NUMERICAL_FAILURE = "numerical_failure"

AUGLAG = "auglag"
SLSQP = "slsqp"
BACKENDS = (AUGLAG, SLSQP)


class NumericalFailure(RuntimeError):
    """A callable returned NaN or Inf."""


@dataclass
class NlpProblem:
    """Container for a smooth NLP.

    ``objective(x)`` returns ``(value, gradient)``. Each entry of
    ``inequalities`` returns ``(values, jacobian)``; a scalar constraint may
    return a float and a gradient of shape ``(n,)``, a block returns shapes
    ``(m,)`` and ``(m, n)``. Feasible means every value is ``<= 0``.

    ``ranges`` holds two-sided blocks ``(callable, lo, hi)`` meaning
    ``lo <= c(x) <= hi``. A pair of opposite inequalities ``c <= 0`` and
    ``-c <= 0`` is best passed as one range with ``lo = hi = 0``, which keeps
    the penalty smooth at ``c = 0``.
    """

    n_vars: int
    objective: Callable
    inequalities: Sequence[Callable] = ()
    ranges: Sequence[tuple] = ()
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    initial_point: np.ndarray | None = None
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.n_vars
        self.lower = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, float).copy()
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, float).copy()
        if self.initial_point is None:
            self.initial_point = np.clip(np.zeros(n), self.lower, self.upper)
        self.initial_point = np.asarray(self.initial_point, dtype=float).copy()
        if self.lower.shape != (n,) or self.upper.shape != (n,) or self.initial_point.shape != (n,):
            raise ValueError("bounds and initial point must have length n_vars")
        if np.any(self.lower > self.upper):
            raise ValueError("inconsistent bounds: lower > upper")
        self.inequalities = list(self.inequalities)
        self.ranges = [(con, np.atleast_1d(np.asarray(lo, dtype=float)),
                        np.atleast_1d(np.asarray(hi, dtype=float))) for con, lo, hi in self.ranges]
        for _, lo, hi in self.ranges:
            if np.any(lo > hi):
                raise ValueError("inconsistent constraint range: lo > hi")
        self._row_bounds = None

    def _eval(self, con, x):
        v, J = con(x)
        v = np.atleast_1d(np.asarray(v, dtype=float))
        return v, np.asarray(J, dtype=float).reshape(v.shape[0], self.n_vars)

    def constraints(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Stack all constraint values and Jacobians, inequalities first."""
        parts = [self._eval(con, x) for con in self.inequalities]
        parts += [self._eval(con, x) for con, _, _ in self.ranges]
        if not parts:
            return np.zeros(0), np.zeros((0, self.n_vars))
        return np.concatenate([v for v, _ in parts]), np.vstack([J for _, J in parts])

    def row_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-row ``(lo, hi)`` matching the order of :meth:`constraints`."""
        if self._row_bounds is None:
            x0 = self.initial_point
            m_ineq = sum(self._eval(con, x0)[0].shape[0] for con in self.inequalities)
            lo, hi = [np.full(m_ineq, -np.inf)], [np.zeros(m_ineq)]
            for con, l, h in self.ranges:
                m = self._eval(con, x0)[0].shape[0]
                lo.append(np.broadcast_to(l, (m,)))
                hi.append(np.broadcast_to(h, (m,)))
            self._row_bounds = (np.concatenate(lo).astype(float), np.concatenate(hi).astype(float))
        return self._row_bounds

    @property
    def n_constraints(self) -> int:
        return self.constraints(self.initial_point)[0].shape[0]


@dataclass
class SolverOptions:
    feas_tol: float = 1e-6
    opt_tol: float = 1e-6
    max_outer: int = 50
    max_inner: int = 200
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    penalty_max: float = 1e12
    # violation must shrink by this factor per outer iteration or the penalty grows
    violation_decrease: float = 0.25
    initial_multipliers: np.ndarray | None = None
    log: TextIO | None = None
    backend: str = AUGLAG
    # iteration cap of the SLSQP backend (it has no outer/inner split)
    slsqp_max_iter: int = 500

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown solver backend {self.backend!r}, expected one of {BACKENDS}")


@dataclass
class NlpResult:
    x_star: np.ndarray
    status: str
    objective_value: float
    max_constraint_violation: float
    kkt_residual: float
    iterations: int
    solve_time: float
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    penalty: float = 0.0
    history: list = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.status == OPTIMAL


def _finite_or_raise(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalFailure("non-finite value returned by problem callable")


def _projected_gradient(x, grad, lower, upper) -> float:
    if x.size == 0:
        return 0.0
    step = np.clip(x - grad, lower, upper) - x
    return float(np.max(np.abs(step)))


def kkt_measures(problem: NlpProblem, x: np.ndarray, multipliers: np.ndarray):
    """Return ``(violation, kkt_residual)`` for the pair ``(x, multipliers)``.

    The residual is the larger of the projected Lagrangian gradient and the
    complementarity measure ``max_j |min(mu_j, -g_j)|``. Multipliers of
    two-sided rows are signed: positive on the upper side, negative on the
    lower side.
    """
    _, gf = problem.objective(x)
    c, J = problem.constraints(x)
    lo, hi = problem.row_bounds()
    viol = _violation(c, lo, hi)
    grad_l = np.asarray(gf, dtype=float) + J.T @ multipliers
    stat = _projected_gradient(x, grad_l, problem.lower, problem.upper)
    with np.errstate(invalid="ignore"):
        comp = np.where(multipliers > 0, np.minimum(multipliers, hi - c),
                        np.where(multipliers < 0, np.minimum(-multipliers, c - lo), 0.0))
    comp = float(np.max(np.abs(comp), initial=0.0))
    return viol, max(stat, comp)


def _violation(c, lo, hi) -> float:
    return float(max(np.max(c - hi, initial=0.0), np.max(lo - c, initial=0.0), 0.0))


def _multiplier_update(c, lam, rho, lo, hi) -> np.ndarray:
    """PHR update ``rho * (w - clip(w, lo, hi))`` with ``w = c + lam / rho``."""
    w = c + lam / rho
    return rho * (w - np.clip(w, lo, hi))


def solve(problem: NlpProblem, opts: SolverOptions | None = None) -> NlpResult:
    """Solve ``problem`` with the backend chosen in ``opts`` (augmented Lagrangian by default)."""
    opts = opts or SolverOptions()
    if opts.backend == SLSQP:
        return _solve_slsqp(problem, opts)
    start = time.perf_counter()
    x = np.clip(problem.initial_point, problem.lower, problem.upper)
    lo_c, hi_c = problem.row_bounds()
    m = lo_c.shape[0]
    mu = np.zeros(m) if opts.initial_multipliers is None else np.asarray(
        opts.initial_multipliers, dtype=float).copy()
    if mu.shape == (m,):
        mu = np.where(np.isinf(lo_c), np.maximum(mu, 0.0), mu)
        mu = np.where(np.isinf(hi_c), np.minimum(mu, 0.0), mu)
    if mu.shape != (m,):
        raise ValueError(f"initial multipliers have shape {mu.shape}, expected ({m},)")
    rho = opts.penalty_init
    history = []

    def augmented(xv):
        f, gf = problem.objective(xv)
        g, J = problem.constraints(xv)
        _finite_or_raise(f, gf, g, J)
        shifted = _multiplier_update(g, mu, rho, lo_c, hi_c)
        val = f + (shifted @ shifted - mu @ mu) / (2.0 * rho)
        return float(val), np.asarray(gf, dtype=float) + J.T @ shifted

    def result(xv, mult, status, it):
        f, _ = problem.objective(xv)
        viol, kkt = kkt_measures(problem, xv, mult)
        return NlpResult(x_star=xv, status=status, objective_value=float(f),
                         max_constraint_violation=viol, kkt_residual=kkt, iterations=it,
                         solve_time=time.perf_counter() - start, multipliers=mult,
                         penalty=rho, history=history)

    try:
        viol, kkt = kkt_measures(problem, x, mu)
        _finite_or_raise(viol, kkt)
    except NumericalFailure:
        return result(x, mu, NUMERICAL_FAILURE, 0)
    if viol <= opts.feas_tol and kkt <= opts.opt_tol:
        return result(x, mu, OPTIMAL, 0)

    best = (x.copy(), mu.copy(), viol, kkt)
    prev_viol = math.inf
    hdiag = _objective_curvature(problem, x)
    # inexact inner solves: tolerance tracks the current KKT residual
    inner_tol = max(min(1e-2, 0.1 * kkt), 0.1 * opts.opt_tol)
    for it in range(1, opts.max_outer + 1):
        g, J = problem.constraints(x)
        w = g + mu / rho
        scale = _inner_scaling(hdiag, J, (w >= hi_c) | (w <= lo_c), rho)
        lo, hi = problem.lower / scale, problem.upper / scale

        def scaled(y):
            val, grad = augmented(y * scale)
            return val, grad * scale

        try:
            inner = minimize(scaled, x / scale, jac=True, method="L-BFGS-B",
                             bounds=list(zip(lo, hi)),
                             options={"maxiter": opts.max_inner,
                                      "gtol": inner_tol * float(np.min(scale)),
                                      "ftol": 1e-300, "maxcor": 20})
        except NumericalFailure:
            return result(best[0], best[1], NUMERICAL_FAILURE, it)
        inner.x = inner.x * scale
        x = np.clip(inner.x, problem.lower, problem.upper)
        g, _ = problem.constraints(x)
        if not np.all(np.isfinite(g)):
            return result(best[0], best[1], NUMERICAL_FAILURE, it)
        mu = _multiplier_update(g, mu, rho, lo_c, hi_c)
        viol, kkt = kkt_measures(problem, x, mu)
        f_val = problem.objective(x)[0]
        history.append((it, float(f_val), viol, kkt, rho))
        if opts.log is not None:
            opts.log.write(f"{it} {f_val:.10e} {viol:.3e} {kkt:.3e}\n")
        if (max(viol, opts.feas_tol), kkt) <= (max(best[2], opts.feas_tol), best[3]):
            best = (x.copy(), mu.copy(), viol, kkt)
        if viol <= opts.feas_tol and kkt <= opts.opt_tol:
            return result(x, mu, OPTIMAL, it)
        inner_tol = max(min(inner_tol, 0.1 * kkt), 0.1 * opts.opt_tol)
        if viol > opts.violation_decrease * prev_viol and viol > opts.feas_tol:
            rho = min(rho * opts.penalty_growth, opts.penalty_max)
        prev_viol = viol

    x_b, mu_b, viol_b, _ = best
    res = result(x_b, mu_b, MAX_ITER, opts.max_outer)
    if viol_b > 1e3 * opts.feas_tol and rho >= opts.penalty_max:
        res.status = INFEASIBLE
    return res


def estimate_multipliers(problem: NlpProblem, x: np.ndarray, active_tol: float = 1e-6) -> np.ndarray:
    """Sign-constrained least-squares multipliers of the rows active at ``x``.

    Stationarity is fitted only on variables strictly inside their bounds, so
    bound multipliers never need to be formed.
    """
    _, gf = problem.objective(x)
    c, J = problem.constraints(x)
    lo, hi = problem.row_bounds()
    upper_act = c >= hi - active_tol
    lower_act = (c <= lo + active_tol) & ~upper_act
    rows = np.flatnonzero(upper_act | lower_act)
    mult = np.zeros(c.shape[0])
    if rows.size == 0:
        return mult
    free = (x > problem.lower + active_tol) & (x < problem.upper - active_tol)
    A = J[np.ix_(rows, np.flatnonzero(free))].T
    b = -np.asarray(gf, dtype=float)[free]
    lb = np.where(upper_act[rows] & ~(np.isfinite(lo[rows]) & (lo[rows] == hi[rows])), 0.0, -np.inf)
    ub = np.where(lower_act[rows] & ~(np.isfinite(lo[rows]) & (lo[rows] == hi[rows])), 0.0, np.inf)
    if A.shape[0] == 0:
        return mult
    sol = lsq_linear(A, b, bounds=(lb, ub), method="bvls", tol=1e-14)
    mult[rows] = sol.x
    return mult


class _Converged(Exception):
    def __init__(self, x):
        super().__init__()
        self.x = x


def _solve_slsqp(problem: NlpProblem, opts: SolverOptions) -> NlpResult:
    start = time.perf_counter()
    lo_c, hi_c = problem.row_bounds()
    eq = np.isfinite(lo_c) & (lo_c == hi_c)
    up = np.isfinite(hi_c) & ~eq
    dn = np.isfinite(lo_c) & ~eq
    cache: dict = {}
    x0 = np.clip(problem.initial_point, problem.lower, problem.upper)
    # solve in y = x / scale so the quasi-Newton start is roughly the identity
    _, J0 = problem.constraints(x0)
    d = _objective_curvature(problem, x0) + np.sum(J0 ** 2, axis=0)
    d = np.maximum(d, max(1e-6 * float(np.max(d, initial=0.0)), 1e-12))
    scale = 1.0 / np.sqrt(d)

    def cons(y):
        key = y.tobytes()
        if cache.get("key") != key:
            c, J = problem.constraints(y * scale)
            _finite_or_raise(c, J)
            cache.update(key=key, c=c, J=J * scale)
        return cache["c"], cache["J"]

    def obj(y):
        f, g = problem.objective(y * scale)
        _finite_or_raise(f, g)
        return float(f), np.asarray(g, dtype=float) * scale

    def ineq(y):
        c, _ = cons(y)
        return np.concatenate([hi_c[up] - c[up], c[dn] - lo_c[dn]])

    def ineq_jac(y):
        _, J = cons(y)
        return np.vstack([-J[up], J[dn]])

    constraints = []
    if np.any(up) or np.any(dn):
        constraints.append({"type": "ineq", "fun": ineq, "jac": ineq_jac})
    if np.any(eq):
        constraints.append({"type": "eq", "fun": lambda y: cons(y)[0][eq] - lo_c[eq],
                            "jac": lambda y: cons(y)[1][eq]})
    history = []

    def record(yk):
        xk = np.clip(yk * scale, problem.lower, problem.upper)
        f = problem.objective(xk)[0]
        c, _ = cons(yk)
        viol = _violation(c, lo_c, hi_c)
        kkt = math.nan
        if viol <= opts.feas_tol:
            _, kkt = kkt_measures(problem, xk, estimate_multipliers(problem, xk, active_tol))
        history.append((len(history) + 1, float(f), viol, kkt, 0.0))
        if opts.log is not None:
            opts.log.write(f"{len(history)} {f:.10e} {viol:.3e} {kkt:.3e}\n")
        # SLSQP's own test is on objective decrease, so stop on the KKT test here
        if kkt <= opts.opt_tol:
            raise _Converged(xk)

    bounds = list(zip(problem.lower / scale, problem.upper / scale))
    active_tol = max(opts.feas_tol, 1e-8)
    status = OPTIMAL
    slsqp_status = 0
    try:
        try:
            with warnings.catch_warnings():
                # SLSQP clips trial points to the bounds and warns about it
                warnings.filterwarnings("ignore", "Values in x were outside bounds",
                                        RuntimeWarning)
                res = minimize(obj, x0 / scale, jac=True, method="SLSQP", bounds=bounds,
                               constraints=constraints, callback=record,
                               options={"maxiter": opts.slsqp_max_iter, "ftol": 1e-14})
            x, slsqp_status = res.x * scale, res.status
        except _Converged as done:
            x = done.x
        x = np.clip(x, problem.lower, problem.upper)
        mult = estimate_multipliers(problem, x, active_tol)
        viol, kkt = kkt_measures(problem, x, mult)
        _finite_or_raise(viol, kkt)
    except NumericalFailure:
        x, mult, viol, kkt = x0, np.zeros(lo_c.shape[0]), math.inf, math.inf
        status = NUMERICAL_FAILURE
    if status == OPTIMAL and not (viol <= opts.feas_tol and kkt <= opts.opt_tol):
        status = INFEASIBLE if (slsqp_status == 4 and viol > 1e3 * opts.feas_tol) else MAX_ITER
    f_val = problem.objective(x)[0] if status != NUMERICAL_FAILURE else math.nan
    return NlpResult(x_star=x, status=status, objective_value=float(f_val),
                     max_constraint_violation=viol, kkt_residual=kkt, iterations=len(history),
                     solve_time=time.perf_counter() - start, multipliers=mult, penalty=0.0,
                     history=history)


def _objective_curvature(problem: NlpProblem, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Diagonal of the objective Hessian by forward differences of the gradient."""
    _, g0 = problem.objective(x)
    g0 = np.asarray(g0, dtype=float)
    diag = np.empty(problem.n_vars)
    for k in range(problem.n_vars):
        xp = x.copy()
        xp[k] += h
        diag[k] = (np.asarray(problem.objective(xp)[1], dtype=float)[k] - g0[k]) / h
    return np.abs(diag)


def _inner_scaling(hdiag, J, active, rho) -> np.ndarray:
    """Variable scales ``1/sqrt(curvature)`` for the augmented Lagrangian subproblem."""
    d = hdiag + rho * np.sum(J[active] ** 2, axis=0)
    d = np.maximum(d, max(1e-6 * float(np.max(d, initial=0.0)), 1e-12))
    return 1.0 / np.sqrt(d)


@dataclass
class GradientReport:
    max_rel_error: float
    objective_error: float
    constraint_errors: np.ndarray

    def __str__(self) -> str:
        return (f"objective rel err {self.objective_error:.3e}, "
                f"max constraint rel err {np.max(self.constraint_errors, initial=0.0):.3e}")


def _rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    scale = max(1.0, float(np.max(np.abs(fd), initial=0.0)))
    return float(np.max(np.abs(analytic - fd), initial=0.0)) / scale


def check_gradients(problem: NlpProblem, point, h: float = 1e-6) -> GradientReport:
    """Compare supplied gradients with central finite differences at ``point``.

    Errors are relative to ``max(1, max|fd|)`` of each function's gradient.
    """
    x0 = np.asarray(point, dtype=float)
    n = problem.n_vars
    _, gf = problem.objective(x0)
    g0, J = problem.constraints(x0)
    fd_f = np.zeros(n)
    fd_J = np.zeros_like(J)
    for k in range(n):
        xp, xm = x0.copy(), x0.copy()
        xp[k] += h
        xm[k] -= h
        fd_f[k] = (problem.objective(xp)[0] - problem.objective(xm)[0]) / (2 * h)
        fd_J[:, k] = (problem.constraints(xp)[0] - problem.constraints(xm)[0]) / (2 * h)
    obj_err = _rel_err(np.asarray(gf, dtype=float), fd_f)
    con_err = np.array([_rel_err(J[r], fd_J[r]) for r in range(J.shape[0])])
    return GradientReport(max_rel_error=max(obj_err, float(np.max(con_err, initial=0.0))),
                          objective_error=obj_err, constraint_errors=con_err)
