"""Bound-constrained nonlinear least squares.

Minimises ``0.5 * ||r(x)||^2`` subject to ``lower <= x <= upper`` with a
projected Gauss-Newton method. Each iteration first tries the undamped
Gauss-Newton step on the free variables; if that step is rejected the solver
falls back to Levenberg-damped steps with Armijo backtracking along the
projected path, adapting the damping by the gain ratio.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

ARMIJO_C = 1e-4
BACKTRACK = 0.5
MAX_BACKTRACKS = 30
DAMPING_UP = 10.0
DAMPING_DOWN = 10.0
DAMPING_FLOOR = 1e-12
DAMPING_CEIL = 1e16
DENSE_LIMIT = 500


@dataclass
class LeastSquaresSpec:
    """Residual map with optional analytic Jacobian and box bounds.

    ``jacobian`` may return a dense array or a scipy sparse matrix; when it
    is ``None`` forward differences (backward at an upper bound) are used.
    """

    residual: Callable[[np.ndarray], np.ndarray]
    n: int
    jacobian: Callable[[np.ndarray], np.ndarray] | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        self.lower = np.full(self.n, -np.inf) if self.lower is None else np.asarray(self.lower, float)
        self.upper = np.full(self.n, np.inf) if self.upper is None else np.asarray(self.upper, float)
        if self.lower.shape != (self.n,) or self.upper.shape != (self.n,):
            raise ValueError("bounds must have one entry per variable")
        if np.any(self.lower > self.upper):
            raise ValueError("need lower <= upper for every variable")

    def project(self, x) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def contains(self, x) -> bool:
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))


@dataclass
class SolveReport:
    x: np.ndarray
    cost: float
    projected_gradient: float
    iterations: int
    reason: str
    message: str = ""
    costs: list[float] = field(default_factory=list)
    n_residual_evals: int = 0
    n_jacobian_evals: int = 0

    @property
    def success(self) -> bool:
        return self.reason == "tolerance"


def forward_difference_jacobian(spec: LeastSquaresSpec, x: np.ndarray, r: np.ndarray) -> np.ndarray:
    J = np.empty((r.size, x.size))
    for j in range(x.size):
        h = np.sqrt(np.finfo(float).eps) * max(abs(x[j]), 1.0)
        if x[j] + h > spec.upper[j]:
            h = -h
        xp = x.copy()
        xp[j] += h
        J[:, j] = (spec.residual(xp) - r) / h
    return J


def projected_gradient(x, g, spec: LeastSquaresSpec) -> np.ndarray:
    return x - spec.project(x - g)


def _solve_normal(J, g, free, damping):
    """Solve ``(J_f^T J_f + damping I) d_f = -g_f``; returns None when singular."""
    Jf = J[:, free]
    if scipy.sparse.issparse(Jf) or free.sum() > DENSE_LIMIT:
        Jf = scipy.sparse.csc_matrix(Jf)
        A = (Jf.T @ Jf + damping * scipy.sparse.identity(Jf.shape[1])).tocsc()
        d = scipy.sparse.linalg.spsolve(A, -g[free])
        return d if np.all(np.isfinite(d)) else None
    A = Jf.T @ Jf
    if damping > 0:
        A[np.diag_indices_from(A)] += damping
    try:
        c = scipy.linalg.cho_factor(A, check_finite=True)
    except (np.linalg.LinAlgError, ValueError):
        return None
    d = scipy.linalg.cho_solve(c, -g[free])
    return d if np.all(np.isfinite(d)) else None


def minimize(spec: LeastSquaresSpec, x0, tol: float = 1e-8, max_iter: int = 100,
             damping: float = 1e-6, ftol: float = 1e-15, xtol: float = 1e-14) -> SolveReport:
    """Minimise ``0.5 ||r(x)||^2`` over the box from a feasible start.

    Stops with reason ``"tolerance"`` once the projected-gradient norm is at
    most ``tol`` (or an accepted step changes the cost by less than
    ``ftol`` relative and ``x`` by less than ``xtol`` relative),
    ``"max_iter"`` after ``max_iter`` iterations, and
    ``"line_search_fail"`` when no damping level yields descent.
    """
    x = np.array(x0, dtype=float)
    if x.shape != (spec.n,):
        raise ValueError(f"x0 must have shape ({spec.n},)")
    if not spec.contains(x):
        raise ValueError("x0 violates the bounds")
    r = np.asarray(spec.residual(x), dtype=float)
    if not np.all(np.isfinite(r)):
        raise ValueError("residual is not finite at x0")
    n_res, n_jac = 1, 0
    cost = 0.5 * float(r @ r)
    costs = [cost]
    lam = float(damping)

    def report(it, reason, pg, message=""):
        return SolveReport(x=x, cost=cost, projected_gradient=pg, iterations=it, reason=reason,
                           message=message, costs=costs, n_residual_evals=n_res,
                           n_jacobian_evals=n_jac)

    for it in range(max_iter):
        if spec.jacobian is None:
            J = forward_difference_jacobian(spec, x, r)
            n_res += spec.n
        else:
            J = spec.jacobian(x)
            n_jac += 1
        g = np.asarray(J.T @ r).ravel()
        pg = float(np.linalg.norm(projected_gradient(x, g, spec)))
        if not np.isfinite(pg):
            return report(it, "line_search_fail", pg, "non-finite gradient")
        if pg <= tol:
            return report(it, "tolerance", pg)

        # variables pinned at a bound by the gradient stay fixed this iteration
        at_lo = (x <= spec.lower) & (g > 0)
        at_hi = (x >= spec.upper) & (g < 0)
        free = ~(at_lo | at_hi)

        accepted = False
        attempts = [0.0] + [None] * 40
        for attempt in attempts:
            this_lam = lam if attempt is None else attempt
            d = np.zeros(spec.n)
            df = _solve_normal(J, g, free, this_lam)
            if df is None:
                if attempt is None:
                    lam *= DAMPING_UP
                    if lam > DAMPING_CEIL:
                        break
                continue
            d[free] = df
            step = 1.0
            for _ in range(MAX_BACKTRACKS if attempt is None else 1):
                trial = spec.project(x + step * d)
                delta = trial - x
                slope = float(g @ delta)
                if slope >= 0 or not np.any(delta):
                    break
                r_trial = np.asarray(spec.residual(trial), dtype=float)
                n_res += 1
                c_trial = 0.5 * float(r_trial @ r_trial) if np.all(np.isfinite(r_trial)) else np.inf
                if c_trial <= cost + ARMIJO_C * slope:
                    Jd = np.asarray(J @ delta).ravel()
                    predicted = -(float(r @ Jd) + 0.5 * float(Jd @ Jd))
                    ratio = (cost - c_trial) / predicted if predicted > 0 else 0.0
                    accepted = True
                    break
                step *= BACKTRACK
            if accepted:
                if attempt is None:
                    if ratio > 0.75:
                        lam = max(lam / DAMPING_DOWN, DAMPING_FLOOR)
                break
            if attempt is None:
                lam *= DAMPING_UP
                if lam > DAMPING_CEIL:
                    break
        if not accepted:
            return report(it + 1, "line_search_fail", pg, "no damping level produced descent")

        small_f = cost - c_trial <= ftol * max(cost, 1e-300)
        small_x = np.linalg.norm(delta) <= xtol * (np.linalg.norm(x) + xtol)
        x, r, cost = trial, r_trial, c_trial
        costs.append(cost)
        if small_f and small_x:
            return report(it + 1, "tolerance", pg, "step and cost change below ftol/xtol")
    if spec.jacobian is None:
        J = forward_difference_jacobian(spec, x, r)
    else:
        J = spec.jacobian(x)
    g = np.asarray(J.T @ r).ravel()
    pg = float(np.linalg.norm(projected_gradient(x, g, spec)))
    return report(max_iter, "tolerance" if pg <= tol else "max_iter", pg)
