"""Consensus-based distributed moving horizon estimation of heads and K_sat.

Each estimator owns one sensor node and sees only that node's moisture
readings. Its window problem is transcribed simultaneously: every state in
the window is a decision variable and model mismatch enters as a weighted
process residual. Estimators share their earliest-window state and K_sat with
peers through a consensus penalty, iterated ``p_max`` times per instant.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from .nlsq import LeastSquaresSpec, SolveReport, minimize
from .richards import ColumnGrid, ForcingSchedule, InstabilityError, RichardsModel
from .soil import SoilParams, capillary_capacity, water_content

log = logging.getLogger(__name__)

X_BOUNDS = (-1.0, -1e-6)
K_SAT_BOUNDS = (1e-7, 1e-5)
INITIAL_MULTIPLIERS = (0.6, 1.5, 0.5, 2.3)
#: K_sat is optimised in units of K_SCALE so its column is not dwarfed by the heads.
K_SCALE = 1e-6


def sqrt_information(cov, n: int) -> np.ndarray:
    """Upper factor ``U`` with ``U.T @ U = inv(cov)``.

    ``cov`` may be a scalar, a diagonal given as a vector, or a full matrix.
    Infinite diagonal entries give zero weight.
    """
    c = np.asarray(cov, dtype=float)
    if c.ndim == 0:
        c = np.full(n, float(c))
    if c.ndim == 1:
        if c.shape != (n,) or np.any(~(c > 0)):
            raise ValueError(f"diagonal weight must be {n} positive entries")
        return np.diag(1.0 / np.sqrt(c))
    if c.shape != (n, n):
        raise ValueError(f"weight matrix must be {n}x{n}")
    return np.linalg.cholesky(np.linalg.inv(c)).T


@dataclass
class MheTuning:
    """Window length, weights and solver options.

    ``Q_w``, ``Pi_L`` and ``Pi_C`` are covariance-like (the cost uses their
    inverses) and may be scalars, diagonals or matrices; ``mu_L`` and ``mu_C``
    multiply the squared K_sat deviations directly.
    """

    N: int = 12
    Q_w: object = 1.0
    R_v: float = 1.0
    Pi_L: object = 0.6
    Pi_C: object = 0.6
    mu_L: float = 1e11
    mu_C: float = 1e11
    k_ij: np.ndarray | None = None
    p_max: int = 2
    x_bounds: tuple[float, float] = X_BOUNDS
    k_sat_bounds: tuple[float, float] = K_SAT_BOUNDS
    tol: float = 1e-8
    max_iter: int = 100
    damping: float = 1e-6
    model_substep: float = 1.0
    fallback: str = "warm_start"

    def __post_init__(self):
        if self.N < 0 or self.p_max < 1:
            raise ValueError("need N >= 0 and p_max >= 1")
        if not (self.R_v > 0 and self.mu_L >= 0 and self.mu_C >= 0):
            raise ValueError("R_v must be positive and mu_L, mu_C non-negative")
        if not self.x_bounds[0] < self.x_bounds[1] < 0:
            raise ValueError("state bounds must satisfy lo < hi < 0")
        if not 0 < self.k_sat_bounds[0] < self.k_sat_bounds[1]:
            raise ValueError("K_sat bounds must satisfy 0 < lo < hi")
        if self.fallback not in ("warm_start", "best_iterate"):
            raise ValueError("fallback must be 'warm_start' or 'best_iterate'")

    def weights(self, n_y: int) -> np.ndarray:
        """Consensus weights with zero diagonal and rows summing to one."""
        if self.k_ij is None:
            if n_y < 2:
                return np.zeros((n_y, n_y))
            w = np.full((n_y, n_y), 1.0 / (n_y - 1))
            np.fill_diagonal(w, 0.0)
            return w
        w = np.asarray(self.k_ij, dtype=float)
        if w.shape != (n_y, n_y) or np.any(np.diag(w) != 0) or np.any(w < 0):
            raise ValueError("k_ij must be non-negative with zero diagonal")
        if not np.allclose(w.sum(axis=1), 1.0):
            raise ValueError("each row of k_ij must sum to one")
        return w


def consensus_targets(i: int, xs, ks, weights=None) -> tuple[np.ndarray, float]:
    """Weighted average of the peers' earliest-window state and K_sat.

    ``xs`` has one row per estimator and ``ks`` one entry; row ``i`` is
    ignored. Uniform weights ``1/(n_y-1)`` are used when ``weights`` is None.
    """
    xs = np.asarray(xs, dtype=float)
    ks = np.asarray(ks, dtype=float)
    n_y = xs.shape[0]
    if n_y < 2:
        raise ValueError("consensus needs at least one peer")
    if weights is None:
        w = np.full(n_y, 1.0 / (n_y - 1))
    else:
        w = np.array(weights, dtype=float)
    w[i] = 0.0
    return w @ xs, float(w @ ks)


@dataclass
class MheEstimatorState:
    """Everything estimator ``index`` carries between sampling instants."""

    index: int
    node: int
    times: deque
    ys: deque
    x_hat_window: np.ndarray
    x_hat_times: np.ndarray | None
    k_sat_hat: float
    initial_x: np.ndarray
    beta_hat: np.ndarray | None = None

    @classmethod
    def fresh(cls, index: int, node: int, x0, k_sat0: float, N: int) -> "MheEstimatorState":
        x0 = np.array(x0, dtype=float)
        return cls(index=index, node=node, times=deque(maxlen=N + 1), ys=deque(maxlen=N + 1),
                   x_hat_window=x0[None, :], x_hat_times=None, k_sat_hat=float(k_sat0),
                   initial_x=x0)

    def state_at(self, t: float) -> np.ndarray:
        """Latest smoothed estimate of the state at time ``t`` (initial guess before any solve)."""
        if self.x_hat_times is None:
            return self.initial_x.copy()
        j = int(np.argmin(np.abs(self.x_hat_times - t)))
        if abs(self.x_hat_times[j] - t) > 1e-6:
            raise KeyError(f"no estimate for t = {t}")
        return self.x_hat_window[j].copy()

    @property
    def x_hat(self) -> np.ndarray:
        return self.x_hat_window[-1].copy()


class MheProblem:
    """One estimator's window problem as a bound-constrained least-squares spec.

    Decision vector: the window states stacked (``L * n_x`` entries) followed
    by ``K_sat / K_SCALE``.
    """

    def __init__(self, model: RichardsModel, beta_hat, times, ys, node: int, tuning: MheTuning,
                 prior=None, targets=None, tortuosity: float = 0.5):
        self.model = model
        self.beta_hat = np.asarray(beta_hat, dtype=float)
        self.times = np.asarray(times, dtype=float)
        self.ys = np.asarray(ys, dtype=float)
        self.node = int(node)
        self.tuning = tuning
        self.prior = prior
        self.targets = targets
        self.n_x = model.grid.n_nodes
        self.L = self.times.size
        if self.ys.shape != (self.L,):
            raise ValueError("need one measurement per window instant")
        self.tortuosity = tortuosity
        n = self.n_x
        self.U_q = sqrt_information(tuning.Q_w, n)
        self.r_v = 1.0 / np.sqrt(tuning.R_v)
        self.U_l = sqrt_information(tuning.Pi_L, n)
        self.U_c = sqrt_information(tuning.Pi_C, n)

    @property
    def n_vars(self) -> int:
        return self.L * self.n_x + 1

    @property
    def mode(self) -> str:
        return "moving" if self.prior is not None else "full_info"

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.full(self.n_vars, self.tuning.x_bounds[0])
        hi = np.full(self.n_vars, self.tuning.x_bounds[1])
        lo[-1] = self.tuning.k_sat_bounds[0] / K_SCALE
        hi[-1] = self.tuning.k_sat_bounds[1] / K_SCALE
        return lo, hi

    def pack(self, xs, k_sat: float) -> np.ndarray:
        return np.concatenate([np.asarray(xs, dtype=float).ravel(), [k_sat / K_SCALE]])

    def unpack(self, z) -> tuple[np.ndarray, float]:
        return z[:-1].reshape(self.L, self.n_x), float(z[-1]) * K_SCALE

    def params(self, k_sat: float) -> SoilParams:
        ts, tr, a, n = self.beta_hat
        return SoilParams(k_sat=k_sat, theta_s=ts, theta_r=tr, alpha=a, n=n, tortuosity=self.tortuosity)

    def _n_rows(self) -> int:
        rows = (self.L - 1) * self.n_x + self.L
        if self.prior is not None:
            rows += self.n_x + 1
        if self.targets is not None:
            rows += self.n_x + 1
        return rows

    def _propagate(self, xs, k_sat, tangent: bool):
        p = self.params(k_sat)
        out = []
        for d in range(self.L - 1):
            t0, dt = self.times[d], self.times[d + 1] - self.times[d]
            if tangent:
                out.append(self.model.transition_sensitivity(xs[d], p, t0, dt))
            else:
                out.append(self.model.transition(xs[d], p, t0, dt))
        return out

    def residual(self, z) -> np.ndarray:
        xs, k_sat = self.unpack(np.asarray(z, dtype=float))
        try:
            nxt = self._propagate(xs, k_sat, tangent=False)
        except InstabilityError:
            return np.full(self._n_rows(), np.nan)
        p = self.params(k_sat)
        parts = [self.U_q @ (xs[d + 1] - nxt[d]) for d in range(self.L - 1)]
        g = water_content(xs[:, self.node], p, clamp=True)
        parts.append(self.r_v * (self.ys - g))
        for anchor, U, mu in self._anchors():
            x_ref, k_ref = anchor
            parts.append(U @ (xs[0] - x_ref))
            parts.append([np.sqrt(mu) * (k_sat - k_ref)])
        return np.concatenate([np.ravel(a) for a in parts])

    def _anchors(self):
        if self.prior is not None:
            yield self.prior, self.U_l, self.tuning.mu_L
        if self.targets is not None:
            yield self.targets, self.U_c, self.tuning.mu_C

    def jacobian(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        xs, k_sat = self.unpack(z)
        n, L = self.n_x, self.L
        J = np.zeros((self._n_rows(), self.n_vars))
        try:
            sens = self._propagate(xs, k_sat, tangent=True)
        except InstabilityError:
            J[:] = np.nan
            return J
        row = 0
        for d, (_, dx, dk) in enumerate(sens):
            J[row:row + n, (d + 1) * n:(d + 2) * n] = self.U_q
            J[row:row + n, d * n:(d + 1) * n] = -self.U_q @ dx
            J[row:row + n, -1] = -(self.U_q @ dk) * K_SCALE
            row += n
        p = self.params(k_sat)
        dg = capillary_capacity(xs[:, self.node], p, clamp=True)
        for d in range(L):
            J[row + d, d * n + self.node] = -self.r_v * dg[d]
        row += L
        for _, U, mu in self._anchors():
            J[row:row + n, :n] = U
            row += n
            J[row, -1] = np.sqrt(mu) * K_SCALE
            row += 1
        return J

    def cost(self, z) -> float:
        """Window cost: the sum of all squared weighted residuals."""
        r = self.residual(z)
        return float(r @ r)

    def spec(self) -> LeastSquaresSpec:
        lo, hi = self.bounds()
        return LeastSquaresSpec(residual=self.residual, n=self.n_vars, jacobian=self.jacobian,
                                lower=lo, upper=hi)


def assemble_problem(state: MheEstimatorState, targets, mode: str, tuning: MheTuning,
                     model: RichardsModel, prior=None, tortuosity: float = 0.5) -> MheProblem:
    """Build estimator ``state``'s window problem.

    ``targets`` is ``(x_bar, K_bar)`` or None when there are no peers;
    ``prior`` is ``(x_hat(k-N|k-1), K_hat(k-1))`` and is required in moving
    mode, ignored in full-information mode.
    """
    if state.beta_hat is None:
        raise ValueError("estimator has no retention estimate yet; DMHE is not active")
    if mode not in ("full_info", "moving"):
        raise ValueError(f"unknown mode {mode!r}")
    if not state.times:
        raise ValueError("estimator window is empty")
    if mode == "moving" and prior is None:
        raise ValueError("moving mode needs an arrival prior")
    return MheProblem(model, state.beta_hat, list(state.times), list(state.ys), state.node, tuning,
                      prior=prior if mode == "moving" else None, targets=targets,
                      tortuosity=tortuosity)


@dataclass
class MheSolution:
    xs: np.ndarray
    k_sat: float
    cost: float
    report: SolveReport
    fell_back: bool = False


def solve_problem(problem: MheProblem, warm_xs, warm_k_sat: float, tuning: MheTuning | None = None
                  ) -> MheSolution:
    """Solve from a feasible warm start; fall back per ``tuning.fallback`` on failure."""
    tuning = problem.tuning if tuning is None else tuning
    spec = problem.spec()
    z0 = problem.pack(warm_xs, warm_k_sat)
    if not spec.contains(z0):
        raise ValueError("warm start violates the state or K_sat bounds")
    rep = minimize(spec, z0, tol=tuning.tol, max_iter=tuning.max_iter, damping=tuning.damping)
    z, fell_back = rep.x, False
    if not np.all(np.isfinite(z)) or (rep.reason != "tolerance" and tuning.fallback == "warm_start"):
        log.warning("DMHE solve ended with %s (%s); keeping warm start", rep.reason, rep.message)
        z, fell_back = z0, True
    xs, k = problem.unpack(z)
    return MheSolution(xs=xs.copy(), k_sat=k, cost=2.0 * (rep.costs[0] if fell_back else rep.cost),
                       report=rep, fell_back=fell_back)


def initial_guesses(x0, k_sat: float, multipliers=INITIAL_MULTIPLIERS,
                    x_bounds=X_BOUNDS, k_sat_bounds=K_SAT_BOUNDS) -> tuple[np.ndarray, np.ndarray]:
    """Scaled copies of ``x0`` and ``k_sat`` projected onto the bounds."""
    m = np.asarray(multipliers, dtype=float)
    xs = np.clip(m[:, None] * np.asarray(x0, dtype=float)[None, :], *x_bounds)
    ks = np.clip(m * k_sat, *k_sat_bounds)
    return xs, ks


class DmheBank:
    """The ``n_y`` estimators with their communication rounds.

    Call :meth:`sampling_instant` once per DMHE period from the activation
    instant on; the first ``N`` calls run in full-information mode.
    """

    def __init__(self, grid: ColumnGrid, forcing: ForcingSchedule, initial_states, initial_k_sat,
                 tuning: MheTuning = MheTuning(), period: float = 1200.0, guard: float = 0.1,
                 tortuosity: float = 0.5):
        self.grid = grid
        self.tuning = tuning
        self.period = float(period)
        self.model = RichardsModel(grid=grid, forcing=forcing, substep=tuning.model_substep,
                                   guard=guard)
        self.tortuosity = tortuosity
        xs = np.atleast_2d(np.asarray(initial_states, dtype=float))
        ks = np.asarray(initial_k_sat, dtype=float).ravel()
        n_y = grid.n_sensors
        if xs.shape != (n_y, grid.n_nodes) or ks.shape != (n_y,):
            raise ValueError(f"need {n_y} initial states of length {grid.n_nodes} and {n_y} K_sat values")
        lo, hi = tuning.x_bounds
        klo, khi = tuning.k_sat_bounds
        if np.any((xs < lo) | (xs > hi)) or np.any((ks < klo) | (ks > khi)):
            raise ValueError("initial guesses must lie within the DMHE bounds")
        self.weights = tuning.weights(n_y)
        self.estimators = [MheEstimatorState.fresh(i, int(node), xs[i], ks[i], tuning.N)
                           for i, node in enumerate(grid.sensor_index)]
        self.records: list[dict] = []
        self.n_instants = 0

    @property
    def n_estimators(self) -> int:
        return len(self.estimators)

    def _warm_start(self, est: MheEstimatorState, start: float, p: SoilParams) -> np.ndarray:
        if est.x_hat_times is None:
            return est.initial_x[None, :].copy()
        times = est.x_hat_times
        keep = est.x_hat_window[times >= start - 1e-6]
        last = est.x_hat_window[-1]
        try:
            nxt = self.model.transition(last, p, times[-1], self.period)
            nxt = np.clip(nxt, *self.tuning.x_bounds)
        except InstabilityError:
            nxt = last.copy()
        return np.vstack([keep, nxt[None, :]])

    def sampling_instant(self, t: float, moisture, betas) -> tuple[np.ndarray, np.ndarray]:
        """Advance every estimator to time ``t``.

        ``moisture`` holds the ``n_y`` sensor readings at ``t`` and ``betas``
        the per-estimator retention estimates from the DEKF.
        """
        tun = self.tuning
        moisture = np.asarray(moisture, dtype=float).ravel()
        betas = np.atleast_2d(np.asarray(betas, dtype=float))
        n_y = self.n_estimators
        if moisture.shape != (n_y,) or betas.shape != (n_y, 4):
            raise ValueError("need one moisture reading and one beta per estimator")
        for est in self.estimators:
            if est.times and abs(t - est.times[-1] - self.period) > 1e-6:
                raise ValueError(f"instant t = {t} does not follow {est.times[-1]} by one period")
        for est, y, b in zip(self.estimators, moisture, betas):
            est.times.append(float(t))
            est.ys.append(float(y))
            est.beta_hat = b.copy()
        start = self.estimators[0].times[0]
        mode = "moving" if len(self.estimators[0].times) == tun.N + 1 else "full_info"

        # values from the previous instant, read by round p = 1
        anchors_x = np.array([e.state_at(start) for e in self.estimators])
        anchors_k = np.array([e.k_sat_hat for e in self.estimators])
        warm = []
        for e in self.estimators:
            p = SoilParams(e.k_sat_hat, *e.beta_hat, tortuosity=self.tortuosity)
            warm.append((self._warm_start(e, start, p), e.k_sat_hat))

        solutions = None
        for it in range(1, tun.p_max + 1):
            if it == 1:
                peer_x, peer_k = anchors_x, anchors_k
            else:
                peer_x = np.array([s.xs[0] for s in solutions])
                peer_k = np.array([s.k_sat for s in solutions])
            new = []
            for i, est in enumerate(self.estimators):
                targets = None
                if n_y > 1:
                    targets = consensus_targets(i, peer_x, peer_k, self.weights[i])
                prior = (anchors_x[i], anchors_k[i]) if mode == "moving" else None
                prob = assemble_problem(est, targets, mode, tun, self.model, prior=prior,
                                        tortuosity=self.tortuosity)
                wx, wk = warm[i] if it == 1 else (solutions[i].xs, solutions[i].k_sat)
                sol = solve_problem(prob, wx, wk)
                new.append(sol)
                self.records.append(dict(
                    t=float(t), estimator=i, p=it, mode=mode, cost=sol.cost,
                    iterations=sol.report.iterations, reason=sol.report.reason,
                    fell_back=sol.fell_back, k_sat=sol.k_sat))
            solutions = new  # barrier: round p reads only round p-1

        for est, sol in zip(self.estimators, solutions):
            est.x_hat_window = sol.xs
            est.x_hat_times = np.array(est.times, dtype=float)
            est.k_sat_hat = sol.k_sat
        self.n_instants += 1
        return self.estimates()

    def estimates(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([e.x_hat for e in self.estimators]),
                np.array([e.k_sat_hat for e in self.estimators]))


def dmhe_sampling_instant(bank: DmheBank, moisture, t: float, betas):
    """Functional alias for :meth:`DmheBank.sampling_instant`."""
    return bank.sampling_instant(t, moisture, betas)
