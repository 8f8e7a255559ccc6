"""Consensus-based distributed EKF for the four retention parameters.

One filter per sensor node. At every sampling instant each node's stored
measurement pairs (head, moisture) are shuffled and replayed through the
filters in synchronous rounds: in round ``l`` every filter reads its peers'
round-``l`` estimates, applies an EKF correction with its own ``l``-th pair
and a consensus pull toward the peers' mean, and inflates its covariance by
``1 + b/(l+1)``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import _kernels
from .richards import MeasurementPair
from .soil import LOAM, retention_jacobian, water_content

#: Table of poor initial guesses (theta_s, theta_r, alpha, n), one row per filter.
TABLE2_GUESSES = np.array([
    [0.33, 0.37, 1.60, 0.57],
    [0.48, 0.12, 3.20, 1.36],
    [0.73, 0.15, 3.85, 1.87],
    [0.62, 0.04, 2.65, 0.70],
])

#: Box keeping estimates inside the retention curve's domain. theta_r is
#: additionally capped at ``THETA_R_RATIO * theta_s``.
BETA_LOWER = np.array([1e-3, 1e-4, 0.1, 1.01])
BETA_UPPER = np.array([1.0, 1.0, 20.0, 5.0])
THETA_R_RATIO = 0.99


class DekfDivergenceError(FloatingPointError):
    def __init__(self, filter_index: int, k: int, step: int):
        super().__init__(f"non-finite DEKF update in filter {filter_index + 1} "
                         f"at instant {k}, inner step {step}")
        self.filter_index, self.k, self.step = filter_index, k, step


@dataclass(frozen=True)
class DekfTuning:
    Q: np.ndarray = field(default_factory=lambda: 0.0225 * np.eye(4))
    R: float = 0.01
    a: float = 0.3
    chi_a: float = 0.1
    b: float = 0.5
    k_max: int = 1000
    p0_diag: tuple[float, ...] = (1.0, 0.16, 15.0, 3.0)
    #: Continue each instant from the previous instant's estimate and
    #: covariance; False restarts every instant from the initial guess.
    warm_start: bool = True
    #: Upper bound on the eigenvalues of P after each update (inf: none).
    p_ceiling: float = 1e6

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        object.__setattr__(self, "Q", Q)
        if Q.shape != (4, 4) or not np.allclose(Q, Q.T) or np.linalg.eigvalsh(Q).min() <= 0:
            raise ValueError("Q must be a symmetric positive definite 4x4 matrix")
        if self.R <= 0 or self.a < 0 or self.b <= 0 or not 0 < self.chi_a < 1:
            raise ValueError("need R > 0, a >= 0, b > 0 and 0 < chi_a < 1")
        if self.k_max < 1:
            raise ValueError("k_max must be at least 1")
        if not self.p_ceiling > 0:
            raise ValueError("p_ceiling must be positive")

    def mu(self, l: int) -> float:
        """Consensus gain for inner step ``l``."""
        return self.a / (l + 1) ** self.chi_a

    def inflation(self, l: int) -> float:
        return self.b / (l + 1)


@dataclass
class DekfFilterState:
    beta_hat: np.ndarray
    P: np.ndarray

    def copy(self) -> "DekfFilterState":
        return DekfFilterState(self.beta_hat.copy(), self.P.copy())


@dataclass(frozen=True)
class ConsensusSnapshot:
    """Round-``l`` estimates of all filters, read before any filter writes."""

    betas: np.ndarray

    def peer_mean(self, i: int) -> np.ndarray | None:
        n = len(self.betas)
        if n < 2:
            return None
        return (self.betas.sum(axis=0) - self.betas[i]) / (n - 1)


def project_beta(beta) -> np.ndarray:
    out = np.clip(np.asarray(beta, dtype=float), BETA_LOWER, BETA_UPPER)
    out[1] = min(out[1], THETA_R_RATIO * out[0])
    return out


def clip_covariance(P, ceiling: float) -> np.ndarray:
    """Cap the eigenvalues of symmetric ``P`` at ``ceiling``."""
    if not np.trace(P) > ceiling:
        return P
    lam, V = np.linalg.eigh(P)
    if lam[-1] <= ceiling:
        return P
    out = (V * np.minimum(lam, ceiling)) @ V.T
    return 0.5 * (out + out.T)


def ekf_correction(beta, P, H, innovation, R, Q, mu, inflation, peer_mean=None,
                   ceiling: float = np.inf):
    """EKF parameter update with consensus pull and covariance inflation.

    Returns the unprojected estimate and the symmetrised covariance, its
    eigenvalues capped at ``ceiling``.
    """
    PH = P @ H
    s = float(H @ PH) + R
    assert s > 0, "innovation variance must be positive"
    gain = PH / s
    new = beta + gain * innovation
    if peer_mean is not None:
        new = new - mu * (beta - peer_mean)
    P_new = (1.0 + inflation) * (P - np.outer(gain, PH) + Q)
    return new, clip_covariance(0.5 * (P_new + P_new.T), ceiling)


def filter_update(i: int, state: DekfFilterState, pair: MeasurementPair,
                  peers: ConsensusSnapshot, l: int, tuning: DekfTuning) -> DekfFilterState:
    """Inner step ``l`` of filter ``i`` using one measurement pair."""
    if not pair.head < 0:
        raise ValueError("measurement pair head must be negative")
    p = LOAM.with_beta(state.beta_hat)
    g = float(water_content(pair.head, p, clamp=True))
    H = retention_jacobian(pair.head, p, clamp=True).as_array()
    beta, P = ekf_correction(state.beta_hat, state.P, H, pair.moisture - g, tuning.R, tuning.Q,
                             tuning.mu(l), tuning.inflation(l), peers.peer_mean(i),
                             tuning.p_ceiling)
    if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(P))):
        raise DekfDivergenceError(i, pair.time_index, l)
    return DekfFilterState(project_beta(beta), P)


def permute_pairs(history, k: int, seed: int):
    """Shuffle each node's stored pairs independently; deterministic in ``(seed, k)``."""
    rng = np.random.default_rng([seed, k])
    return [[node_pairs[j] for j in rng.permutation(len(node_pairs))] for node_pairs in history]


def _permutations(lengths, k: int, seed: int):
    rng = np.random.default_rng([seed, k])
    return [rng.permutation(n) for n in lengths]


@njit(cache=True)
def _project(b, lower, upper, ratio):
    for q in range(4):
        b[q] = min(max(b[q], lower[q]), upper[q])
    b[1] = min(b[1], ratio * b[0])


@njit(cache=True)
def _clip_eigen(P, ceiling):
    tr = P[0, 0] + P[1, 1] + P[2, 2] + P[3, 3]
    if not tr > ceiling:
        return
    lam, V = np.linalg.eigh(P)
    if lam[3] <= ceiling:
        return
    for q in range(4):
        lam[q] = min(lam[q], ceiling)
    out = (V * lam) @ V.T
    for q in range(4):
        for r in range(4):
            P[q, r] = 0.5 * (out[q, r] + out[r, q])


@njit(cache=True)
def _run_rounds(B, P, heads, ys, Q, R, a, chi, bb, lower, upper, ratio, ceiling):
    """Replay ``heads.shape[0]`` synchronous rounds in place.

    Returns ``(-1, -1)`` on success or ``(filter, step)`` of the first
    non-finite update.
    """
    ny = B.shape[0]
    n_steps = heads.shape[0]
    grad = np.empty(4)
    tot = np.empty(4)
    Bn = B.copy()
    PH = np.empty(4)
    for l in range(n_steps):
        mu = a / (l + 1.0) ** chi
        lam = bb / (l + 1.0)
        for q in range(4):
            tot[q] = 0.0
            for i in range(ny):
                tot[q] += B[i, q]
        for i in range(ny):
            g = _kernels.retention_and_gradient(heads[l, i], B[i], grad)
            s = R
            for q in range(4):
                acc = 0.0
                for r in range(4):
                    acc += P[i, q, r] * grad[r]
                PH[q] = acc
                s += grad[q] * acc
            innov = ys[l, i] - g
            for q in range(4):
                v = B[i, q] + PH[q] / s * innov
                if ny > 1:
                    v -= mu * (B[i, q] - (tot[q] - B[i, q]) / (ny - 1))
                Bn[i, q] = v
            for q in range(4):
                for r in range(q, 4):
                    v = (1.0 + lam) * (P[i, q, r] - PH[q] * PH[r] / s + Q[q, r])
                    w = (1.0 + lam) * (P[i, r, q] - PH[r] * PH[q] / s + Q[r, q])
                    P[i, q, r] = 0.5 * (v + w)
                    P[i, r, q] = P[i, q, r]
            _clip_eigen(P[i], ceiling)
            for q in range(4):
                if not np.isfinite(Bn[i, q]):
                    return i, l
            _project(Bn[i], lower, upper, ratio)
        B[:, :] = Bn
    return -1, -1


class DekfBank:
    """The ``n_y`` local filters plus their measurement-pair buffers.

    ``initial_guesses`` holds one ``(theta_s, theta_r, alpha, n)`` row per
    filter (projected into the admissible box); ``p0_scales`` multiplies the
    tuning's initial covariance diagonal per filter.
    """

    def __init__(self, initial_guesses, tuning: DekfTuning = DekfTuning(), p0_scales=None,
                 seed: int = 0):
        guesses = np.atleast_2d(np.asarray(initial_guesses, dtype=float))
        self.n_filters = guesses.shape[0]
        self.tuning = tuning
        self.seed = seed
        self.initial = np.array([project_beta(g) for g in guesses])
        scales = np.ones(self.n_filters) if p0_scales is None else np.asarray(p0_scales, float)
        self.P0 = np.array([np.diag(tuning.p0_diag) * s for s in scales])
        self.beta = self.initial.copy()
        self.P = self.P0.copy()
        self.heads = [deque(maxlen=tuning.k_max) for _ in range(self.n_filters)]
        self.moisture = [deque(maxlen=tuning.k_max) for _ in range(self.n_filters)]
        self.k = -1

    @property
    def states(self) -> list[DekfFilterState]:
        return [DekfFilterState(b.copy(), P.copy()) for b, P in zip(self.beta, self.P)]

    def history(self) -> list[list[tuple[float, float]]]:
        return [list(zip(h, y)) for h, y in zip(self.heads, self.moisture)]

    def sampling_instant(self, heads, moisture, k: int | None = None) -> np.ndarray:
        """Absorb one (head, moisture) pair per node and run the instant's rounds.

        Returns the ``(n_filters, 4)`` array of end-of-instant estimates.
        """
        k = self.k + 1 if k is None else k
        heads = np.asarray(heads, dtype=float)
        moisture = np.asarray(moisture, dtype=float)
        if heads.shape != (self.n_filters,) or moisture.shape != (self.n_filters,):
            raise ValueError("need exactly one pair per node")
        if np.any(heads >= 0):
            raise ValueError("measurement pair heads must be negative")
        for i in range(self.n_filters):
            self.heads[i].append(heads[i])
            self.moisture[i].append(moisture[i])
        n_pairs = len(self.heads[0])
        perms = _permutations([n_pairs] * self.n_filters, k, self.seed)
        H = np.empty((n_pairs, self.n_filters))
        Y = np.empty((n_pairs, self.n_filters))
        for i, perm in enumerate(perms):
            H[:, i] = np.asarray(self.heads[i])[perm]
            Y[:, i] = np.asarray(self.moisture[i])[perm]
        if not self.tuning.warm_start:
            self.beta = self.initial.copy()
            self.P = self.P0.copy()
        t = self.tuning
        bad_filter, bad_step = _run_rounds(self.beta, self.P, H, Y, t.Q, float(t.R), float(t.a),
                                           float(t.chi_a), float(t.b), BETA_LOWER, BETA_UPPER,
                                           THETA_R_RATIO, float(t.p_ceiling))
        if bad_filter >= 0:
            raise DekfDivergenceError(bad_filter, k, bad_step)
        self.k = k
        return self.beta.copy()


def dekf_sampling_instant(bank: DekfBank, pairs: list[MeasurementPair], k: int) -> np.ndarray:
    return bank.sampling_instant([p.head for p in pairs], [p.moisture for p in pairs], k)


def pairwise_spread(betas) -> float:
    """Largest Euclidean distance between any two filters' estimates."""
    b = np.asarray(betas)
    d = b[:, None, :] - b[None, :, :]
    return float(np.sqrt((d**2).sum(axis=-1)).max())


@dataclass
class ConvergenceResult:
    converged: bool
    tau0: int | None
    spreads: np.ndarray
    settles: np.ndarray


def convergence_check(history, window: int = 10, eps_consensus: float = 1e-3,
                      eps_settle: float = 1e-2) -> ConvergenceResult:
    """Find the first instant ending a run of ``window`` instants that are all
    in consensus and settled.

    ``history`` has shape ``(n_instants, n_filters, 4)``. An instant is in
    consensus when the largest pairwise filter distance is below
    ``eps_consensus``, and settled when every filter moved less than
    ``eps_settle`` since the previous instant.
    """
    hist = np.asarray(history, dtype=float)
    spreads = np.array([pairwise_spread(b) for b in hist])
    settles = np.full(len(hist), np.inf)
    if len(hist) > 1:
        settles[1:] = np.linalg.norm(np.diff(hist, axis=0), axis=-1).max(axis=1)
    ok = (spreads < eps_consensus) & (settles < eps_settle)
    run = 0
    for k, good in enumerate(ok):
        run = run + 1 if good else 0
        if run >= window:
            return ConvergenceResult(True, k, spreads, settles)
    return ConvergenceResult(False, None, spreads, settles)


class ConvergenceMonitor:
    """Online form of :func:`convergence_check`."""

    def __init__(self, window: int = 10, eps_consensus: float = 1e-3, eps_settle: float = 1e-2):
        self.window, self.eps_consensus, self.eps_settle = window, eps_consensus, eps_settle
        self.previous = None
        self.run = 0
        self.tau0: int | None = None
        self.last_spread = np.inf
        self.last_settle = np.inf

    def update(self, k: int, betas) -> bool:
        betas = np.asarray(betas, dtype=float)
        self.last_spread = pairwise_spread(betas)
        self.last_settle = (np.inf if self.previous is None
                            else float(np.linalg.norm(betas - self.previous, axis=-1).max()))
        self.previous = betas.copy()
        good = self.last_spread < self.eps_consensus and self.last_settle < self.eps_settle
        self.run = self.run + 1 if good else 0
        if self.tau0 is None and self.run >= self.window:
            self.tau0 = k
        return self.tau0 is not None


def centralized_ekf_run(initial_guess, heads, moisture, tuning: DekfTuning = DekfTuning(),
                        p0_scale: float = 1.0, seed: int = 0) -> np.ndarray:
    """Single EKF over every node's pairs, no consensus.

    ``heads`` and ``moisture`` have shape ``(n_instants, n_nodes)``. All pairs
    share one buffer holding at most ``k_max * n_nodes`` pairs, shuffled per
    instant exactly like a DEKF node buffer. Returns the ``(n_instants, 4)``
    estimate trajectory.
    """
    heads = np.atleast_2d(np.asarray(heads, dtype=float))
    moisture = np.atleast_2d(np.asarray(moisture, dtype=float))
    n_inst, n_nodes = heads.shape
    cap = tuning.k_max * n_nodes
    buf_h: deque = deque(maxlen=cap)
    buf_y: deque = deque(maxlen=cap)
    beta0 = project_beta(initial_guess)[None, :]
    P0 = (np.diag(tuning.p0_diag) * p0_scale)[None, :, :]
    B, P = beta0.copy(), P0.copy()
    out = np.empty((n_inst, 4))
    for k in range(n_inst):
        buf_h.extend(heads[k])
        buf_y.extend(moisture[k])
        (perm,) = _permutations([len(buf_h)], k, seed)
        H = np.asarray(buf_h)[perm][:, None]
        Y = np.asarray(buf_y)[perm][:, None]
        if not tuning.warm_start:
            B, P = beta0.copy(), P0.copy()
        bad, step = _run_rounds(B, P, H, Y, tuning.Q, float(tuning.R), 0.0, float(tuning.chi_a),
                                float(tuning.b), BETA_LOWER, BETA_UPPER, THETA_R_RATIO,
                                float(tuning.p_ceiling))
        if bad >= 0:
            raise DekfDivergenceError(0, k, step)
        out[k] = B[0]
    return out


def p0_scales(n_filters: int, seed: int) -> np.ndarray:
    """Per-filter uniform(0, 1) multipliers of the initial covariance."""
    return np.random.default_rng([seed, 0xD0]).uniform(size=n_filters)
