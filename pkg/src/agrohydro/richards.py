"""Finite-difference Richards model of a vertical soil column.

The column is split into ``n_nodes`` equal compartments, node 1 at the
surface. Heads evolve by explicit Euler substeps of the head-form Richards
equation with interface conductivities taken at the mean neighbouring head,
a prescribed infiltration flux on top and free drainage (unit gradient) at
the bottom.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .soil import SATURATION_CLAMP, SoilParams, hydraulic_conductivity, water_content

BOTTOM_CONDITIONS = ("free_drainage", "sealed")


class InstabilityError(RuntimeError):
    """An Euler substep changed some head by more than the configured guard."""


@dataclass(frozen=True)
class ColumnGrid:
    depth_total: float = 0.67
    n_nodes: int = 32
    sensor_nodes: tuple[int, ...] = (4, 12, 20, 28)
    bottom: str = "free_drainage"

    def __post_init__(self):
        object.__setattr__(self, "sensor_nodes", tuple(int(i) for i in self.sensor_nodes))
        if self.depth_total <= 0 or self.n_nodes < 2:
            raise ValueError("grid needs positive depth and at least two nodes")
        s = self.sensor_nodes
        if any(b <= a for a, b in zip(s, s[1:])):
            raise ValueError(f"sensor nodes must be strictly increasing: {s}")
        if s and (s[0] < 1 or s[-1] > self.n_nodes):
            raise ValueError(f"sensor nodes must lie in [1, {self.n_nodes}]: {s}")
        if self.bottom not in BOTTOM_CONDITIONS:
            raise ValueError(f"bottom must be one of {BOTTOM_CONDITIONS}")

    @property
    def dz(self) -> float:
        return self.depth_total / self.n_nodes

    @property
    def node_depths(self) -> np.ndarray:
        """Compartment centre depths below the surface (m)."""
        return (np.arange(1, self.n_nodes + 1) - 0.5) * self.dz

    @property
    def sensor_index(self) -> np.ndarray:
        """Zero-based state indices of the sensor nodes."""
        return np.asarray(self.sensor_nodes, dtype=int) - 1

    @property
    def sensor_depths(self) -> np.ndarray:
        return self.node_depths[self.sensor_index]

    @property
    def n_sensors(self) -> int:
        return len(self.sensor_nodes)


@dataclass(frozen=True)
class ForcingSchedule:
    """Piecewise-constant surface infiltration flux (m/s, positive into the soil).

    ``steps`` holds ``(start_time_s, flux)`` pairs; the flux before the first
    step is zero. With ``period`` set, times are wrapped modulo the period.
    """

    steps: tuple[tuple[float, float], ...] = ()
    period: float | None = None

    def __post_init__(self):
        steps = tuple((float(t), float(v)) for t, v in self.steps)
        object.__setattr__(self, "steps", steps)
        times = [t for t, _ in steps]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("forcing step times must be nondecreasing")
        if not all(np.isfinite(v) for _, v in steps):
            raise ValueError("forcing flux values must be finite")
        if self.period is not None and self.period <= 0:
            raise ValueError("forcing period must be positive")

    @classmethod
    def daily(cls, rate: float, hours: float = 8.0, start_hour: float = 0.0) -> "ForcingSchedule":
        """Constant ``rate`` for ``hours`` every day starting at ``start_hour``."""
        on, off = start_hour * 3600.0, (start_hour + hours) * 3600.0
        steps = [(0.0, 0.0), (on, rate), (off, 0.0)]
        return cls(steps=tuple(steps), period=86400.0)

    @classmethod
    def constant(cls, rate: float) -> "ForcingSchedule":
        return cls(steps=((0.0, rate),))

    def flux_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if not self.steps:
            return np.zeros_like(t)
        if self.period is not None:
            t = np.mod(t, self.period)
        times = np.array([s for s, _ in self.steps])
        values = np.array([0.0] + [v for _, v in self.steps])
        return values[np.searchsorted(times, t, side="right")]


@dataclass(frozen=True)
class MeasurementPair:
    node: int
    time_index: int
    moisture: float
    head: float


@dataclass(frozen=True)
class NoiseConfig:
    """Standard deviations of the zero-mean Gaussian disturbances.

    ``process_std`` is applied to every state once per measurement period.
    """

    process_std: float = 1e-4
    moisture_std: float = 1e-5
    head_std: float = 1e-5

    def __post_init__(self):
        if min(self.process_std, self.moisture_std, self.head_std) < 0:
            raise ValueError("noise standard deviations must be nonnegative")


def _soil_args(p: SoilParams):
    return p.k_sat, p.theta_s - p.theta_r, p.alpha, p.n, p.tortuosity


def check_state(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or not np.all(np.isfinite(x)):
        raise ValueError("pressure state must be a finite 1-D vector")
    if np.any(x >= 0):
        raise ValueError("pressure state must be negative everywhere (unsaturated column)")
    return x


def interface_conductivity(h_a, h_b, p: SoilParams):
    """Conductivity between two compartments, evaluated at their mean head."""
    return hydraulic_conductivity(0.5 * (np.asarray(h_a) + np.asarray(h_b)), p, clamp=True)


def interface_fluxes(x, p: SoilParams, q_top: float, grid: ColumnGrid) -> np.ndarray:
    """Downward water fluxes (m/s) at the ``n_nodes + 1`` compartment interfaces."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.size + 1)
    _kernels.fluxes(x, *_soil_args(p), grid.dz, float(q_top), grid.bottom == "sealed", out)
    return out


def euler_step(x, p: SoilParams, q_top: float, dt: float, grid: ColumnGrid = ColumnGrid(),
               guard: float = 0.1) -> np.ndarray:
    """One explicit Euler substep of length ``dt`` seconds."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = check_state(x)
    h, bad, _ = _kernels.integrate(x, np.array([float(q_top)]), float(dt), *_soil_args(p),
                                   grid.dz, grid.bottom == "sealed", float(guard))
    if bad >= 0:
        raise InstabilityError(f"head change exceeded {guard} m in one substep of {dt} s")
    return h


@dataclass(frozen=True)
class RichardsModel:
    """The state-transition map over one sampling period.

    ``substep`` is the Euler step (s); ``guard`` the largest head change (m)
    tolerated in one substep before the integration is declared unstable.
    """

    grid: ColumnGrid = field(default_factory=ColumnGrid)
    forcing: ForcingSchedule = field(default_factory=ForcingSchedule)
    substep: float = 1.0
    guard: float = 0.1

    def substep_fluxes(self, t0: float, horizon: float) -> np.ndarray:
        n = int(round(horizon / self.substep))
        if n < 1 or abs(n * self.substep - horizon) > 1e-9 * max(1.0, horizon):
            raise ValueError(f"horizon {horizon} s is not a multiple of substep {self.substep} s")
        return self.forcing.flux_at(t0 + self.substep * np.arange(n))

    def _run(self, x, p, t0, horizon):
        q = self.substep_fluxes(t0, horizon)
        h, bad, drained = _kernels.integrate(
            check_state(x), q, float(self.substep), *_soil_args(p), self.grid.dz,
            self.grid.bottom == "sealed", float(self.guard))
        if bad >= 0:
            raise InstabilityError(
                f"head change exceeded {self.guard} m at t = {t0 + bad * self.substep:.0f} s"
                f" (substep {self.substep} s too large?)")
        return h, drained

    def transition(self, x, p: SoilParams, t0: float, horizon: float) -> np.ndarray:
        return self._run(x, p, t0, horizon)[0]

    def transition_with_drainage(self, x, p: SoilParams, t0: float, horizon: float):
        """Like :meth:`transition`, also returning the water drained at the bottom (m)."""
        return self._run(x, p, t0, horizon)

    def transition_sensitivity(self, x, p: SoilParams, t0: float, horizon: float):
        """End state plus its Jacobians with respect to the start state and ``k_sat``."""
        q = self.substep_fluxes(t0, horizon)
        h, sens, bad = _kernels.integrate_tangent(
            check_state(x), q, float(self.substep), *_soil_args(p), self.grid.dz,
            self.grid.bottom == "sealed", float(self.guard))
        if bad >= 0:
            raise InstabilityError(f"head change exceeded {self.guard} m during sensitivity run")
        return h, sens[:, :-1], sens[:, -1]


def transition(x, p: SoilParams, u: ForcingSchedule, t0: float, horizon: float,
               substep: float = 1.0, grid: ColumnGrid = ColumnGrid(),
               guard: float = 0.1) -> np.ndarray:
    """Advance ``x`` over ``horizon`` seconds in Euler substeps of ``substep`` seconds."""
    return RichardsModel(grid, u, substep, guard).transition(x, p, t0, horizon)


@dataclass
class TruthRun:
    """Output of :func:`simulate_truth`.

    ``states[k]`` is the true head profile at ``times[k]``; ``moisture`` and
    ``heads`` are the noisy sensor readings at that instant, one column per
    sensor node.
    """

    grid: ColumnGrid
    params: SoilParams
    times: np.ndarray
    states: np.ndarray
    moisture: np.ndarray
    heads: np.ndarray
    drainage: np.ndarray

    @property
    def n_instants(self) -> int:
        return self.times.size

    def true_moisture(self) -> np.ndarray:
        return water_content(self.states, self.params, clamp=True)

    def pairs(self, k: int) -> list[MeasurementPair]:
        return [
            MeasurementPair(node=int(node), time_index=k, moisture=float(self.moisture[k, j]),
                            head=float(self.heads[k, j]))
            for j, node in enumerate(self.grid.sensor_nodes)
        ]

    def to_csv(self, path) -> Path:
        """One row per (sampling instant, node); sensor columns blank off-sensor."""
        path = Path(path)
        theta = self.true_moisture()
        col = {int(i): j for j, i in enumerate(self.grid.sensor_index)}
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_s", "node", "h", "theta", "y_moist", "y_head"])
            for k, t in enumerate(self.times):
                for i in range(self.grid.n_nodes):
                    j = col.get(i)
                    y = ("", "") if j is None else (repr(float(self.moisture[k, j])),
                                                    repr(float(self.heads[k, j])))
                    w.writerow([repr(float(t)), i + 1, repr(float(self.states[k, i])),
                                repr(float(theta[k, i])), *y])
        return path


def simulate_truth(grid: ColumnGrid, p: SoilParams, u: ForcingSchedule, duration: float,
                   noise: NoiseConfig = NoiseConfig(), seed: int = 0, x0=None,
                   period: float = 240.0, substep: float = 1.0,
                   guard: float = 0.1) -> TruthRun:
    """Simulate the true column and its sensor readings.

    States are sampled every ``period`` seconds from ``t = 0`` to ``duration``
    inclusive. Each period the state is advanced by the transition map and
    then perturbed by process noise; readings of moisture and head are taken
    at every sampling instant on the sensor nodes.
    """
    n_periods = int(round(duration / period))
    if n_periods < 0 or abs(n_periods * period - duration) > 1e-6:
        raise ValueError("duration must be a nonnegative multiple of the sampling period")
    x = check_state(np.full(grid.n_nodes, -0.5139) if x0 is None else x0).copy()
    model = RichardsModel(grid, u, substep, guard)
    proc_rng, moist_rng, head_rng = (np.random.default_rng(s)
                                     for s in np.random.SeedSequence(seed).spawn(3))

    states = np.empty((n_periods + 1, grid.n_nodes))
    drainage = np.zeros(n_periods + 1)
    states[0] = x
    for k in range(n_periods):
        x, drained = model.transition_with_drainage(x, p, k * period, period)
        if noise.process_std > 0:
            x = np.minimum(x + noise.process_std * proc_rng.standard_normal(x.size),
                           SATURATION_CLAMP)
        states[k + 1] = x
        drainage[k + 1] = drained

    idx = grid.sensor_index
    clean = water_content(states[:, idx], p, clamp=True)
    moisture = clean + noise.moisture_std * moist_rng.standard_normal(clean.shape)
    heads = states[:, idx] + noise.head_std * head_rng.standard_normal(clean.shape)
    heads = np.minimum(heads, SATURATION_CLAMP)
    return TruthRun(grid=grid, params=p, times=period * np.arange(n_periods + 1), states=states,
                    moisture=moisture, heads=heads, drainage=drainage)
