import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agrohydro.richards import (
    ColumnGrid, ForcingSchedule, InstabilityError, NoiseConfig, RichardsModel, euler_step,
    interface_conductivity, interface_fluxes, simulate_truth, transition,
)
from agrohydro.soil import LOAM, hydraulic_conductivity, water_content

DATA = Path(__file__).parent / "data"
Q_PAPER = 1.944e-3 / 3600.0  # m/s
FORCING = ForcingSchedule.daily(Q_PAPER)


def straight_line_step(h, p, q_top, dt, dz):
    """Plain-Python explicit step written directly from the closed forms."""
    m = 1 - 1 / p.n
    span = p.theta_s - p.theta_r

    def se(x):
        return (1 + (-p.alpha * x) ** p.n) ** (-m)

    def k(x):
        s = se(x)
        return p.k_sat * s ** p.tortuosity * (1 - (1 - s ** (1 / m)) ** m) ** 2

    def c(x):
        s = -p.alpha * x
        return p.n * p.alpha * span * m * s ** (p.n - 1) * (1 + s ** p.n) ** (-(2 - 1 / p.n))

    n = len(h)
    flux = [q_top]
    for j in range(n - 1):
        flux.append(k(0.5 * (h[j] + h[j + 1])) * ((h[j] - h[j + 1]) / dz + 1))
    flux.append(k(h[-1]))
    return [h[i] + dt * (flux[i] - flux[i + 1]) / (dz * c(h[i])) for i in range(n)]


def test_grid_geometry():
    g = ColumnGrid()
    assert g.dz == pytest.approx(0.67 / 32)
    np.testing.assert_allclose(g.sensor_depths * 100, [7.33, 24.08, 40.83, 57.58], atol=0.01)
    np.testing.assert_array_equal(g.sensor_index, [3, 11, 19, 27])


@pytest.mark.parametrize("kwargs", [
    dict(sensor_nodes=(4, 4)), dict(sensor_nodes=(0, 3)), dict(sensor_nodes=(33,)),
    dict(depth_total=0.0), dict(bottom="leaky"),
])
def test_grid_rejects_bad_config(kwargs):
    with pytest.raises(ValueError):
        ColumnGrid(**kwargs)


def test_forcing_schedule():
    u = ForcingSchedule.daily(2.0, hours=8)
    np.testing.assert_array_equal(u.flux_at([0, 3600, 8 * 3600 - 1, 8 * 3600, 86400 + 10]),
                                  [2, 2, 2, 0, 2])
    assert ForcingSchedule().flux_at(5.0) == 0.0
    with pytest.raises(ValueError):
        ForcingSchedule(steps=((10, 1), (5, 0)))


def test_interface_conductivity_examples():
    assert interface_conductivity(-0.3, -0.3, LOAM) == hydraulic_conductivity(-0.3, LOAM)
    assert interface_conductivity(-0.4, -0.6, LOAM) == hydraulic_conductivity(-0.5, LOAM)


@given(a=st.floats(-5, -1e-4), b=st.floats(-5, -1e-4))
@settings(max_examples=50, deadline=None)
def test_interface_conductivity_symmetric(a, b):
    assert interface_conductivity(a, b, LOAM) == interface_conductivity(b, a, LOAM)


def test_hydrostatic_profile_is_steady():
    g = ColumnGrid(bottom="sealed")
    h = -0.8 + g.dz * np.arange(g.n_nodes)  # head rises by dz per node downward
    out = euler_step(h, LOAM, 0.0, 1.0, g)
    np.testing.assert_allclose(out, h, atol=1e-12, rtol=0)


def test_uniform_profile_without_input_only_drains():
    h = np.full(32, -0.5139)
    out = euler_step(h, LOAM, 0.0, 1.0)
    assert out[0] <= h[0]
    f = interface_fluxes(h, LOAM, 0.0, ColumnGrid())
    np.testing.assert_allclose(f[1:-1], hydraulic_conductivity(-0.5139, LOAM))


def test_single_step_matches_straight_line_oracle():
    h = [-0.5139] * 32
    expected = straight_line_step(h, LOAM, Q_PAPER, 1.0, 0.67 / 32)
    np.testing.assert_allclose(euler_step(np.array(h), LOAM, Q_PAPER, 1.0), expected,
                               rtol=1e-12, atol=0)


def test_random_profile_step_matches_oracle():
    rng = np.random.default_rng(3)
    h = -rng.uniform(0.2, 0.8, 32)
    expected = straight_line_step(list(h), LOAM, Q_PAPER, 0.5, 0.67 / 32)
    np.testing.assert_allclose(euler_step(h, LOAM, Q_PAPER, 0.5), expected, rtol=1e-11)


def test_guard_trips_on_oversized_step():
    with pytest.raises(InstabilityError):
        euler_step(np.full(32, -0.01), LOAM, 1e-3, 600.0)
    with pytest.raises(ValueError):
        euler_step(np.full(32, -0.5), LOAM, 0.0, 0.0)
    with pytest.raises(ValueError):
        euler_step(np.full(32, 0.1), LOAM, 0.0, 1.0)


def test_transition_composition():
    x = np.full(32, -0.5139)
    model = RichardsModel(forcing=FORCING)
    assert np.array_equal(model.transition(x, LOAM, 0.0, 1.0), euler_step(x, LOAM, Q_PAPER, 1.0))
    full = model.transition(x, LOAM, 0.0, 1200.0)
    half = model.transition(model.transition(x, LOAM, 0.0, 600.0), LOAM, 600.0, 600.0)
    assert np.array_equal(full, half)
    with pytest.raises(ValueError):
        model.transition(x, LOAM, 0.0, 1.5)


def test_transition_regression_pin():
    x = np.full(32, -0.5139)
    out = transition(x, LOAM, FORCING, 0.0, 1200.0, substep=1.0)
    np.testing.assert_allclose(out, np.load(DATA / "transition_20min.npy"), rtol=1e-12)


def test_transition_sensitivity_matches_finite_differences():
    rng = np.random.default_rng(1)
    x = -rng.uniform(0.3, 0.6, 32)
    model = RichardsModel(forcing=FORCING, substep=10.0)
    out, dx, dk = model.transition_sensitivity(x, LOAM, 0.0, 600.0)
    np.testing.assert_allclose(out, model.transition(x, LOAM, 0.0, 600.0), rtol=1e-14)
    for j in (0, 5, 31):
        e = np.zeros(32)
        e[j] = 1e-6
        fd = (model.transition(x + e, LOAM, 0.0, 600.0)
              - model.transition(x - e, LOAM, 0.0, 600.0)) / 2e-6
        np.testing.assert_allclose(dx[:, j], fd, rtol=1e-5, atol=1e-9)
    dks = 1e-12
    fd = (model.transition(x, LOAM.with_k_sat(LOAM.k_sat + dks), 0.0, 600.0)
          - model.transition(x, LOAM.with_k_sat(LOAM.k_sat - dks), 0.0, 600.0)) / (2 * dks)
    np.testing.assert_allclose(dk, fd, rtol=1e-5, atol=1e-3)


def test_mass_balance_per_hour():
    g = ColumnGrid()
    model = RichardsModel(grid=g, forcing=FORCING)
    x = np.full(32, -0.5139)
    for hour in range(24):
        t0 = hour * 3600.0
        stored0 = water_content(x, LOAM).sum() * g.dz
        x, drained = model.transition_with_drainage(x, LOAM, t0, 3600.0)
        inflow = FORCING.flux_at(t0 + np.arange(3600.0)).sum()
        change = water_content(x, LOAM).sum() * g.dz - stored0
        expected = inflow - drained
        scale = max(abs(expected), abs(inflow), drained)
        assert abs(change - expected) <= 1e-3 * scale, hour


def test_temporal_refinement():
    x = np.full(32, -0.5139)
    a = RichardsModel(forcing=FORCING, substep=1.0).transition(x, LOAM, 0.0, 86400.0)
    b = RichardsModel(forcing=FORCING, substep=0.5).transition(x, LOAM, 0.0, 86400.0)
    assert np.max(np.abs(a - b)) <= 1e-4


def test_simulate_truth_zero_noise_and_determinism():
    g = ColumnGrid()
    quiet = NoiseConfig(0.0, 0.0, 0.0)
    run = simulate_truth(g, LOAM, FORCING, 3600.0, noise=quiet)
    np.testing.assert_array_equal(run.heads, run.states[:, g.sensor_index])
    np.testing.assert_array_equal(run.moisture, water_content(run.states[:, g.sensor_index], LOAM))
    pair = run.pairs(3)[1]
    assert (pair.node, pair.time_index, pair.head) == (12, 3, run.states[3, 11])

    a = simulate_truth(g, LOAM, FORCING, 3600.0, seed=5)
    b = simulate_truth(g, LOAM, FORCING, 3600.0, seed=5)
    c = simulate_truth(g, LOAM, FORCING, 3600.0, seed=6)
    assert np.array_equal(a.moisture, b.moisture) and np.array_equal(a.states, b.states)
    assert not np.array_equal(a.moisture, c.moisture)
    with pytest.raises(ValueError):
        simulate_truth(g, LOAM, FORCING, 100.0)


def test_truth_moisture_stays_in_range_for_50_hours():
    run = simulate_truth(ColumnGrid(), LOAM, FORCING, 50 * 3600.0,
                         noise=NoiseConfig(1e-4, 0.005, 0.005), seed=0)
    theta = run.true_moisture()[:, 3]
    assert np.all((theta > LOAM.theta_r) & (theta < LOAM.theta_s))
    assert np.all(run.states < 0)


def test_truth_csv(tmp_path):
    run = simulate_truth(ColumnGrid(), LOAM, FORCING, 480.0, seed=1)
    path = run.to_csv(tmp_path / "truth.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "time_s,node,h,theta,y_moist,y_head"
    assert len(lines) == 1 + 3 * 32
    row4 = lines[4].split(",")
    assert row4[1] == "4" and row4[4] != ""
    assert lines[1].split(",")[4] == ""
    assert math.isclose(float(lines[1].split(",")[2]), -0.5139)
