import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agrohydro.dekf import (
    BETA_LOWER, BETA_UPPER, TABLE2_GUESSES, ConsensusSnapshot, ConvergenceMonitor, DekfBank,
    DekfFilterState, DekfTuning, centralized_ekf_run, clip_covariance, convergence_check,
    dekf_sampling_instant,
    ekf_correction, filter_update, p0_scales, pairwise_spread, permute_pairs, project_beta,
    _permutations,
)
from agrohydro.richards import MeasurementPair
from agrohydro.soil import LOAM, retention_jacobian, water_content


def noiseless_stream(n_instants, n_nodes=4, seed=0):
    rng = np.random.default_rng(seed)
    heads = -rng.uniform(0.1, 0.9, size=(n_instants, n_nodes))
    return heads, water_content(heads, LOAM)


def textbook_ekf(beta0, P0, heads, ys, tuning):
    """Independent reference: one EKF pass with inflation, written with plain matrices."""
    beta, P = beta0.astype(float).copy(), P0.astype(float).copy()
    for l, (h, y) in enumerate(zip(heads, ys)):
        p = LOAM.with_beta(beta)
        H = retention_jacobian(h, p).as_array().reshape(1, 4)
        S = H @ P @ H.T + tuning.R
        K = P @ H.T @ np.linalg.inv(S)
        beta = beta + (K * (y - water_content(h, p))).ravel()
        P = (1 + tuning.b / (l + 1)) * (P - K @ H @ P + tuning.Q)
        beta = project_beta(beta)
    return beta, P


def test_tuning_validation_and_schedules():
    t = DekfTuning()
    assert t.mu(0) == 0.3 and t.mu(9) == pytest.approx(0.3 / 10**0.1)
    assert t.inflation(0) == 0.5 and t.inflation(4) == pytest.approx(0.1)
    for bad in (dict(R=0.0), dict(chi_a=1.0), dict(b=0.0), dict(k_max=0), dict(Q=-np.eye(4)),
                dict(p_ceiling=0.0)):
        with pytest.raises(ValueError):
            DekfTuning(**bad)


def test_project_beta():
    out = project_beta([0.33, 0.37, 1.60, 0.57])
    assert out[3] == 1.01 and out[1] == pytest.approx(0.99 * 0.33)
    out = project_beta([5.0, -1.0, 100.0, 9.0])
    np.testing.assert_array_equal(out, [1.0, BETA_LOWER[1], BETA_UPPER[2], BETA_UPPER[3]])


def test_fixed_point_when_consistent():
    state = DekfFilterState(LOAM.beta.copy(), np.diag([1, 0.16, 15, 3.0]))
    pair = MeasurementPair(4, 0, float(water_content(-0.4, LOAM)), -0.4)
    peers = ConsensusSnapshot(np.tile(LOAM.beta, (4, 1)))
    out = filter_update(1, state, pair, peers, 0, DekfTuning())
    np.testing.assert_allclose(out.beta_hat, LOAM.beta, rtol=0, atol=1e-15)


def test_scalar_hand_evaluation():
    beta = np.array([0.4, 0.1, 3.0, 1.5])
    Q = 0.0225 * np.eye(4)
    new, P = ekf_correction(beta, np.eye(4), np.array([1.0, 0, 0, 0]), 0.2, 1.0, Q,
                            mu=0.3, inflation=0.5, peer_mean=beta)
    assert new[0] == pytest.approx(beta[0] + 0.1)
    np.testing.assert_array_equal(new[1:], beta[1:])
    assert P[0, 0] == pytest.approx(1.5 * (1 - 0.5 + 0.0225))
    assert P[1, 1] == pytest.approx(1.5 * (1 + 0.0225))


def test_consensus_term_absent_when_a_is_zero():
    state = DekfFilterState(np.array([0.45, 0.08, 3.5, 1.5]), np.eye(4) * 0.1)
    pair = MeasurementPair(4, 0, 0.3, -0.5)
    far = ConsensusSnapshot(np.array([state.beta_hat, [0.3, 0.05, 2.0, 1.2]]))
    near = ConsensusSnapshot(np.array([state.beta_hat, state.beta_hat]))
    t = DekfTuning(a=0.0)
    a = filter_update(0, state, pair, far, 0, t)
    b = filter_update(0, state, pair, near, 0, t)
    np.testing.assert_array_equal(a.beta_hat, b.beta_hat)


def test_peer_mean_excludes_self():
    snap = ConsensusSnapshot(np.array([[1.0] * 4, [2.0] * 4, [4.0] * 4]))
    np.testing.assert_array_equal(snap.peer_mean(0), [3.0] * 4)
    assert ConsensusSnapshot(np.ones((1, 4))).peer_mean(0) is None


def test_covariance_stays_spd_under_random_updates():
    rng = np.random.default_rng(2)
    t = DekfTuning()
    state = DekfFilterState(project_beta(TABLE2_GUESSES[1]), np.diag(t.p0_diag))
    peers = ConsensusSnapshot(TABLE2_GUESSES[[1, 2]].copy())
    for l in range(10_000):
        h = -rng.uniform(0.05, 2.0)
        pair = MeasurementPair(4, 0, float(rng.uniform(0.1, 0.4)), h)
        state = filter_update(0, state, pair, peers, l % 1000, t)
        assert np.array_equal(state.P, state.P.T)
        assert np.linalg.eigvalsh(state.P).min() > 0


def test_permutations():
    history = [[("a", 0)], [("b", 0)]]
    assert permute_pairs(history, 0, 1) == history
    hist = [list(range(12)), list(range(12))]
    one, two = permute_pairs(hist, 100, 0), permute_pairs(hist, 100, 0)
    assert one == two
    assert one[0] == [10, 11, 0, 7, 3, 5, 6, 9, 4, 2, 8, 1]
    assert one[0] != one[1]  # nodes shuffle independently
    for seed in range(5):
        assert all(sorted(p) == list(range(12)) for p in permute_pairs(hist, 7, seed))
    assert _permutations([12], 100, 0)[0].tolist() == one[0]


def test_bank_matches_python_filter_updates():
    """Compiled rounds against a loop over :func:`filter_update`."""
    heads, ys = noiseless_stream(6, seed=4)
    ys = ys + np.random.default_rng(0).normal(scale=0.002, size=ys.shape)
    tuning = DekfTuning()
    scales = p0_scales(4, 0)
    bank = DekfBank(TABLE2_GUESSES, tuning, p0_scales=scales, seed=3)
    states = [DekfFilterState(project_beta(g), np.diag(tuning.p0_diag) * s)
              for g, s in zip(TABLE2_GUESSES, scales)]
    for k in range(6):
        out = bank.sampling_instant(heads[k], ys[k], k)
        perms = _permutations([k + 1] * 4, k, 3)
        for l in range(k + 1):
            snap = ConsensusSnapshot(np.array([s.beta_hat for s in states]))
            states = [filter_update(i, s, MeasurementPair(i, k, ys[perms[i][l], i],
                                                          heads[perms[i][l], i]), snap, l, tuning)
                      for i, s in enumerate(states)]
        np.testing.assert_allclose(out, [s.beta_hat for s in states], rtol=1e-10)
        np.testing.assert_allclose(bank.P, [s.P for s in states], rtol=1e-10)


def test_single_node_without_consensus_is_textbook_ekf():
    heads, ys = noiseless_stream(5, n_nodes=1, seed=1)
    ys = ys + 0.003
    tuning = DekfTuning(a=0.0)
    guess = np.array([0.45, 0.1, 3.0, 1.4])
    bank = DekfBank(guess[None, :], tuning, seed=9)
    beta, P = guess, np.diag(tuning.p0_diag)
    traj = []
    for k in range(5):
        out = bank.sampling_instant(heads[k], ys[k], k)
        traj.append(out[0])
        perm = _permutations([k + 1], k, 9)[0]
        beta, P = textbook_ekf(beta, P, heads[:k + 1, 0][perm], ys[:k + 1, 0][perm], tuning)
        np.testing.assert_allclose(out[0], beta, rtol=1e-10)
        np.testing.assert_allclose(bank.P[0], P, rtol=1e-9)
    np.testing.assert_array_equal(
        np.array(traj), centralized_ekf_run(guess, heads, ys, tuning, seed=9))


def test_first_instant_runs_one_step_and_buffer_is_capped():
    tuning = DekfTuning(k_max=3)
    bank = DekfBank(TABLE2_GUESSES, tuning)
    heads, ys = noiseless_stream(6)
    pairs = [MeasurementPair(i + 1, 0, ys[0, i], heads[0, i]) for i in range(4)]
    dekf_sampling_instant(bank, pairs, 0)
    assert len(bank.heads[0]) == 1
    for k in range(1, 6):
        bank.sampling_instant(heads[k], ys[k], k)
    assert len(bank.heads[0]) == 3
    np.testing.assert_array_equal(list(bank.heads[2]), heads[3:, 2])
    with pytest.raises(ValueError):
        bank.sampling_instant(heads[0, :3], ys[0, :3])
    with pytest.raises(ValueError):
        bank.sampling_instant(-heads[0], ys[0])


def test_clip_covariance():
    rng = np.random.default_rng(8)
    A = rng.normal(size=(4, 4))
    P = A @ A.T + np.diag([1e7, 0, 0, 0])
    out = clip_covariance(P, 1e3)
    lam = np.linalg.eigvalsh(out)
    assert lam.max() == pytest.approx(1e3) and lam.min() > 0
    np.testing.assert_allclose(np.sort(lam)[:3], np.sort(np.linalg.eigvalsh(P))[:3], rtol=1e-6)
    assert clip_covariance(np.eye(4), 1e3) is not None
    np.testing.assert_array_equal(clip_covariance(np.eye(4), 1e3), np.eye(4))


def test_bank_applies_the_ceiling_like_the_reference():
    heads, ys = noiseless_stream(4, seed=6)
    tuning = DekfTuning(p_ceiling=5.0)
    bank = DekfBank(TABLE2_GUESSES, tuning)
    states = [DekfFilterState(project_beta(g), np.diag(tuning.p0_diag)) for g in TABLE2_GUESSES]
    for k in range(4):
        bank.sampling_instant(heads[k], ys[k], k)
        perms = _permutations([k + 1] * 4, k, 0)
        for l in range(k + 1):
            snap = ConsensusSnapshot(np.array([s.beta_hat for s in states]))
            states = [filter_update(i, s, MeasurementPair(i, k, ys[perms[i][l], i],
                                                          heads[perms[i][l], i]), snap, l, tuning)
                      for i, s in enumerate(states)]
    assert max(np.linalg.eigvalsh(P).max() for P in bank.P) <= 5.0 * (1 + 1e-12)
    np.testing.assert_allclose(bank.P, [s.P for s in states], rtol=1e-9, atol=1e-12)


def test_truth_survives_weakly_exciting_data():
    # nearly uniform heads leave directions unobserved; without a ceiling P grows
    # geometrically and round-off is amplified away from the truth
    heads = -0.5139 - 1e-3 * np.sin(np.arange(40)[:, None] / 7 + np.arange(4))
    ys = water_content(heads, LOAM)
    bank = DekfBank(np.tile(LOAM.beta, (4, 1)))
    for k in range(40):
        out = bank.sampling_instant(heads[k], ys[k], k)
    np.testing.assert_allclose(out, np.tile(LOAM.beta, (4, 1)), atol=1e-9)


def test_truth_is_a_fixed_point():
    heads, ys = noiseless_stream(20)
    bank = DekfBank(np.tile(LOAM.beta, (4, 1)))
    for k in range(20):
        out = bank.sampling_instant(heads[k], ys[k], k)
    np.testing.assert_allclose(out, np.tile(LOAM.beta, (4, 1)), rtol=0, atol=1e-9)
    traj = centralized_ekf_run(LOAM.beta, heads, ys)
    np.testing.assert_allclose(traj, np.tile(LOAM.beta, (20, 1)), atol=1e-9)


def test_consensus_contraction_without_innovation():
    # vanishing gain: tiny P, no process noise, huge R
    tuning = DekfTuning(Q=1e-30 * np.eye(4), R=1e12, b=1e-12, p0_diag=(1e-30,) * 4)
    rng = np.random.default_rng(5)
    start = np.array([project_beta(b) for b in LOAM.beta + rng.normal(scale=0.05, size=(4, 4))])
    bank = DekfBank(start, tuning)
    heads, ys = noiseless_stream(1)
    spreads = [pairwise_spread(bank.beta)]
    for l in range(8):
        bank.heads = [type(q)([heads[0, i]], maxlen=1) for i, q in enumerate(bank.heads)]
        bank.moisture = [type(q)([ys[0, i]], maxlen=1) for i, q in enumerate(bank.moisture)]
        bank.sampling_instant(heads[0], ys[0], l)
        spreads.append(pairwise_spread(bank.beta))
    assert all(b <= a + 1e-15 for a, b in zip(spreads, spreads[1:]))
    assert spreads[-1] < spreads[0]


def test_convergence_check_examples():
    const = np.tile(LOAM.beta, (15, 4, 1))
    res = convergence_check(const)
    assert res.converged and res.tau0 == 10
    split = const.copy()
    split[:, 1, 0] += 2e-3
    assert not convergence_check(split).converged
    mon = ConvergenceMonitor()
    for k, b in enumerate(const):
        mon.update(k, b)
    assert mon.tau0 == 10


@given(seed=st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_monitor_agrees_with_batch(seed):
    rng = np.random.default_rng(seed)
    hist = np.tile(LOAM.beta, (40, 4, 1)) + rng.choice([0, 1e-4, 2e-3], size=(40, 4, 1), p=[.8, .15, .05])
    mon = ConvergenceMonitor()
    for k, b in enumerate(hist):
        mon.update(k, b)
    assert mon.tau0 == convergence_check(hist).tau0


def test_p0_scales_reproducible():
    a, b = p0_scales(4, 0), p0_scales(4, 0)
    np.testing.assert_array_equal(a, b)
    assert np.all((a > 0) & (a < 1))
    assert not np.array_equal(a, p0_scales(4, 1))
