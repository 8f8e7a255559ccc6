import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agrohydro.nlsq import LeastSquaresSpec, forward_difference_jacobian, minimize


def rosenbrock(x):
    return np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])


def rosenbrock_jac(x):
    return np.array([[-20.0 * x[0], 10.0], [-1.0, 0.0]])


def test_shifted_identity_solved_in_one_step():
    c = np.array([1.5, -2.0, 0.25])
    rep = minimize(LeastSquaresSpec(lambda x: x - c, 3, jacobian=lambda x: np.eye(3)), np.zeros(3))
    np.testing.assert_allclose(rep.x, c, atol=1e-15)
    assert rep.iterations == 1 and rep.reason == "tolerance"


def test_active_upper_bound():
    c = np.array([1.0, 2.0])
    spec = LeastSquaresSpec(lambda x: x - c, 2, jacobian=lambda x: np.eye(2), upper=c - 1)
    rep = minimize(spec, np.array([-3.0, -3.0]))
    np.testing.assert_allclose(rep.x, c - 1)
    assert rep.projected_gradient == 0.0 and rep.success


def test_rosenbrock_analytic_and_numeric():
    for jac in (rosenbrock_jac, None):
        rep = minimize(LeastSquaresSpec(rosenbrock, 2, jacobian=jac), np.array([-1.2, 1.0]))
        np.testing.assert_allclose(rep.x, [1.0, 1.0], atol=1e-8)
        assert rep.iterations <= 100


def test_rosenbrock_bounded_respects_box():
    calls = []

    def r(x):
        calls.append(x.copy())
        return rosenbrock(x)

    lo, hi = np.array([-2.0, -2.0]), np.array([2.0, 0.5])
    rep = minimize(LeastSquaresSpec(r, 2, jacobian=rosenbrock_jac, lower=lo, upper=hi),
                   np.array([-1.2, 0.0]))
    assert rep.success and rep.x[1] == 0.5
    for x in calls:
        assert np.all(x >= lo) and np.all(x <= hi)


@given(seed=st.integers(0, 2**31 - 1), m=st.integers(3, 12), n=st.integers(1, 3))
@settings(max_examples=60, deadline=None)
def test_linear_exactness(seed, m, n):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(m, n)) + 3 * np.eye(m, n)
    b = rng.normal(size=m)
    rep = minimize(LeastSquaresSpec(lambda x: A @ x - b, n, jacobian=lambda x: A), np.zeros(n),
                   max_iter=1)
    sol = np.linalg.lstsq(A, b, rcond=None)[0]
    np.testing.assert_allclose(rep.x, sol, atol=1e-10 * max(1.0, np.abs(sol).max()))


def test_descent_on_random_bounded_quadratics():
    rng = np.random.default_rng(11)
    for trial in range(1000):
        n = rng.integers(1, 6)
        A = rng.normal(size=(n + 2, n))
        b = rng.normal(size=n + 2) * 5
        lo = -rng.uniform(0.1, 2, n)
        hi = rng.uniform(0.1, 2, n)
        seen = []

        def r(x):
            assert np.all(x >= lo) and np.all(x <= hi)
            return A @ x - b

        spec = LeastSquaresSpec(r, n, jacobian=lambda x: A, lower=lo, upper=hi)
        rep = minimize(spec, rng.uniform(lo, hi), max_iter=30)
        assert np.all(np.diff(rep.costs) <= 0), trial
        assert rep.cost <= rep.costs[0]
        assert np.all(rep.x >= lo) and np.all(rep.x <= hi)


def test_nonfinite_trial_backtracks():
    # residual blows up past x = 1, so full steps toward 3 must be shortened
    def r(x):
        return np.array([x[0] - 3.0]) if x[0] < 1.0 else np.array([np.nan])

    rep = minimize(LeastSquaresSpec(r, 1, jacobian=lambda x: np.ones((1, 1))), np.array([0.0]),
                   max_iter=20)
    assert np.isfinite(rep.cost) and rep.x[0] < 1.0 and rep.cost < 4.5


def test_preconditions():
    spec = LeastSquaresSpec(lambda x: x, 2, lower=np.zeros(2), upper=np.ones(2))
    with pytest.raises(ValueError):
        minimize(spec, np.array([2.0, 0.0]))
    with pytest.raises(ValueError):
        minimize(LeastSquaresSpec(lambda x: x * np.nan, 1), np.zeros(1))
    with pytest.raises(ValueError):
        LeastSquaresSpec(lambda x: x, 2, lower=np.ones(2), upper=np.zeros(2))


def test_forward_difference_uses_backward_step_at_upper_bound():
    spec = LeastSquaresSpec(lambda x: x ** 2, 2, upper=np.array([1.0, 1.0]))
    x = np.array([1.0, 0.3])
    J = forward_difference_jacobian(spec, x, spec.residual(x))
    np.testing.assert_allclose(J, np.diag(2 * x), rtol=1e-6)


def test_sparse_path_matches_dense():
    rng = np.random.default_rng(0)
    n = 520
    diag = rng.uniform(1, 2, n)
    b = rng.normal(size=n)
    import scipy.sparse as sp
    A = sp.diags([diag, 0.1 * np.ones(n - 1)], [0, 1]).tocsr()
    rep = minimize(LeastSquaresSpec(lambda x: A @ x - b, n, jacobian=lambda x: A), np.zeros(n))
    np.testing.assert_allclose(A @ rep.x, b, atol=1e-9)
