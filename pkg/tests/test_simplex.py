import numpy as np
import pytest

from hemsim.simplex import (
    INFEASIBLE,
    OPTIMAL,
    UNBOUNDED,
    SimplexIterationError,
    solve_bounded_lp,
)

from lp_oracle import vertex_enumeration_minimum


def test_bound_attaining_optimum():
    # minimize -x, x in [0, 1], no equalities
    sol = solve_bounded_lp([-1.0], np.zeros((0, 1)), [], [0.0], [1.0])
    assert sol.status == OPTIMAL
    assert sol.objective == pytest.approx(-1.0)
    assert sol.x[0] == pytest.approx(1.0)


def test_forced_equality():
    # minimize x + y s.t. x + y = 1, both in [0, 1]
    sol = solve_bounded_lp([1.0, 1.0], [[1.0, 1.0]], [1.0], [0.0, 0.0], [1.0, 1.0])
    assert sol.status == OPTIMAL
    assert sol.objective == pytest.approx(1.0)


def test_prefers_cheap_variable():
    # minimize 3x + y s.t. x + y = 1 -> y = 1
    sol = solve_bounded_lp([3.0, 1.0], [[1.0, 1.0]], [1.0], [0.0, 0.0], [1.0, 1.0])
    assert sol.objective == pytest.approx(1.0)
    assert sol.x[1] == pytest.approx(1.0)


def test_infeasible_detected():
    # x + y = 5 with x, y in [0, 1]
    sol = solve_bounded_lp([1.0, 1.0], [[1.0, 1.0]], [5.0], [0.0, 0.0], [1.0, 1.0])
    assert sol.status == INFEASIBLE
    assert sol.x is None


def test_unbounded_detected():
    # minimize -x, x - y = 0, x,y in [0, inf)
    sol = solve_bounded_lp(
        [-1.0, 0.0], [[1.0, -1.0]], [0.0], [0.0, 0.0], [np.inf, np.inf]
    )
    assert sol.status == UNBOUNDED


def test_nonzero_lower_bounds():
    # minimize x + 2y s.t. x + y = 4, x in [1, 2], y in [1, 5]
    sol = solve_bounded_lp([1.0, 2.0], [[1.0, 1.0]], [4.0], [1.0, 1.0], [2.0, 5.0])
    assert sol.status == OPTIMAL
    assert sol.x[0] == pytest.approx(2.0)
    assert sol.x[1] == pytest.approx(2.0)
    assert sol.objective == pytest.approx(6.0)


def test_negative_bounds():
    # minimize x, x + y = 0, x in [-3, 3], y in [-1, 1]
    sol = solve_bounded_lp([1.0, 0.0], [[1.0, 1.0]], [0.0], [-3.0, -1.0], [3.0, 1.0])
    assert sol.status == OPTIMAL
    assert sol.x[0] == pytest.approx(-1.0)


def test_free_variables_rejected():
    with pytest.raises(ValueError):
        solve_bounded_lp([1.0], np.zeros((0, 1)), [], [-np.inf], [np.inf])


def test_dimension_validation():
    with pytest.raises(ValueError):
        solve_bounded_lp([1.0, 2.0], [[1.0]], [1.0], [0.0], [1.0])
    with pytest.raises(ValueError):
        solve_bounded_lp([np.nan], np.zeros((0, 1)), [], [0.0], [1.0])
    with pytest.raises(ValueError):
        solve_bounded_lp([1.0], np.zeros((0, 1)), [], [2.0], [1.0])


def test_iteration_cap_raises():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(4, 10))
    x0 = rng.uniform(0.2, 0.8, size=10)
    b = a @ x0
    with pytest.raises(SimplexIterationError):
        solve_bounded_lp(rng.normal(size=10), a, b, np.zeros(10), np.ones(10), max_iterations=1)


def _random_feasible_lp(rng, m, n):
    a = rng.normal(size=(m, n))
    lower = rng.uniform(-2.0, 0.0, size=n)
    upper = lower + rng.uniform(0.5, 3.0, size=n)
    x0 = rng.uniform(lower, upper)
    b = a @ x0
    c = rng.normal(size=n)
    return c, a, b, lower, upper


def test_random_lps_match_vertex_enumeration_oracle():
    rng = np.random.default_rng(42)
    checked = 0
    for trial in range(40):
        m = int(rng.integers(1, 4))
        n = int(rng.integers(m + 1, 9))
        c, a, b, lower, upper = _random_feasible_lp(rng, m, n)
        sol = solve_bounded_lp(c, a, b, lower, upper)
        assert sol.status == OPTIMAL, f"trial {trial} unexpectedly {sol.status}"
        oracle = vertex_enumeration_minimum(c, a, b, lower, upper)
        assert oracle is not None
        assert sol.objective == pytest.approx(oracle, abs=1e-7), f"trial {trial}"
        checked += 1
    assert checked == 40


def test_random_larger_lps_against_oracle_twelve_vars():
    rng = np.random.default_rng(7)
    for trial in range(10):
        m = int(rng.integers(2, 4))
        n = 12
        c, a, b, lower, upper = _random_feasible_lp(rng, m, n)
        sol = solve_bounded_lp(c, a, b, lower, upper)
        assert sol.status == OPTIMAL
        oracle = vertex_enumeration_minimum(c, a, b, lower, upper)
        assert sol.objective == pytest.approx(oracle, abs=1e-7), f"trial {trial}"


def test_degenerate_problems_terminate():
    # Many redundant/tied constraints; Bland's rule must still terminate.
    rng = np.random.default_rng(11)
    for _ in range(20):
        n = 8
        a_row = rng.choice([0.0, 1.0, -1.0], size=n)
        a = np.vstack([a_row, a_row * 2.0, rng.choice([0.0, 1.0], size=n)])
        x0 = np.zeros(n)
        b = a @ x0
        sol = solve_bounded_lp(rng.normal(size=n), a, b, np.zeros(n), np.ones(n))
        assert sol.status in (OPTIMAL, UNBOUNDED)


def test_feasibility_of_reported_optimum():
    rng = np.random.default_rng(3)
    for _ in range(20):
        m = int(rng.integers(1, 5))
        n = int(rng.integers(m + 1, 14))
        c, a, b, lower, upper = _random_feasible_lp(rng, m, n)
        sol = solve_bounded_lp(c, a, b, lower, upper)
        assert sol.status == OPTIMAL
        assert np.max(np.abs(a @ sol.x - b)) <= 1e-8
        assert np.all(sol.x >= lower - 1e-9)
        assert np.all(sol.x <= upper + 1e-9)
        assert sol.objective == pytest.approx(float(c @ sol.x), abs=1e-9)
