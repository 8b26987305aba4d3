import numpy as np
import pytest
from scipy.optimize import linprog

from caql.lp import INFEASIBLE, OPTIMAL, solve_lp
from tests.oracles import vertex_enum_lp


def test_single_variable_box():
    res = solve_lp([1.0], np.zeros((0, 1)), [], [], [-2.0], [2.0])
    assert res.status == OPTIMAL and res.objective == 2.0


def test_contradictory_bounds_infeasible():
    # z <= -1 and z >= 0
    res = solve_lp([1.0], [[1.0]], [-np.inf], [-1.0], [0.0], [5.0])
    assert res.status == INFEASIBLE


def test_infeasible_rows():
    A = [[1.0, 1.0], [1.0, 1.0]]
    res = solve_lp([1.0, 0.0], A, [3.0, -np.inf], [np.inf, 1.0], [-5, -5], [5, 5])
    assert res.status == INFEASIBLE


def test_equality_row():
    A = [[1.0, -1.0]]
    res = solve_lp([1.0, 1.0], A, [0.5], [0.5], [0, 0], [1, 1])
    assert res.status == OPTIMAL
    assert res.objective == pytest.approx(1.5, abs=1e-9)
    assert res.x[0] - res.x[1] == pytest.approx(0.5, abs=1e-9)


def _random_lp(rng, n, m):
    A = rng.normal(size=(m, n))
    x0 = rng.uniform(-1, 1, size=n)  # a feasible point, most of the time
    act = A @ x0
    rl = np.where(rng.random(m) < 0.5, act - rng.uniform(0, 1, m), -np.inf)
    ru = np.where(rng.random(m) < 0.7, act + rng.uniform(0, 1, m), np.inf)
    if rng.random() < 0.15:
        i = rng.integers(m)
        rl[i], ru[i] = act[i] + 3.0, act[i] + 4.0
    cl, cu = -rng.uniform(1, 3, n), rng.uniform(1, 3, n)
    return rng.normal(size=n), A, rl, ru, cl, cu


def test_matches_vertex_enumeration():
    rng = np.random.default_rng(0)
    checked = infeasible = 0
    for _ in range(300):
        n = int(rng.integers(1, 4))
        c, A, rl, ru, cl, cu = _random_lp(rng, n, int(rng.integers(1, 5)))
        ref = vertex_enum_lp(c, A, rl, ru, cl, cu)
        res = solve_lp(c, A, rl, ru, cl, cu)
        if ref is None:
            assert res.status == INFEASIBLE
            infeasible += 1
        else:
            assert res.status == OPTIMAL
            assert res.objective == pytest.approx(ref[0], abs=1e-7)
            checked += 1
    assert checked > 100 and infeasible > 5


def test_matches_highs_on_larger_instances():
    rng = np.random.default_rng(1)
    for _ in range(40):
        c, A, rl, ru, cl, cu = _random_lp(rng, 30, 60)
        res = solve_lp(c, A, rl, ru, cl, cu)
        A_ub = np.vstack([A[np.isfinite(ru)], -A[np.isfinite(rl)]])
        b_ub = np.concatenate([ru[np.isfinite(ru)], -rl[np.isfinite(rl)]])
        ref = linprog(-c, A_ub=A_ub, b_ub=b_ub, bounds=list(zip(cl, cu)), method="highs")
        if ref.status == 2:
            assert res.status == INFEASIBLE
        else:
            assert res.status == OPTIMAL
            assert res.objective == pytest.approx(-ref.fun, abs=1e-6)


def test_deterministic():
    rng = np.random.default_rng(2)
    c, A, rl, ru, cl, cu = _random_lp(rng, 10, 20)
    a, b = solve_lp(c, A, rl, ru, cl, cu), solve_lp(c, A, rl, ru, cl, cu)
    assert a.status == b.status
    if a.x is not None:
        assert a.x.tobytes() == b.x.tobytes()
