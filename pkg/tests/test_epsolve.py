import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from calmkit.epsolve import (DivergenceError, FeasibleSet, merge_solutions, measure_excess, solve_grid,
                             solve_projected_iteration)
from calmkit.metricsets import PointSet
from calmkit.trifunc import Trifunction, variational_trifunction


def pe(u, v, w, mu):
    return np.sum((np.asarray(w) - mu) * (np.asarray(v) - np.asarray(u)), axis=-1)


F_PE = Trifunction(pe, batched=True)
K5 = FeasibleSet.grid([0, 0.25, 0.5, 0.75, 1])


def test_grid_examples():
    assert solve_grid(F_PE, K5, 0.5).points.points.ravel().tolist() == [0.5]
    assert solve_grid(F_PE, K5, 2.0).points.points.ravel().tolist() == [1.0]
    zero = Trifunction(lambda u, v, w, mu: 0.0)
    assert len(solve_grid(zero, K5, 0.0)) == 5


def test_grid_unbatched_matches_batched():
    F = Trifunction(lambda u, v, w, mu: float((w[0] - mu) * (v[0] - u[0])))
    a = solve_grid(F, K5, 0.3, tol=0.01)
    b = solve_grid(F_PE, K5, 0.3, tol=0.01)
    assert np.array_equal(a.points.points, b.points.points)


def test_feasible_set_validation():
    with pytest.raises(ValueError):
        FeasibleSet.grid([])
    with pytest.raises(ValueError):
        FeasibleSet.box([1.0], [0.0])
    with pytest.raises(ValueError):
        FeasibleSet.ball([0.0], 0.0)
    with pytest.raises(ValueError):
        solve_grid(F_PE, FeasibleSet.box([0.0], [1.0]), 0.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.5, 1.5), st.floats(0, 0.05), st.floats(0, 0.05))
def test_grid_soundness_and_refinement(mu, t1, t2):
    K = FeasibleSet.interval_grid(0, 1, 101)
    lo, hi = sorted((t1, t2))
    S_lo, S_hi = solve_grid(F_PE, K, mu, lo), solve_grid(F_PE, K, mu, hi)
    # soundness: re-enumerate independently
    for u in S_lo.points:
        assert min((u[0] - mu) * (z - u[0]) for z in np.linspace(0, 1, 101)) >= -lo - 1e-15
    # refinement: a smaller tolerance yields a subset
    hi_set = {float(x) for x in S_hi.points.points.ravel()}
    assert all(float(x) in hi_set for x in S_lo.points.points.ravel())


def test_projected_examples():
    G = lambda u, mu: mu - u
    K = FeasibleSet.box([0.0], [1.0])
    S = solve_projected_iteration(G, K, 0.3, step=0.5)
    assert S.points.points[0, 0] == pytest.approx(0.3, abs=1e-9)
    assert S.diagnostics["certification"] == "sampled"
    S = solve_projected_iteration(G, K, 2.0, step=0.5)
    assert S.points.points[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert S.residuals[0] >= -1e-12


def test_projected_divergence_and_guards():
    lam = 100.0
    G = lambda u, mu: lam * (mu - u)
    wide = FeasibleSet.box([-1e9], [1e9])
    with pytest.raises(DivergenceError):
        solve_projected_iteration(G, wide, 1.0, step=3.0 / lam, start=[2.0])
    with pytest.raises(ValueError):
        solve_projected_iteration(Trifunction(pe), wide, 1.0)
    with pytest.raises(ValueError):
        solve_projected_iteration(G, K5, 1.0)


def test_projected_stall_returns_empty():
    G = lambda u, mu: mu - u
    S = solve_projected_iteration(G, FeasibleSet.box([0.0], [1.0]), 0.3, step=1e-6, max_iter=10)
    assert len(S) == 0 and S.diagnostics["stalled"]


def test_projected_ball_and_trifunction_operator():
    G = lambda u, mu: mu - u
    F = variational_trifunction(G)
    K = FeasibleSet.ball([0.0, 0.0], 1.0)
    S = solve_projected_iteration(F, K, np.array([3.0, 4.0]), step=0.5)
    assert S.points.points[0] == pytest.approx([0.6, 0.8], abs=1e-9)


def test_projected_agrees_with_grid():
    # variational F on a box vs the induced grid
    G = lambda u, mu: -(u + 0.4 * np.sin(u) - mu)
    F = variational_trifunction(G)
    S_it = solve_projected_iteration(F, FeasibleSet.box([-1.0], [1.0]), 0.3, step=0.5)
    K = FeasibleSet.interval_grid(-1, 1, 401)
    F_b = Trifunction(lambda u, v, w, mu: -np.sum(G(np.asarray(w), mu) * (np.asarray(v) - np.asarray(u)), axis=-1),
                      batched=True)
    h = 2 / 400
    S_g = solve_grid(F_b, K, 0.3, tol=2 * h)
    assert len(S_g) >= 1
    assert min(abs(S_it.points.points[0, 0] - x) for x in S_g.points.points.ravel()) <= h


def test_measure_excess_examples():
    mk = lambda pts: type("S", (), {"points": PointSet.of(pts, dim=1)})()
    assert measure_excess(mk([]), mk([0.5]), [0.5], 1.0) == 0.0
    assert measure_excess(mk([0.52]), mk([0.5]), [0.5], 1.0) == pytest.approx(0.02)
    assert measure_excess(mk([0.52]), mk([]), [0.5], 1.0) == math.inf
    assert measure_excess(mk([3.0]), mk([0.5]), [0.5], 1.0) == 0.0     # outside V


def test_merge_solutions_dedups():
    G = lambda u, mu: mu - u
    K = FeasibleSet.box([0.0], [1.0])
    runs = [solve_projected_iteration(G, K, 0.3, step=0.5, start=[s]) for s in (0.0, 1.0, 0.5)]
    M = merge_solutions(runs, 1e-6)
    assert len(M) == 1
    with pytest.raises(ValueError):
        merge_solutions([], 1e-6)


def test_box_test_points_deterministic():
    K = FeasibleSet.box([0.0, -1.0], [1.0, 1.0])
    a, b = K.test_points(64, seed=3), K.test_points(64, seed=3)
    assert np.array_equal(a, b)
    assert all(K.contains(z, 1e-12) for z in a)
