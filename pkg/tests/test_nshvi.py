import json
import math

import numpy as np
import pytest

from calmkit import nshvi as N
from calmkit.calmcert import CalmnessCase, HypothesesFail
from calmkit.epsolve import FeasibleSet
from calmkit.trifunc import make_superpotential, scaled_norm

from oracles import c1_grid_oracle, edge_integral_of_trace, power_iteration_trace


@pytest.fixture(scope="module")
def m2():
    return N.assemble(N.build_basis(2), 1.0, N.trig_forcing())


@pytest.fixture(scope="module")
def m4():
    return N.assemble(N.build_basis(4), 0.7, N.trig_forcing())


REF = N.linear_control((0.5, -0.3), 0.5 * np.eye(2))


# basis and assembly

def test_basis_examples():
    b1 = N.build_basis(1)
    assert b1.gram.shape == (1, 1) and b1.gram[0, 0] > 0
    b4 = N.build_basis(4)
    assert b4.min_eigenvalue > 0
    assert np.allclose(b4.gram, b4.gram.T)
    with pytest.raises(N.SingularBasisError):
        N.build_basis(None, stream_functions=[N.CATALOGUE[0], N.CATALOGUE[0]])
    with pytest.raises(ValueError):
        N.build_basis(len(N.CATALOGUE) + 1)


def test_basis_divergence_free_and_traces():
    b = N.build_basis(len(N.CATALOGUE))
    pts = np.random.default_rng(0).uniform(size=(200, 2))
    for k in range(b.n):
        e = np.zeros(b.n)
        e[k] = 1
        assert np.max(np.abs(b.divergence(e, pts))) < 1e-12
        assert np.max(np.abs(b.traces[k])) > 1e-3                 # nonzero tangential trace
    # normal component of every trace vanishes: u.n = 0 on each edge
    q = b.quad_order
    normals = np.repeat(np.array([[0, -1], [1, 0], [0, 1], [-1, 0]]), q, axis=0)
    assert np.max(np.abs(np.einsum("kqc,qc->kq", b.traces, normals))) < 1e-14


def test_assemble_zero_forcing_and_identities():
    m = N.assemble(N.build_basis(3), 2.0)
    assert np.all(m.Phi == 0)
    rng = np.random.default_rng(1)
    for _ in range(20):
        u, v = rng.normal(size=(2, 3))
        assert abs(N.convect(m, u, v, v)) <= 1e-10 * (1 + np.linalg.norm(u) * np.linalg.norm(v) ** 2)
        assert u @ m.A @ u == pytest.approx(2.0 * m.block_v_norm()(u) ** 2, rel=1e-12)


def test_under_resolved_quadrature_rejected():
    b = N.build_basis(4, quad_order=3)
    with pytest.raises(N.QuadratureError):
        N.assemble(b, 1.0)


def test_json_round_trip_bit_exact(m4):
    text = N.model_to_json(m4)
    back = N.model_from_json(text)
    for name in ("A", "Btensor", "Phi", "trace_samples", "gram", "mass", "bnodes", "bweights"):
        assert np.array_equal(getattr(back, name), getattr(m4, name)), name
    assert back.nu == m4.nu and N.model_to_json(back) == text
    assert json.loads(text)["format_version"] == N.FORMAT_VERSION
    doc = json.loads(text)
    doc["format_version"] = 99
    with pytest.raises(ValueError):
        N.model_from_dict(doc)


# constants

def test_c1_one_dimensional_and_zero_tensor():
    m1 = N.assemble(N.build_basis(1), 1.0)
    # n = 1: <B(w, v), w> = b111 w^2 v, so c1 = |b111| / |u1|^3 (and b111 = 0 by skewness)
    scale = m1.gram[0, 0] ** 1.5
    assert N.estimate_c1(m1).value == pytest.approx(abs(m1.Btensor[0, 0, 0]) / scale, abs=1e-14)
    zero = N.StokesModel(**{**m1.__dict__, "Btensor": np.zeros((1, 1, 1))})
    assert N.estimate_c1(zero).value == 0.0


def test_c1_certificate_pair(m4):
    est = N.estimate_c1(m4, samples=16)
    norm = m4.block_v_norm()
    assert norm(est.w) == pytest.approx(1.0) and norm(est.v) == pytest.approx(1.0)
    assert N.convect(m4, est.w, est.v, est.w) == pytest.approx(est.value, rel=1e-9)
    oracle = c1_grid_oracle(m4.Btensor, m4.gram, 3000)
    assert est.value >= oracle * (1 - 1e-9)
    assert abs(est.value - oracle) <= 0.05 * oracle


def test_c1_bound_on_convection_difference(m4):
    # <B[u] - B[v], v - u> <= c1 |u - v|^2 |v|; c1 is a sampled lower bound, so allow 10%
    c1 = N.estimate_c1(m4).value
    norm = m4.block_v_norm()
    rng = np.random.default_rng(5)
    for _ in range(200):
        u, v = rng.normal(size=(2, 4))
        lhs = N.convect(m4, u, u, v - u) - N.convect(m4, v, v, v - u)
        assert lhs <= 1.1 * c1 * norm(u - v) ** 2 * norm(v) + 1e-12


def test_trace_norm(m4):
    assert N.estimate_trace_norm(m4, 0.0) == 1.0
    m1 = N.assemble(N.build_basis(1), 1.0)
    direct = math.sqrt(m1.trace_gram[0, 0] / m1.gram[0, 0])
    assert N.trace_operator_norm(m1) == pytest.approx(direct, rel=1e-14)
    assert N.trace_operator_norm(m4) == pytest.approx(power_iteration_trace(m4.trace_gram, m4.gram), abs=1e-8)
    assert N.estimate_trace_norm(m4, 0.5) == pytest.approx(N.trace_operator_norm(m4) ** 0.5)


# boundary functional and controls

def test_boundary_functional_examples(m4):
    rng = np.random.default_rng(2)
    P0 = N.stationary_problem(m4, N.zero_control())
    u, v = rng.normal(size=(2, 4))
    assert N.boundary_functional(P0, u, v) == 0.0
    kappa = np.array([0.7, -1.3])
    P = N.stationary_problem(m4, N.linear_control(kappa))
    exact = sum(v[k] * kappa @ edge_integral_of_trace(N.CATALOGUE[k]) for k in range(4))
    assert N.boundary_functional(P, u, v) == pytest.approx(exact, rel=1e-10, abs=1e-13)
    assert N.boundary_functional(P, 5 * u, v) == pytest.approx(N.boundary_functional(P, u, v))
    # (g.r)(g.s) is the bilinear form of the g-projected boundary Gram matrix
    g = np.array([0.6, 0.8])
    P = N.stationary_problem(m4, N.bilinear_control(-1.0, g))
    tg = np.einsum("iqc,c->iq", m4.trace_samples, g)
    Tg = np.einsum("q,iq,jq->ij", m4.bweights, tg, tg)
    assert N.boundary_functional(P, u, v) == pytest.approx(u @ Tg @ v, rel=1e-12)


def test_clarke_control_matches_j0(m2):
    j = scaled_norm(0.8)
    P = N.stationary_problem(m2, N.clarke_control(j))
    u, v = np.array([0.3, -0.2]), np.array([1.0, 0.5])
    gu, gv = P.traces(u)[0], P.traces(v)[0]
    direct = sum(w * j.j0(a, b) for w, a, b in zip(m2.bweights, gu, gv))
    assert N.boundary_functional(P, u, v) == pytest.approx(direct)
    assert not N.clarke_control(j).linear_in_s
    assert N.clarke_control(make_superpotential("smooth_quadratic", -1.0)).linear_in_s


def test_verify_m3(m2):
    mu = REF.ray((1, 0.5, 0, 0, 0, 0), 0.1)
    phi = lambda x, t: 0.1 * math.hypot(1, 0.5)
    assert N.verify_m3(mu, REF, phi, m2) <= 1e-12
    assert N.verify_m3(mu, REF, lambda x, t: 0.0, m2) > 0


# parameter distance

def test_distance_examples(m2):
    assert N.parameter_distance(REF, REF, m2) == 0.0
    a, b = N.linear_control((2.0, 0.0)), N.linear_control((1.5, 0.0))
    assert m2.boundary_measure == pytest.approx(4.0)
    closed = N.parameter_distance(a, b, m2)
    assert closed == pytest.approx(1.0, rel=1e-14)
    general = N.parameter_distance(a, b, m2, method="general")
    assert abs(general - closed) <= 0.02 * closed
    ja, jb = N.clarke_control(scaled_norm(1.2)), N.clarke_control(scaled_norm(0.5))
    expected = 0.7 * 2.0
    assert N.parameter_distance(ja, jb, m2) == pytest.approx(expected, rel=0.02)
    assert N.parameter_distance(ja, jb, m2, method="general") == pytest.approx(expected, rel=0.02)


def test_distance_errors(m2):
    with pytest.raises(ValueError):
        N.parameter_distance(N.linear_control(theta=1.0), N.linear_control(theta=0.5), m2)
    empty = N.DistanceGrids(np.array([0.5]), np.zeros((0, 2)), np.ones((1, 2)))
    with pytest.raises(ValueError):
        N.parameter_distance(REF, REF, m2, empty)


def test_distance_linear_path_with_kernel_change(m2):
    a = N.linear_control((0.0, 0.0), np.diag([0.3, 0.0]))
    b = N.linear_control((0.0, 0.0))
    grids = N.default_grids(r_radii=(0.0, 1.0))
    # sup over the r grid of |M r| is 0.3 at |r| = 1
    assert N.parameter_distance(a, b, m2, grids) == pytest.approx(0.3 * 2.0, rel=1e-12)
    assert N.parameter_distance(a, b, m2, grids, method="constant_linear") == math.inf


# problems and solves

def test_zero_data_solution():
    m = N.assemble(N.build_basis(2), 1.0)
    P = N.stationary_problem(m, N.zero_control())
    F = N.ns_trifunction(P)
    Z = np.random.default_rng(0).normal(size=(20, 2))
    assert np.all(F.row(np.zeros(2), Z) == 0)
    S = N.solve_ns(P)
    assert S.points.points[0] == pytest.approx([0.0, 0.0], abs=1e-12)


def test_f_strong_monotonicity(m4):
    pair = N.ns_mixed_pair(N.stationary_problem(m4, REF))
    rng = np.random.default_rng(4)
    for _ in range(20):
        u, v = rng.normal(size=(2, 4))
        assert -pair.f(u, v) - pair.f(v, u) == pytest.approx(0.7 * m4.v_norm(u - v) ** 2, rel=1e-12)
        assert pair.f(u, u) == 0


def test_one_dimensional_hand_reduction():
    m = N.assemble(N.build_basis(1), 1.0, N.trig_forcing())
    ctrl = N.linear_control((0.4, 0.1), 0.3 * np.eye(2))
    # 1-D: F(u, z, u) = (z - u)(a u + b u^2 + c) with b = b111 = 0
    tr = m.trace_samples[0]
    a = m.A[0, 0] + 0.3 * np.sum(m.bweights * np.sum(tr * tr, axis=1))
    c = np.sum(m.bweights * (tr @ np.array([0.4, 0.1]))) - m.Phi[0]
    u_star = -c / a
    axis = np.linspace(-1, 1, 2001)
    P = N.grid_problem(m, ctrl, axis)
    h = axis[1] - axis[0]
    # the nearest grid point has residual at most a * (h / 2) * diam(K)
    S = N.solve_ns(P, tol=a * h, strategy="grid")
    assert 1 <= len(S) <= 3
    assert np.all(np.abs(S.points.points[:, 0] - u_star) <= 1.5 * h)
    # projected iteration agrees
    S2 = N.solve_ns(N.stationary_problem(m, ctrl))
    assert S2.points.points[0, 0] == pytest.approx(u_star, abs=1e-9)


def test_cross_strategy_agreement(m2):
    h = 0.04
    axis = np.arange(-0.6, 0.6 + h / 2, h)
    Pg = N.grid_problem(m2, REF, axis)
    Sp = N.solve_ns(N.stationary_problem(m2, REF))
    assert len(Sp) == 1
    u_star = Sp.points.points[0]
    grid = Pg.K.points
    nearest = grid[np.argmin(np.linalg.norm(grid - u_star, axis=1))]
    tol = -float(np.min(N.ns_trifunction(Pg).row(nearest, grid))) + 1e-12
    Sg = N.solve_ns(Pg, tol=tol, strategy="grid")
    assert any(np.array_equal(p, nearest) for p in Sg.points)
    assert np.max(np.linalg.norm(Sg.points.points - u_star, axis=1)) <= 3 * h


def test_nonsmooth_projected_rejected(m2):
    P = N.stationary_problem(m2, N.clarke_control(scaled_norm(0.5)))
    with pytest.raises(ValueError):
        N.solve_ns(P, strategy="projected_iteration")
    with pytest.raises(ValueError):
        N.solve_ns(P, strategy="grid")      # not a finite grid


# evolution

@pytest.fixture(scope="module")
def evo():
    m = N.assemble(N.build_basis(2), 1.0, N.trig_forcing(), time_grid=N.TimeGrid(0.0, 1.0, 3))
    return N.evolution_problem(m, REF, u0=[0.1, -0.2])


def test_evolution_telescoping(evo):
    rng = np.random.default_rng(9)
    m = evo.model
    H = N.Norm("gram", m.mass)
    for _ in range(20):
        e = rng.normal(size=m.dim)
        blocks = evo.blocks(e)
        lhs = evo.l_form(e, e)
        rhs = 0.5 * (H(blocks[-1]) ** 2 - H(blocks[0]) ** 2)
        assert lhs == pytest.approx(rhs, abs=1e-12)
    # monotone on K: differences with a fixed initial block
    u = np.concatenate([[0.1, -0.2], rng.normal(size=m.dim - 2)])
    w = np.concatenate([[0.1, -0.2], rng.normal(size=m.dim - 2)])
    assert evo.l_form(u - w, u - w) >= 0


def test_evolution_solve(evo):
    S = N.solve_ns(evo, n_starts=2)
    assert len(S) == 1
    u = S.points.points[0]
    assert np.array_equal(u[:2], [0.1, -0.2])
    F = N.ns_trifunction(evo)
    Z = evo.K.test_points(128, seed=1)
    assert np.min(F.row(u, Z)) >= -1e-7
    with pytest.raises(ValueError):
        N.NsProblem(evo.model, REF, evo.K)                 # evolution without u0
    with pytest.raises(ValueError):
        N.evolution_problem(N.assemble(N.build_basis(2), 1.0), REF, [0, 0])


# c(zeta) and certificates

def test_c_zeta_examples(m2):
    u_bar = np.array([0.1, 0.2])
    P0 = N.stationary_problem(m2, N.zero_control())
    est = N.c_zeta(P0, u_bar, 2.0)
    assert est.value == 0 and all(v == 0 for _, v in est.profile)
    Pm = N.stationary_problem(m2, N.bilinear_control(-0.8, (0.6, 0.8)))
    assert N.c_zeta(Pm, u_bar, 2.0).value <= 0
    with pytest.raises(ValueError):
        N.c_zeta(P0, u_bar, 2.0, radii=[1e-3, 1e-2])
    with pytest.raises(ValueError):
        N.c_zeta(P0, u_bar, 2.0, samples_per_radius=8)
    tiny = N.NsProblem(m2, N.zero_control(), FeasibleSet.box([5.0, 5.0], [6.0, 6.0], norm=m2.v_norm))
    with pytest.raises(ValueError):
        N.c_zeta(tiny, u_bar, 2.0)


def test_certificate_monotone_case(m2):
    P = N.stationary_problem(m2, REF)
    u_bar = N.solve_ns(P).points.points[0]
    cert = N.ns_certificate(P, u_bar)
    d = cert.details
    assert cert.case is CalmnessCase.CASE3 and cert.delta == 1.0
    assert cert.k == pytest.approx(d["c0"] / (1.0 - d["rho"] * d["c1"]))
    assert d["monotone_near"] and d["boundary_regime"] == "monotone"


def test_certificate_theta_zero(m2):
    ctrl = N.linear_control((0.5, -0.3), 0.5 * np.eye(2), theta=0.0)
    P = N.stationary_problem(m2, ctrl)
    u_bar = N.solve_ns(P).points.points[0]
    cert = N.ns_certificate(P, u_bar)
    assert cert.delta == 0.5 and cert.details["c0"] == 1.0


def test_certificate_relaxed_case(m2):
    # a small positive c(2) selects condition 2'
    ctrl = N.bilinear_control(0.2, (1.0, 0.0))
    P = N.stationary_problem(m2, ctrl)
    u_bar = N.solve_ns(P).points.points[0]
    cert = N.ns_certificate(P, u_bar, rho=10.0)
    assert cert.details["a_branch"] == "relaxed" and cert.case is CalmnessCase.CASE2


def test_certificate_hypotheses(m2):
    P = N.stationary_problem(m2, REF)
    u_bar = N.solve_ns(P).points.points[0]
    with pytest.raises(HypothesesFail):
        N.ns_certificate(P, u_bar, rho=1e-3)                # |u_bar| >= rho
    with pytest.raises(HypothesesFail):
        N.ns_certificate(P, u_bar, rho=1e4)                 # rho c1 >= nu
