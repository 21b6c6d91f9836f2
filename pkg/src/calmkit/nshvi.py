"""
Galerkin model of the Navier-Stokes hemivariational-like inequality on the unit square.

Velocity fields come from stream functions, ``u = (d psi/dy, -d psi/dx)``, so
every basis field is exactly divergence free. All catalogue stream functions
carry the bubble factor ``x(1-x)y(1-y)``: ``psi`` vanishes on the boundary,
hence the normal velocity does too (which keeps the convection form skew)
while the tangential trace does not (which keeps the boundary functional
nontrivial).

A problem is posed on coefficient vectors. In the stationary case there is
one block of ``n`` coefficients, weighted by the length of the time span.
In the evolution case the vector stacks ``steps + 1`` blocks; block 0 is the
fixed initial state and carries no weight in the time integrals.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
import sympy as sp
from scipy.optimize import minimize

from . import calmcert
from .calmcert import CalmnessCertificate, HypothesesFail
from .epsolve import (DivergenceError, FeasibleSet, SolutionSet, merge_solutions, solve_grid,
                      solve_projected_iteration)
from .metricsets import Norm, PointSet
from .trifunc import Bifunction, MixedPair, Superpotential, Trifunction, make_superpotential, mixed_trifunction

FORMAT_VERSION = 1

BUBBLE = "x*(1-x)*y*(1-y)"
# ordered so that every leading pair has a nonzero convection constant
CATALOGUE = (
    f"x*{BUBBLE}",
    f"y*{BUBBLE}",
    BUBBLE,
    f"x*y*{BUBBLE}",
    f"x**2*{BUBBLE}",
    f"y**2*{BUBBLE}",
    f"sin(pi*x)*{BUBBLE}",
    f"sin(pi*y)*{BUBBLE}",
)

_X, _Y = sp.symbols("x y")


class SingularBasisError(ValueError):
    pass


class QuadratureError(ValueError):
    pass


# %% basis

def _lambdify(expr):
    fn = sp.lambdify((_X, _Y), expr, modules="numpy")

    def call(px, py):
        return np.broadcast_to(np.asarray(fn(px, py), dtype=float), np.shape(px)).copy()

    return call


def _gauss01(order: int):
    t, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (t + 1.0), 0.5 * w


@dataclass(frozen=True, eq=False)
class GalerkinBasis:
    stream_functions: tuple[str, ...]
    quad_order: int
    nodes: np.ndarray           # (Nq, 2) interior Gauss nodes
    weights: np.ndarray         # (Nq,)
    bnodes: np.ndarray          # (Nb, 2) boundary Gauss nodes, edge by edge
    bweights: np.ndarray        # (Nb,)
    values: np.ndarray          # (n, Nq, 2) velocity at interior nodes
    grads: np.ndarray           # (n, Nq, 2, 2), grads[k, q, i, j] = D_i u_j
    traces: np.ndarray          # (n, Nb, 2)
    gram: np.ndarray            # V inner product, sum_i (D_i u, D_i v)
    mass: np.ndarray            # H (L^2) inner product
    _fields: tuple = field(repr=False, default=())

    @property
    def n(self) -> int:
        return len(self.stream_functions)

    @property
    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.gram)[0])

    def velocity(self, coeffs, points) -> np.ndarray:
        """Velocity of ``sum_k coeffs[k] u_k`` at ``points`` (shape (N, 2))."""
        pts = np.asarray(points, dtype=float)
        out = np.zeros(pts.shape[:-1] + (2,))
        for c, (ux, uy, *_rest) in zip(np.asarray(coeffs, float), self._fields):
            out[..., 0] += c * ux(pts[..., 0], pts[..., 1])
            out[..., 1] += c * uy(pts[..., 0], pts[..., 1])
        return out

    def divergence(self, coeffs, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        out = np.zeros(pts.shape[:-1])
        for c, (_ux, _uy, d1x, _d1y, _d2x, d2y) in zip(np.asarray(coeffs, float), self._fields):
            out += c * (d1x(pts[..., 0], pts[..., 1]) + d2y(pts[..., 0], pts[..., 1]))
        return out


def build_basis(n: int | None = None, quad_order: int = 12,
                stream_functions: Sequence[str] | None = None) -> GalerkinBasis:
    """
    Stream-function basis on ``(0,1)^2`` with tensor Gauss quadrature.

    ``stream_functions`` are sympy-parsable expressions in ``x`` and ``y``;
    by default the first ``n`` catalogue entries are used.

    Raises
    ------
    SingularBasisError
        If the V Gram matrix has condition number above 1e12.
    """
    if stream_functions is None:
        if n is None or n < 1:
            raise ValueError("basis size must be at least 1")
        if n > len(CATALOGUE):
            raise ValueError(f"the catalogue holds {len(CATALOGUE)} stream functions")
        stream_functions = CATALOGUE[:n]
    stream_functions = tuple(str(s) for s in stream_functions)
    if n is not None and n != len(stream_functions):
        raise ValueError("n disagrees with the number of stream functions")
    if quad_order < 2:
        raise ValueError("quad_order must be at least 2")

    t, w = _gauss01(quad_order)
    X, Y = np.meshgrid(t, t, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    weights = np.outer(w, w).ravel()
    zeros, ones = np.zeros_like(t), np.ones_like(t)
    bnodes = np.vstack([
        np.column_stack([t, zeros]),   # y = 0
        np.column_stack([ones, t]),    # x = 1
        np.column_stack([t, ones]),    # y = 1
        np.column_stack([zeros, t]),   # x = 0
    ])
    bweights = np.tile(w, 4)

    fields, vals, grads, traces = [], [], [], []
    for s in stream_functions:
        psi = sp.sympify(s, locals={"x": _X, "y": _Y})
        ux, uy = sp.diff(psi, _Y), -sp.diff(psi, _X)
        parts = [ux, uy, sp.diff(ux, _X), sp.diff(ux, _Y), sp.diff(uy, _X), sp.diff(uy, _Y)]
        fns = tuple(_lambdify(e) for e in parts)
        fields.append(fns)
        px, py = nodes[:, 0], nodes[:, 1]
        vals.append(np.column_stack([fns[0](px, py), fns[1](px, py)]))
        g = np.empty((len(nodes), 2, 2))
        g[:, 0, 0], g[:, 1, 0] = fns[2](px, py), fns[3](px, py)   # D_x u1, D_y u1
        g[:, 0, 1], g[:, 1, 1] = fns[4](px, py), fns[5](px, py)   # D_x u2, D_y u2
        grads.append(g)
        bx, by = bnodes[:, 0], bnodes[:, 1]
        traces.append(np.column_stack([fns[0](bx, by), fns[1](bx, by)]))
    values, grads, traces = np.array(vals), np.array(grads), np.array(traces)

    gram = np.einsum("q,aqij,bqij->ab", weights, grads, grads)
    gram = 0.5 * (gram + gram.T)
    mass = np.einsum("q,aqi,bqi->ab", weights, values, values)
    mass = 0.5 * (mass + mass.T)
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e12 or np.linalg.eigvalsh(gram)[0] <= 0:
        raise SingularBasisError(f"V Gram matrix is numerically singular (condition number {cond:.3g})")
    return GalerkinBasis(stream_functions, quad_order, nodes, weights, bnodes, bweights,
                         values, grads, traces, gram, mass, tuple(fields))


# %% assembled model

@dataclass(frozen=True)
class TimeGrid:
    t0: float
    t1: float
    steps: int

    def __post_init__(self):
        if not self.t1 > self.t0 or self.steps < 1:
            raise ValueError("time grid needs t1 > t0 and steps >= 1")

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(self.t0, self.t1, self.steps + 1)


@dataclass(frozen=True, eq=False)
class StokesModel:
    basis: GalerkinBasis
    nu: float
    A: np.ndarray
    Btensor: np.ndarray        # b[i, j, k] = <B(u_i, u_j), u_k>
    Phi: np.ndarray
    trace_samples: np.ndarray  # (n, Nb, 2)
    bnodes: np.ndarray
    bweights: np.ndarray
    gram: np.ndarray
    mass: np.ndarray
    t_span: tuple[float, float] = (0.0, 1.0)
    time_grid: TimeGrid | None = None
    skew_residual: float = 0.0
    forcing_label: str = "custom"

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def evolution(self) -> bool:
        return self.time_grid is not None

    @property
    def nblocks(self) -> int:
        return 1 if self.time_grid is None else self.time_grid.steps + 1

    @property
    def dim(self) -> int:
        return self.n * self.nblocks

    @property
    def block_weights(self) -> np.ndarray:
        if self.time_grid is None:
            return np.array([self.t_span[1] - self.t_span[0]])
        w = np.full(self.nblocks, self.time_grid.dt)
        w[0] = 0.0
        return w

    @property
    def block_times(self) -> np.ndarray:
        if self.time_grid is None:
            return np.array([0.5 * (self.t_span[0] + self.t_span[1])])
        return self.time_grid.times

    @property
    def boundary_measure(self) -> float:
        """``mes(Gamma x [t0, t1])``."""
        return float(np.sum(self.bweights) * np.sum(self.block_weights))

    @property
    def trace_gram(self) -> np.ndarray:
        T = np.einsum("q,iqc,jqc->ij", self.bweights, self.trace_samples, self.trace_samples)
        return 0.5 * (T + T.T)

    @property
    def v_norm(self) -> Norm:
        """Norm on full coefficient vectors: ``sqrt(sum_b w_b |u_b|_V^2)``."""
        return Norm("gram", np.kron(np.diag(self.block_weights), self.gram))

    def block_v_norm(self) -> Norm:
        return Norm("gram", self.gram)


def assemble(basis: GalerkinBasis, nu: float, forcing: Callable | None = None,
             time_grid: TimeGrid | None = None, t_span: tuple[float, float] | None = None,
             skew_tol: float = 1e-8, forcing_label: str | None = None) -> StokesModel:
    """
    Assemble ``A = nu * Gram``, the convection tensor and the load vector.

    ``forcing`` maps points of shape ``(N, 2)`` to vectors of shape ``(N, 2)``.

    Raises
    ------
    QuadratureError
        If the discrete convection tensor is not skew in its last two slots
        to ``skew_tol`` (relative to its largest entry).
    """
    if not nu > 0:
        raise ValueError("viscosity must be positive")
    A = nu * basis.gram
    B = np.einsum("q,iqa,jqac,kqc->ijk", basis.weights, basis.values, basis.grads, basis.values)
    scale = max(1.0, float(np.max(np.abs(B))) if B.size else 1.0)
    skew = float(np.max(np.abs(B + B.transpose(0, 2, 1)))) / scale
    if skew > skew_tol:
        raise QuadratureError(f"convection tensor skew residual {skew:.3g} exceeds {skew_tol:.1g}; "
                              "raise quad_order")
    if forcing is None:
        Phi = np.zeros(basis.n)
    else:
        phi = np.asarray(forcing(basis.nodes), dtype=float).reshape(len(basis.nodes), 2)
        Phi = np.einsum("q,qc,kqc->k", basis.weights, phi, basis.values)
    if time_grid is not None:
        t_span = (time_grid.t0, time_grid.t1)
    elif t_span is None:
        t_span = (0.0, 1.0)
    return StokesModel(basis, float(nu), A, B, Phi, basis.traces, basis.bnodes, basis.bweights,
                       basis.gram, basis.mass, tuple(float(t) for t in t_span), time_grid, skew,
                       forcing_label or ("zero" if forcing is None else "custom"))


def trig_forcing(amplitude: float = 1.0) -> Callable:
    def phi(pts):
        x, y = pts[:, 0], pts[:, 1]
        return amplitude * np.column_stack([np.sin(np.pi * y), -np.sin(np.pi * x)])
    return phi


def convect(model: StokesModel, u, v, w):
    """``<B(u, v), w>`` for single-block coefficient vectors (broadcasting)."""
    return np.einsum("...i,...j,...k,ijk->...", u, v, w, model.Btensor)


# %% boundary controls

@dataclass(frozen=True, eq=False)
class BoundaryControl:
    """
    A boundary control ``mu(x, t, r; s)`` on ``Gamma x [t0, t1] x R^2 x R^2``.

    ``eval`` and ``kernel`` broadcast over leading axes: ``x``, ``r``, ``s``
    have trailing axis 2 and ``t`` is a scalar. Linear controls are
    ``mu = kernel(x, t, r) . s``.
    """

    theta: float
    form: str
    fn: Callable
    kernel_fn: Callable | None = None
    superpotential: Superpotential | None = None
    coefficients: tuple[float, ...] = ()
    family: str = "custom"

    def __post_init__(self):
        if not 0 <= self.theta <= 1:
            raise ValueError("theta must lie in [0, 1]")
        if self.form not in ("general", "positively_homogeneous", "linear", "clarke_of_j"):
            raise ValueError(f"unregistered control form {self.form!r}")

    def eval(self, x, t, r, s):
        return self.fn(np.asarray(x, float), t, np.asarray(r, float), np.asarray(s, float))

    def kernel(self, x, t, r):
        if self.kernel_fn is None:
            raise ValueError("control is not linear in s")
        return self.kernel_fn(np.asarray(x, float), t, np.asarray(r, float))

    @property
    def linear_in_s(self) -> bool:
        return self.kernel_fn is not None

    @property
    def homogeneous(self) -> bool:
        return self.form in ("positively_homogeneous", "linear", "clarke_of_j")

    def with_coefficients(self, coefficients) -> "BoundaryControl":
        coefficients = tuple(float(c) for c in coefficients)
        if self.family == "linear":
            return linear_control(coefficients[:2], np.reshape(coefficients[2:], (2, 2)), self.theta)
        if self.family == "clarke":
            return clarke_control(self.superpotential.with_coefficients(coefficients), self.theta)
        raise ValueError("this control family has no coefficient space")

    def ray(self, direction, eps: float) -> "BoundaryControl":
        direction = np.asarray(direction, dtype=float).ravel()
        if direction.shape != (len(self.coefficients),):
            raise ValueError(f"direction needs {len(self.coefficients)} entries")
        return self.with_coefficients(np.asarray(self.coefficients) + eps * direction)

    def to_dict(self) -> dict:
        out = {"family": self.family, "form": self.form, "theta": self.theta,
               "coefficients": list(self.coefficients)}
        if self.superpotential is not None:
            out["superpotential"] = self.superpotential.kind
        return out


def linear_control(kappa=(0.0, 0.0), M=None, theta: float = 1.0) -> BoundaryControl:
    """``mu(x, t, r; s) = (kappa + M r) . s`` with constant ``kappa`` and ``M``."""
    kappa = np.asarray(kappa, dtype=float).reshape(2)
    M = np.zeros((2, 2)) if M is None else np.asarray(M, dtype=float).reshape(2, 2)

    def kernel(x, t, r):
        return kappa + r @ M.T

    def fn(x, t, r, s):
        return np.sum(kernel(x, t, r) * s, axis=-1)

    coeffs = tuple(float(c) for c in np.concatenate([kappa, M.ravel()]))
    return BoundaryControl(theta, "linear", fn, kernel, None, coeffs, "linear")


def bilinear_control(kappa: float, g=(1.0, 0.0), theta: float = 1.0) -> BoundaryControl:
    """``mu(x, t, r; s) = -kappa (g.r)(g.s)``; monotone for ``kappa <= 0``."""
    g = np.asarray(g, dtype=float).reshape(2)
    return linear_control((0.0, 0.0), -kappa * np.outer(g, g), theta)


def zero_control(theta: float = 1.0) -> BoundaryControl:
    return linear_control((0.0, 0.0), None, theta)


def clarke_control(j: Superpotential, theta: float = 1.0) -> BoundaryControl:
    """``mu(x, t, r; s) = j0(r; s)``."""

    def fn(x, t, r, s):
        return j.j0(r, s)

    kernel = None
    if j.kind == "smooth_quadratic":
        kappa = j.coefficients[0]

        def kernel(x, t, r):
            return kappa * r

    return BoundaryControl(theta, "clarke_of_j", fn, kernel, j, tuple(j.coefficients), "clarke")


def function_control(fn: Callable, theta: float = 1.0, form: str = "general") -> BoundaryControl:
    return BoundaryControl(theta, form, fn)


# %% problems

@dataclass(frozen=True, eq=False)
class NsProblem:
    model: StokesModel
    control: BoundaryControl
    K: FeasibleSet
    u0: np.ndarray | None = None

    def __post_init__(self):
        if self.K.ambient_dimension != self.model.dim:
            raise ValueError(f"feasible set lives in R^{self.K.ambient_dimension}, model needs R^{self.model.dim}")
        if self.model.evolution:
            if self.u0 is None:
                raise ValueError("evolution problems need an initial block u0")
            u0 = np.asarray(self.u0, float).reshape(self.model.n)
            if self.K.kind == "box":
                if not (np.array_equal(self.K.lo[: self.model.n], u0) and np.array_equal(self.K.hi[: self.model.n], u0)):
                    raise ValueError("evolution feasible box must pin the initial block to u0")

    @property
    def norm(self) -> Norm:
        return self.model.v_norm

    def with_control(self, control: BoundaryControl) -> "NsProblem":
        return replace(self, control=control)

    def blocks(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return u.reshape(u.shape[:-1] + (self.model.nblocks, self.model.n))

    def traces(self, u) -> np.ndarray:
        """Boundary traces per block, shape ``(..., nblocks, Nb, 2)``."""
        return np.einsum("...bi,iqc->...bqc", self.blocks(u), self.model.trace_samples)

    # bilinear and nonlinear forms on full coefficient vectors
    def a_form(self, u, v):
        ub, vb = self.blocks(u), self.blocks(v)
        return np.einsum("...bi,ij,...bj,b->...", ub, self.model.A, vb, self.model.block_weights)

    def l_form(self, u, v):
        if not self.model.evolution:
            return np.zeros(np.broadcast_shapes(np.shape(u)[:-1], np.shape(v)[:-1]))
        ub, vb = self.blocks(u), self.blocks(v)
        du = ub[..., 1:, :] - ub[..., :-1, :]
        av = 0.5 * (vb[..., 1:, :] + vb[..., :-1, :])
        return np.einsum("...bi,ij,...bj->...", du, self.model.mass, av)

    def b_form(self, u, v, w):
        ub, vb, wb = self.blocks(u), self.blocks(v), self.blocks(w)
        return np.einsum("...bi,...bj,...bk,ijk,b->...", ub, vb, wb, self.model.Btensor, self.model.block_weights)

    def phi_form(self, v):
        return np.einsum("...bi,i,b->...", self.blocks(v), self.model.Phi, self.model.block_weights)

    def g_form(self, u, v, control: BoundaryControl | None = None):
        """``G_mu(u; v) = int int mu(x, t, gamma u; gamma v)``."""
        control = self.control if control is None else control
        gu, gv = self.traces(u), self.traces(v)
        gu, gv = np.broadcast_arrays(gu, gv)
        m = self.model
        total = 0.0
        for b, (wb, tb) in enumerate(zip(m.block_weights, m.block_times)):
            if wb == 0:
                continue
            vals = control.eval(m.bnodes, tb, gu[..., b, :, :], gv[..., b, :, :])
            total = total + wb * np.einsum("...q,q->...", vals, m.bweights)
        return total

    def boundary_gradient(self, u, control: BoundaryControl | None = None) -> np.ndarray:
        """Gradient in ``v`` of ``G_mu(u; v)`` for controls linear in ``s``."""
        control = self.control if control is None else control
        gu = self.traces(u)
        m = self.model
        out = np.zeros((m.nblocks, m.n))
        for b, (wb, tb) in enumerate(zip(m.block_weights, m.block_times)):
            if wb == 0:
                continue
            ker = control.kernel(m.bnodes, tb, gu[b])
            out[b] = wb * np.einsum("q,qc,iqc->i", m.bweights, ker, m.trace_samples)
        return out.ravel()

    def operator(self, u, control: BoundaryControl | None = None) -> np.ndarray:
        """``L u + A u + B[u] - Phi + grad G_mu(u; .)`` as a coefficient vector."""
        control = self.control if control is None else control
        m = self.model
        ub = self.blocks(u)
        w = m.block_weights[:, None]
        out = w * (ub @ m.A + np.einsum("bi,bj,ijk->bk", ub, ub, m.Btensor) - m.Phi)
        if m.evolution:
            du = (ub[1:] - ub[:-1]) @ m.mass * 0.5
            out[1:] += du
            out[:-1] += du
        return out.ravel() + self.boundary_gradient(u, control)

    def solution_norm(self, u) -> float:
        return float(self.norm(np.asarray(u, float)))


def stationary_problem(model: StokesModel, control: BoundaryControl, halfwidth: float = 10.0) -> NsProblem:
    if model.evolution:
        raise ValueError("model carries a time grid; use evolution_problem")
    K = FeasibleSet.box(-halfwidth * np.ones(model.n), halfwidth * np.ones(model.n), norm=model.v_norm)
    return NsProblem(model, control, K)


def evolution_problem(model: StokesModel, control: BoundaryControl, u0, halfwidth: float = 10.0) -> NsProblem:
    if not model.evolution:
        raise ValueError("model has no time grid")
    u0 = np.asarray(u0, dtype=float).reshape(model.n)
    lo = np.concatenate([u0, -halfwidth * np.ones(model.dim - model.n)])
    hi = np.concatenate([u0, halfwidth * np.ones(model.dim - model.n)])
    return NsProblem(model, control, FeasibleSet.box(lo, hi, norm=model.v_norm), u0)


def grid_problem(model: StokesModel, control: BoundaryControl, axis_points) -> NsProblem:
    """Stationary problem on the Cartesian grid ``axis_points^n`` of coefficient vectors."""
    axis = np.asarray(axis_points, dtype=float)
    mesh = np.meshgrid(*([axis] * model.n), indexing="ij")
    pts = np.column_stack([m.ravel() for m in mesh])
    return NsProblem(model, control, FeasibleSet.grid(pts, norm=model.v_norm))


def ns_mixed_pair(problem: NsProblem) -> MixedPair:
    """
    ``f(u, v) = <<A u, v - u>> + <<L u, v - u>>`` and
    ``g(u, v; mu) = <<B[u], v - u>> + G_mu(u; v - u) - <<Phi, v - u>>``.
    """
    if problem.model.evolution and problem.u0 is None:
        raise ValueError("evolution requested without an initial block")
    P = problem

    def f(u, v, mu=None):
        d = np.asarray(v, float) - np.asarray(u, float)
        return P.a_form(u, d) + P.l_form(u, d)

    def g(u, v, mu=None):
        control = P.control if mu is None else mu
        u = np.asarray(u, float)
        d = np.asarray(v, float) - u
        return P.b_form(u, u, d) + P.g_form(u, d, control) - P.phi_form(d)

    return MixedPair(Bifunction(f, diagonal_zero=True, batched=True), Bifunction(g, batched=True))


def ns_trifunction(problem: NsProblem) -> Trifunction:
    F = mixed_trifunction(ns_mixed_pair(problem), feasible_set=problem.K)
    if problem.control.linear_in_s:
        def G(u, mu=None):
            return -problem.operator(u, problem.control if mu is None else mu)
        F = replace(F, operator=G)
    return F


# %% constants

@dataclass(frozen=True)
class C1Estimate:
    value: float
    w: np.ndarray
    v: np.ndarray
    lower_bound: bool = True


def _whitener(gram: np.ndarray) -> np.ndarray:
    """``W`` with ``W^T gram W = I``; maps unit Euclidean vectors to unit V-norm vectors."""
    L = np.linalg.cholesky(gram)
    return sla.solve_triangular(L, np.eye(len(gram)), lower=True).T


def estimate_c1(model: StokesModel, samples: int = 32, seed: int = 0) -> C1Estimate:
    """
    Multi-start ascent for ``sup_{|w| = |v| = 1} <B(w, v), w>`` in the V norm.

    For fixed ``w`` the optimal ``v`` is explicit, so the ascent runs over
    ``w`` on the unit sphere from ``samples`` seeded random starts. The
    result is a lower bound on the discrete constant.
    """
    n = model.n
    W = _whitener(model.gram)
    Bt = np.einsum("ijk,ia,jb,kc->abc", model.Btensor, W, W, W)

    def c_of(x):
        return np.einsum("i,ijk,k->j", x, Bt, x)

    def neg(z):
        nz = np.linalg.norm(z)
        x = z / nz
        c = c_of(x)
        val = np.linalg.norm(c)
        # gradient of |c(x)| on the sphere, lifted to z
        J = np.einsum("ijk,k->ji", Bt, x) + np.einsum("kji,k->ji", Bt, x)
        gx = (J.T @ c) / val if val > 0 else np.zeros(n)
        gz = (gx - x * (x @ gx)) / nz
        return -val, -gz

    rng = np.random.default_rng(seed)
    best_val, best_x, best_y = -np.inf, None, None
    for _ in range(max(1, samples)):
        z0 = rng.normal(size=n)
        y0 = rng.normal(size=n)
        x0 = z0 / np.linalg.norm(z0)
        start_val = float(np.einsum("i,ijk,j,k->", x0, Bt, y0 / np.linalg.norm(y0), x0))
        res = minimize(neg, z0, jac=True, method="BFGS", options={"gtol": 1e-12, "maxiter": 500})
        x = res.x / np.linalg.norm(res.x)
        c = c_of(x)
        val = float(np.linalg.norm(c))
        y = c / val if val > 0 else y0 / np.linalg.norm(y0)
        if start_val > val:
            val, x, y = start_val, x0, y0 / np.linalg.norm(y0)
        if val > best_val:
            best_val, best_x, best_y = val, x, y
    return C1Estimate(max(best_val, 0.0), W @ best_x, W @ best_y)


def trace_operator_norm(model: StokesModel) -> float:
    """``sup { |gamma u|_{L^2(Gamma x [t0,t1])} : |u| = 1 }`` via the generalized eigenproblem."""
    lam = sla.eigh(model.trace_gram, model.gram, eigvals_only=True)
    return float(math.sqrt(max(lam[-1], 0.0)))


def estimate_trace_norm(model: StokesModel, theta: float) -> float:
    """``c0 = |gamma|^theta``."""
    if theta == 0:
        return 1.0
    return trace_operator_norm(model) ** theta


def boundary_functional(problem: NsProblem, u, v, control: BoundaryControl | None = None) -> float:
    return float(problem.g_form(u, v, control))


@dataclass(frozen=True)
class CZetaEstimate:
    value: float
    profile: tuple[tuple[float, float], ...]
    zeta: float

    @property
    def smallest_radius_value(self) -> float:
        return self.profile[-1][1]


def c_zeta(problem: NsProblem, u_bar, zeta: float, radii: Sequence[float] | None = None,
           samples_per_radius: int = 64, seed: int = 0, control: BoundaryControl | None = None) -> CZetaEstimate:
    """
    Sampled ``limsup_{v -> u_bar} |v - u_bar|^-zeta (G(u_bar; v - u_bar) + G(v; u_bar - v))``.

    For every radius the quotient is maximised over feasible ``v`` on the
    norm sphere around ``u_bar``; the estimate is the max over the two
    smallest radii.
    """
    if radii is None:
        radii = np.geomspace(1e-1, 1e-4, 4)
    radii = [float(r) for r in radii]
    if any(r <= 0 for r in radii) or any(b >= a for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be positive and strictly decreasing")
    if samples_per_radius < 16:
        raise ValueError("need at least 16 samples per radius")
    control = problem.control if control is None else control
    u_bar = np.asarray(u_bar, dtype=float)
    m = problem.model
    free = slice(m.n, None) if m.evolution else slice(None)
    nfree = m.dim - (m.n if m.evolution else 0)
    gram_free = np.kron(np.diag(m.block_weights[1:] if m.evolution else m.block_weights), m.gram)
    W = _whitener(gram_free)
    rng = np.random.default_rng(seed)
    profile = []
    for r in radii:
        x = rng.normal(size=(samples_per_radius, nfree))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        dirs = np.zeros((samples_per_radius, m.dim))
        dirs[:, free] = x @ W.T
        V = u_bar + r * dirs
        ok = np.array([problem.K.contains(v, tol=1e-12) for v in V]) if problem.K.kind != "finite_grid" else np.ones(len(V), bool)
        if not np.any(ok):
            profile.append((r, -math.inf))
            continue
        V = V[ok]
        q = (problem.g_form(u_bar, V - u_bar, control) + problem.g_form(V, u_bar - V, control)) / r ** zeta
        profile.append((r, float(np.max(q))))
    if all(v == -math.inf for _, v in profile):
        raise ValueError("every sampled point was infeasible")
    value = max(v for _, v in profile[-2:])
    return CZetaEstimate(value, tuple(profile), float(zeta))


def rayleigh_bilinear_oracle(model: StokesModel, kappa: float, g=(1.0, 0.0)) -> float:
    """``kappa * lambda_max`` of ``(int (g.gamma u_i)(g.gamma u_j), Gram)``: the exact c(2) of a bilinear control."""
    g = np.asarray(g, dtype=float)
    tg = np.einsum("iqc,c->iq", model.trace_samples, g)
    Tg = np.einsum("q,iq,jq->ij", model.bweights, tg, tg)
    lam = sla.eigh(0.5 * (Tg + Tg.T), model.gram, eigvals_only=True)
    return float(kappa * (lam[-1] if kappa >= 0 else lam[0]))


# %% parameter distance

@dataclass(frozen=True)
class DistanceGrids:
    rho: np.ndarray
    r: np.ndarray
    s: np.ndarray


def default_grids(n_directions: int = 64, s_radii=None, r_radii=(0.0, 0.1, 0.5, 1.0, 2.0),
                  r_directions: int = 8, rho=None) -> DistanceGrids:
    """Polar grids; r directions are a subset of the s directions."""
    if s_radii is None:
        s_radii = np.geomspace(1e-3, 1.0, 6)
    if rho is None:
        rho = np.geomspace(1e-3, 1.0, 7)
    ang = 2 * np.pi * np.arange(n_directions) / n_directions
    dirs = np.column_stack([np.cos(ang), np.sin(ang)])
    s = (np.asarray(s_radii, float)[:, None, None] * dirs[None]).reshape(-1, 2)
    step = max(1, n_directions // max(1, r_directions))
    rdirs = dirs[::step]
    r = [np.zeros(2)] + [rad * d for rad in r_radii if rad > 0 for d in rdirs]
    return DistanceGrids(np.asarray(rho, float), np.array(r), s)


def _node_values(mu, mu_bar, model, grids, weight_fn):
    """Pointwise integrand at every (time, boundary node), shape (nblocks, Nb)."""
    out = np.zeros((model.nblocks, len(model.bnodes)))
    R, S = grids.r[:, None, :], grids.s[None, :, :]
    for b, tb in enumerate(model.block_times):
        if model.block_weights[b] == 0:
            continue
        for q, xq in enumerate(model.bnodes):
            diff = mu.eval(xq, tb, R, S) - mu_bar.eval(xq, tb, R, S)
            out[b, q] = weight_fn(diff)
    return out


def _integrate(model, vals) -> float:
    return float(math.sqrt(np.einsum("b,bq,q->", model.block_weights, vals, model.bweights)))


def parameter_distance(mu: BoundaryControl, mu_bar: BoundaryControl, model: StokesModel,
                       grids: DistanceGrids | None = None, method: str = "auto") -> float:
    """
    Distance between boundary controls,
    ``( int int inf_{0<rho<=1} sup_{r, 0<|s|<=rho} |s|^-2theta |mu - mu_bar|^2 )^(1/2)``.

    ``method`` selects the evaluation path: ``"general"`` (the inf-sup on
    grids), ``"homogeneous"`` (sup over the unit ball only),
    ``"linear"`` (pointwise kernel norm, sup over the r grid) or
    ``"constant_linear"`` (closed form ``sqrt(mes) sup_r |mu_1(r) - mu_bar_1(r)|``).
    ``"auto"`` picks the most specific path valid for both controls.
    """
    if mu.theta != mu_bar.theta:
        raise ValueError("controls carry different theta")
    grids = default_grids() if grids is None else grids
    if min(len(grids.rho), len(grids.r), len(grids.s)) == 0:
        raise ValueError("distance grids must be nonempty")
    theta = mu.theta
    linear_pair = mu.family == "linear" and mu_bar.family == "linear"
    if method == "auto":
        if linear_pair and theta == 1:
            dM = np.subtract(mu.coefficients[2:], mu_bar.coefficients[2:])
            method = "constant_linear" if not np.any(dM) else "linear"
        elif mu.homogeneous and mu_bar.homogeneous:
            method = "homogeneous"
        else:
            method = "general"

    if method == "constant_linear":
        if not linear_pair:
            raise ValueError("closed form needs two constant-kernel linear controls")
        dkappa = np.subtract(mu.coefficients[:2], mu_bar.coefficients[:2])
        if np.any(np.subtract(mu.coefficients[2:], mu_bar.coefficients[2:])):
            return math.inf
        return math.sqrt(model.boundary_measure) * float(np.linalg.norm(dkappa))

    if method == "linear":
        if not (mu.linear_in_s and mu_bar.linear_in_s):
            raise ValueError("linear path needs controls linear in s")
        out = np.zeros((model.nblocks, len(model.bnodes)))
        for b, tb in enumerate(model.block_times):
            if model.block_weights[b] == 0:
                continue
            for q, xq in enumerate(model.bnodes):
                dk = mu.kernel(xq, tb, grids.r) - mu_bar.kernel(xq, tb, grids.r)
                out[b, q] = float(np.max(np.sum(dk * dk, axis=-1)))
        return _integrate(model, out)

    snorm = np.linalg.norm(grids.s, axis=1)
    if np.any(snorm == 0):
        raise ValueError("s grid must avoid the origin")
    wgt = snorm ** (-2.0 * theta)

    if method == "homogeneous":
        inside = snorm <= 1.0

        def weight_fn(diff):
            return float(np.max((wgt * diff * diff)[:, inside]))

        return _integrate(model, _node_values(mu, mu_bar, model, grids, weight_fn))

    if method == "general":
        rho = np.asarray(grids.rho, float)
        if np.any(rho <= 0) or np.any(rho > 1):
            raise ValueError("rho grid must lie in (0, 1]")

        def weight_fn(diff):
            w = np.max(wgt * diff * diff, axis=0)      # sup over r, per s
            best = math.inf
            for p in rho:
                sel = snorm <= p
                if np.any(sel):
                    best = min(best, float(np.max(w[sel])))
            return 0.0 if best == math.inf else best

        return _integrate(model, _node_values(mu, mu_bar, model, grids, weight_fn))

    raise ValueError(f"unknown distance method {method!r}")


def verify_m3(mu: BoundaryControl, mu_bar: BoundaryControl, phi: Callable, model: StokesModel,
              samples: int = 200, s_max: float = 0.1, seed: int = 0) -> float:
    """Worst ``|mu - mu_bar| - phi(x, t) |s|^theta`` over random ``(r, s)`` with ``|s| <= s_max``."""
    rng = np.random.default_rng(seed)
    r = rng.normal(size=(samples, 2))
    s = rng.normal(size=(samples, 2))
    s *= (s_max * rng.uniform(size=(samples, 1)) ** 0.5) / np.linalg.norm(s, axis=1, keepdims=True)
    worst = -math.inf
    for tb in model.block_times:
        for xq in model.bnodes:
            lhs = np.abs(mu.eval(xq, tb, r, s) - mu_bar.eval(xq, tb, r, s))
            rhs = phi(xq, tb) * np.linalg.norm(s, axis=1) ** mu.theta
            worst = max(worst, float(np.max(lhs - rhs)))
    return worst


# %% certificate and solve

def ns_certificate(problem: NsProblem, u_bar, rho: float | None = None, tau: float = 2.0,
                   c1: C1Estimate | None = None, c1_samples: int = 32,
                   czeta_radii: Sequence[float] | None = None, czeta_samples: int = 64,
                   seed: int = 0, monotone_tol: float = 1e-12, r: float | None = None) -> CalmnessCertificate:
    """
    Certificate for the perturbed inequality at ``(mu_bar, u_bar)``.

    Composes the convection constant, the trace constant and the sampled
    relaxed-monotonicity constant, then maps them to Hoelder constants.
    When ``rho`` is omitted it is placed halfway between ``|u_bar|`` and
    ``nu / c1``.

    Raises
    ------
    HypothesesFail
        If ``|u_bar| >= rho`` or ``rho c1 >= nu`` (or the constants cannot be
        formed); this is distinct from a non-calm classification.
    """
    m = problem.model
    theta = problem.control.theta
    u_bar = np.asarray(u_bar, dtype=float)
    unorm = problem.solution_norm(u_bar)
    c1 = estimate_c1(m, samples=c1_samples, seed=seed) if c1 is None else c1
    if rho is None:
        rho = 0.5 * (unorm + m.nu / c1.value) if c1.value > 0 else 2.0 * unorm + 1.0
    if not unorm < rho:
        raise HypothesesFail(f"|u_bar| = {unorm!r} is not below rho = {rho!r}")
    if not rho * c1.value < m.nu:
        raise HypothesesFail(f"rho c1 = {rho * c1.value!r} is not below nu = {m.nu!r}")
    c0 = estimate_trace_norm(m, theta)
    cz2 = c_zeta(problem, u_bar, 2.0, czeta_radii, czeta_samples, seed)
    cz_tau = cz2 if tau == 2 else c_zeta(problem, u_bar, tau, czeta_radii, czeta_samples, seed)
    monotone_near = cz2.smallest_radius_value <= monotone_tol
    a, branch = calmcert.ns_a_coefficient(m.nu, rho * c1.value, tau, monotone_near, c2=cz2.value,
                                         c_tau=cz_tau.value)
    h = calmcert.ns_constants(m.nu, rho, c1.value, c0, theta, tau, monotone_near,
                              c2=cz2.value, c_tau=cz_tau.value)
    # the generic branch only yields a usable constant when tau > 2
    regime = branch if branch != "generic" or tau > 2 else "none"
    cert = calmcert.certificate(h, r)
    details = {"c1": c1.value, "c1_lower_bound": True, "c0": c0, "trace_norm": trace_operator_norm(m),
               "rho": rho, "u_bar_norm": unorm, "tau": tau, "c2": cz2.value, "c_tau": cz_tau.value,
               "monotone_near": bool(monotone_near), "a_branch": branch, "boundary_regime": regime,
               "theta_conservative": theta < 1}
    return replace(cert, details=details)


def check_ns_estimate(problem: NsProblem, u_bar, mu_bar: BoundaryControl, candidates: Sequence,
                      cert: CalmnessCertificate, distance_fn: Callable) -> dict:
    """
    Margin of ``g(u_bar, v; mu_bar) + g(v, u_bar; mu) <= rho c1 |v-u|^2 + a |v-u|^tau + c0 |v-u|^theta d(mu, mu_bar)``
    on solved candidates ``(v, mu)``.
    """
    pair = ns_mixed_pair(problem)
    d = cert.details
    h = cert.constants
    worst = math.inf
    for v, mu in candidates:
        e = problem.solution_norm(np.asarray(v) - u_bar)
        if e == 0:
            continue
        lhs = pair.g(u_bar, v, mu_bar) + pair.g(v, u_bar, mu)
        rhs = d["rho"] * d["c1"] * e ** 2 + h.a * e ** d["tau"] + d["c0"] * e ** h.theta * distance_fn(mu)
        worst = min(worst, calmcert._margin(lhs, rhs))
    return {"holds": worst >= 0, "worst_margin": worst}


def default_step(problem: NsProblem) -> float:
    m = problem.model
    lam = float(np.linalg.eigvalsh(m.A)[-1]) * float(np.max(m.block_weights))
    if problem.control.linear_in_s:
        k = problem.control.kernel(np.zeros(2), 0.0, np.eye(2)) - problem.control.kernel(np.zeros(2), 0.0, np.zeros((2, 2)))
        lam += float(np.linalg.norm(k, 2)) * float(np.linalg.eigvalsh(m.trace_gram)[-1]) * float(np.max(m.block_weights))
    if m.evolution:
        lam += float(np.linalg.eigvalsh(m.mass)[-1])
    return 0.5 / max(lam, 1e-12)


def solve_ns(problem: NsProblem, tol: float = 1e-10, strategy: str = "projected_iteration",
             control: BoundaryControl | None = None, step: float | None = None, max_iter: int = 200_000,
             n_starts: int = 1, start_spread: float = 1.0, seed: int = 0, start=None,
             dedup_radius: float = 1e-6) -> SolutionSet:
    """
    Solve the inequality for ``control`` (default: the problem's own).

    ``grid`` enumerates a finite coefficient grid exactly;
    ``projected_iteration`` needs a control linear in ``s`` and runs from
    ``n_starts`` seeded starts (the first at ``start`` or the centre of K),
    merging converged points closer than ``dedup_radius``.
    """
    control = problem.control if control is None else control
    F = ns_trifunction(problem.with_control(control))
    if strategy == "grid":
        if problem.K.kind != "finite_grid":
            raise ValueError("grid strategy needs a finite coefficient grid")
        return solve_grid(F, problem.K, control, tol)
    if strategy != "projected_iteration":
        raise ValueError(f"unknown strategy {strategy!r}")
    if not control.linear_in_s:
        raise ValueError("projected iteration needs a control linear in s; nonsmooth controls admit only the grid strategy")
    step = default_step(problem.with_control(control)) if step is None else step
    rng = np.random.default_rng(seed)
    base = problem.K.midpoint if start is None else np.asarray(start, float)
    runs = []
    for i in range(max(1, n_starts)):
        s0 = base if i == 0 else base + start_spread * rng.normal(size=base.shape)
        if problem.model.evolution:
            s0 = np.concatenate([problem.u0, s0[problem.model.n:]])
        try:
            runs.append(solve_projected_iteration(F, problem.K, control, step=step, tol=tol,
                                                  max_iter=max_iter, start=s0, seed=seed + i))
        except DivergenceError as exc:
            # divergence from a far start is a diagnostic, not a failure
            if i == 0:
                raise
            runs.append(SolutionSet(PointSet.empty(problem.model.dim, problem.norm), tol, control,
                                    np.array([]), {"diverged": str(exc)}))
    merged = merge_solutions(runs, dedup_radius)
    merged.diagnostics["diverged_runs"] = sum(1 for S in runs if "diverged" in S.diagnostics)
    return merged


# %% JSON model export

def _arr(x) -> list:
    return np.asarray(x, dtype=float).tolist()


def model_to_dict(model: StokesModel) -> dict:
    tg = None if model.time_grid is None else {"t0": model.time_grid.t0, "t1": model.time_grid.t1,
                                                "steps": model.time_grid.steps}
    return {
        "format_version": FORMAT_VERSION,
        "basis": {"stream_functions": list(model.basis.stream_functions), "quad_order": model.basis.quad_order},
        "nu": model.nu,
        "t_span": list(model.t_span),
        "time_grid": tg,
        "forcing": model.forcing_label,
        "A": _arr(model.A),
        "Btensor": _arr(model.Btensor),
        "Phi": _arr(model.Phi),
        "gram": _arr(model.gram),
        "mass": _arr(model.mass),
        "trace_samples": _arr(model.trace_samples),
        "boundary_nodes": _arr(model.bnodes),
        "boundary_weights": _arr(model.bweights),
        "skew_residual": model.skew_residual,
    }


def model_to_json(model: StokesModel) -> str:
    # float repr is the shortest string that round-trips bit-exactly
    return json.dumps(model_to_dict(model), sort_keys=True, indent=1)


def model_from_dict(doc: dict) -> StokesModel:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {doc.get('format_version')!r}")
    b = doc["basis"]
    basis = build_basis(None, quad_order=int(b["quad_order"]), stream_functions=b["stream_functions"])
    tg = doc.get("time_grid")
    time_grid = None if tg is None else TimeGrid(float(tg["t0"]), float(tg["t1"]), int(tg["steps"]))
    arr = lambda k: np.array(doc[k], dtype=float)
    n = basis.n
    return StokesModel(
        basis=basis, nu=float(doc["nu"]), A=arr("A").reshape(n, n), Btensor=arr("Btensor").reshape(n, n, n),
        Phi=arr("Phi").reshape(n), trace_samples=arr("trace_samples").reshape(n, -1, 2),
        bnodes=arr("boundary_nodes").reshape(-1, 2), bweights=arr("boundary_weights"),
        gram=arr("gram").reshape(n, n), mass=arr("mass").reshape(n, n),
        t_span=tuple(float(t) for t in doc["t_span"]), time_grid=time_grid,
        skew_residual=float(doc["skew_residual"]), forcing_label=str(doc.get("forcing", "custom")),
    )


def model_from_json(text: str) -> StokesModel:
    return model_from_dict(json.loads(text))
