"""
Bifunctions, trifunctions and superpotentials.

Evaluator convention
--------------------
Points are 1-D arrays of length ``dim``. An evaluator ``F(u, v, w, mu)``
returns a real. When an evaluator is flagged ``batched`` it must also accept
stacks of points of shape ``(..., dim)`` in any argument, broadcast them, and
return an array of shape ``...``; the solvers use this to evaluate many test
points in a single call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

TOL = 1e-9


def _scalar(x) -> float:
    return float(np.squeeze(np.asarray(x, dtype=float)))


def _dist(u, v) -> float:
    return float(np.linalg.norm(np.atleast_1d(np.asarray(u, float) - np.asarray(v, float))))


@dataclass(frozen=True)
class Bifunction:
    eval: Callable[[Any, Any, Any], Any]
    diagonal_zero: bool = False
    batched: bool = False

    def __call__(self, u, v, mu=None) -> float:
        return _scalar(self.eval(u, v, mu))


@dataclass(frozen=True)
class Trifunction:
    eval: Callable[[Any, Any, Any, Any], Any]
    feasible_set: Any = None
    batched: bool = False
    # G with F(u, z, u; mu) = <-G(u; mu), z - u>, when F has variational form
    operator: Callable[[Any, Any], Any] | None = None

    def __call__(self, u, v, w, mu=None) -> float:
        return _scalar(self.eval(u, v, w, mu))

    def row(self, u, Z, mu=None) -> np.ndarray:
        """``F(u, z, u; mu)`` for every row ``z`` of ``Z``."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        Z = np.asarray(Z, dtype=float).reshape(-1, u.shape[0])
        if self.batched:
            return np.asarray(self.eval(u[None, :], Z, u[None, :], mu), dtype=float).reshape(len(Z))
        return np.array([self(u, z, u, mu) for z in Z])


@dataclass(frozen=True)
class MixedPair:
    """``f`` is the monotone part (zero on the diagonal), ``g`` is arbitrary."""

    f: Bifunction
    g: Bifunction

    def __post_init__(self):
        if not self.f.diagonal_zero:
            raise ValueError("the monotone part of a mixed pair must vanish on the diagonal")


def lift_bifunction(f: Bifunction) -> Trifunction:
    """``F(u, v, w) = f(w, v) - f(w, u)``."""
    if not f.diagonal_zero:
        raise ValueError("lifting needs f(u, u) = 0; set diagonal_zero=True")
    ev = f.eval

    def F(u, v, w, mu=None):
        return ev(w, v, mu) - ev(w, u, mu)

    return Trifunction(F, batched=f.batched)


def mixed_trifunction(pair: MixedPair, feasible_set=None) -> Trifunction:
    """``F(u, v, w; mu) = f(w, v; mu) - f(w, u; mu) + g(u, v; mu)``."""
    fe, ge = pair.f.eval, pair.g.eval

    def F(u, v, w, mu=None):
        return fe(w, v, mu) - fe(w, u, mu) + ge(u, v, mu)

    return Trifunction(F, feasible_set=feasible_set, batched=pair.f.batched and pair.g.batched)


def semimonotone_trifunction(T: Callable, feasible_set=None) -> Trifunction:
    """``F(u, v, w) = <T(u, w), v - u>`` for a single-valued operator ``T``."""

    def F(u, v, w, mu=None):
        return np.sum(np.asarray(T(u, w, mu)) * (np.asarray(v) - np.asarray(u)), axis=-1)

    return Trifunction(F, feasible_set=feasible_set)


def variational_trifunction(G: Callable, feasible_set=None) -> Trifunction:
    """Trifunction of a variational inequality, ``F(u, v, w; mu) = <-G(w; mu), v - u>``.

    ``G`` is the descent field, i.e. minus the operator of the inequality, so
    that ``u = proj_K(u + s G(u))`` characterises solutions.
    """

    def F(u, v, w, mu=None):
        g = np.asarray(G(np.asarray(w, float), mu), dtype=float)
        return -np.sum(g * (np.asarray(v, float) - np.asarray(u, float)), axis=-1)

    return Trifunction(F, feasible_set=feasible_set, operator=G)


# %% sample-based monotonicity checks

@dataclass(frozen=True)
class MonotonicityReport:
    holds: bool
    worst_violation: float
    worst_pair: int
    violations: int


def _report(diffs: np.ndarray, tol: float) -> MonotonicityReport:
    i = int(np.argmax(diffs))  # first index of the max, deterministic
    return MonotonicityReport(
        holds=bool(diffs[i] <= tol),
        worst_violation=float(diffs[i]),
        worst_pair=i,
        violations=int(np.count_nonzero(diffs > tol)),
    )


def check_monotone(F: Trifunction, pairs: Sequence, mu=None, tol: float = TOL) -> MonotonicityReport:
    """Checks ``F(u, v, u; mu) <= F(u, v, v; mu)`` on every sampled pair."""
    if len(pairs) == 0:
        raise ValueError("no pairs to check")
    diffs = np.array([F(u, v, u, mu) - F(u, v, v, mu) for u, v in pairs])
    return _report(diffs, tol)


def check_strongly_monotone(F: Trifunction, m: float, beta: float, pairs: Sequence, mu=None,
                            tol: float = TOL, distance: Callable = _dist) -> MonotonicityReport:
    """Checks ``m d(u, v)^beta <= F(u, v, v; mu) - F(u, v, u; mu)``."""
    if m <= 0 or beta <= 0:
        raise ValueError("m and beta must be positive")
    if len(pairs) == 0:
        raise ValueError("no pairs to check")
    diffs = np.array([m * distance(u, v) ** beta - (F(u, v, v, mu) - F(u, v, u, mu)) for u, v in pairs])
    return _report(diffs, tol)


def check_bifunction_monotone(f: Bifunction, pairs: Sequence, mu=None, tol: float = TOL) -> MonotonicityReport:
    """Checks ``f(u, v) + f(v, u) <= 0``."""
    if len(pairs) == 0:
        raise ValueError("no pairs to check")
    diffs = np.array([f(u, v, mu) + f(v, u, mu) for u, v in pairs])
    return _report(diffs, tol)


# %% superpotentials and Clarke directional derivatives

@dataclass(frozen=True)
class Superpotential:
    """
    A locally Lipschitz boundary superpotential ``j: R^2 -> R``.

    ``j0(r, s)`` is its Clarke generalized directional derivative. Both
    callables broadcast over leading axes of ``r`` and ``s``.
    ``lipschitz_rank`` bounds ``|j0(r; s)| <= rank |s|`` for ``|r| <= r_bound``.
    """

    kind: str
    coefficients: tuple[float, ...]
    value: Callable
    j0: Callable
    lipschitz_rank: float
    r_bound: float = np.inf

    def negated(self) -> "Superpotential":
        if self.kind not in _REGISTRY:
            raise ValueError(f"no closed form registered for kind {self.kind!r}")
        return _REGISTRY[self.kind](*(-c for c in self.coefficients), **self._extra())

    def with_coefficients(self, coefficients) -> "Superpotential":
        if self.kind not in _REGISTRY:
            raise ValueError(f"no closed form registered for kind {self.kind!r}")
        return _REGISTRY[self.kind](*coefficients, **self._extra())

    def _extra(self) -> dict:
        return {"r_bound": self.r_bound} if self.kind == "smooth_quadratic" else {}


def _norm2(x):
    x = np.asarray(x, dtype=float)
    return np.sqrt(np.sum(x * x, axis=-1))


def smooth_quadratic(kappa: float, r_bound: float = 1.0) -> Superpotential:
    """``j(r) = kappa |r|^2 / 2``, so ``j0(r; s) = kappa r.s``."""
    kappa = float(kappa)

    def value(r):
        return 0.5 * kappa * np.sum(np.asarray(r, float) ** 2, axis=-1)

    def j0(r, s):
        return kappa * np.sum(np.asarray(r, float) * np.asarray(s, float), axis=-1)

    return Superpotential("smooth_quadratic", (kappa,), value, j0, abs(kappa) * r_bound, r_bound)


def scaled_norm(kappa: float) -> Superpotential:
    """
    ``j(r) = kappa |r|``.

    Away from the kink ``j0(r; s) = kappa (r/|r|).s``. At ``r = 0`` the Clarke
    derivative is ``|kappa| |s|`` for either sign of ``kappa``: for
    ``kappa < 0`` the limsup is attained along ``w = -lambda t s`` with
    ``lambda >= 1``.
    """
    kappa = float(kappa)

    def value(r):
        return kappa * _norm2(r)

    def j0(r, s):
        r = np.asarray(r, dtype=float)
        s = np.asarray(s, dtype=float)
        nr = _norm2(r)
        kink = nr == 0.0
        safe = np.where(kink, 1.0, nr)
        smooth = kappa * np.sum(r * s, axis=-1) / safe
        return np.where(kink, abs(kappa) * _norm2(s), smooth)

    return Superpotential("scaled_norm", (kappa,), value, j0, abs(kappa))


def custom_superpotential(value: Callable, j0: Callable, lipschitz_rank: float,
                          coefficients=(), r_bound: float = np.inf) -> Superpotential:
    return Superpotential("custom", tuple(coefficients), value, j0, float(lipschitz_rank), r_bound)


_REGISTRY: dict[str, Callable[..., Superpotential]] = {
    "smooth_quadratic": smooth_quadratic,
    "scaled_norm": scaled_norm,
}


def make_superpotential(kind: str, *coefficients, **kw) -> Superpotential:
    if kind not in _REGISTRY:
        raise ValueError(f"no closed form registered for kind {kind!r}")
    return _REGISTRY[kind](*coefficients, **kw)


def j0_eval(j: Superpotential, r, s) -> float:
    if j.kind not in _REGISTRY and j.kind != "custom":
        raise ValueError(f"no closed form registered for kind {j.kind!r}")
    return _scalar(j.j0(np.asarray(r, float), np.asarray(s, float)))


def clarke_limsup_oracle(value: Callable, r, s, ts=None, n_directions: int = 16,
                         rng: np.random.Generator | None = None) -> float:
    """
    Finite-difference estimate of ``limsup_{w -> r, t -> 0+} (j(w + t s) - j(w)) / t``.

    The base points ``w`` are taken at offsets commensurate with ``t`` (zero,
    along ``+-s`` and along random unit directions), which is what reaches
    the limsup at kinks where ``w`` must approach ``r`` at the same rate as
    ``t`` shrinks. For a fixed offset geometry the quotient is affine in
    ``t`` to leading order, so each geometry is Richardson-extrapolated from
    ``t`` and ``2t`` before the max is taken.
    """
    r = np.asarray(r, dtype=float)
    s = np.asarray(s, dtype=float)
    if ts is None:
        ts = np.geomspace(1e-6, 1e-5, 4)
    rng = np.random.default_rng(0) if rng is None else rng
    ns = float(np.linalg.norm(s))
    dirs = [np.zeros_like(r)]
    if ns > 0:
        dirs += [s / ns, -s / ns]
    rand = rng.normal(size=(n_directions, r.shape[0]))
    dirs += list(rand / np.linalg.norm(rand, axis=1, keepdims=True))
    dirs = np.stack(dirs)
    scales = np.array([0.0, 0.5, 1.0, 2.0]) * max(ns, 1.0)
    offsets = (scales[:, None, None] * dirs[None, :, :]).reshape(-1, r.shape[0])

    def quotient(t):
        w = r + t * offsets
        return (value(w + t * s) - value(w)) / t

    best = -np.inf
    for t in ts:
        q = 2.0 * quotient(t) - quotient(2.0 * t)
        best = max(best, float(np.max(q)))
    return best
