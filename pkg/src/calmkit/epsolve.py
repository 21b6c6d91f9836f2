"""
Solvers for parametric equilibrium problems on finite-dimensional feasible sets.

Solutions are epsilon-solutions: ``u`` is accepted when
``min_z F(u, z, u; mu) >= -tol`` over the tested ``z``. On a finite grid the
test set is the grid itself (exact quantifier); on boxes and balls it is a
sampled cloud ("sampled certification").
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from scipy.stats import qmc

from .metricsets import EUCLIDEAN, Norm, PointSet, pompeiu_excess
from .trifunc import Trifunction


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class FeasibleSet:
    kind: str
    points: np.ndarray | None = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    center: np.ndarray | None = None
    radius: float | None = None
    norm: Norm = EUCLIDEAN

    def __post_init__(self):
        if self.kind == "finite_grid":
            pts = np.array(self.points, dtype=float)
            if pts.ndim == 1:
                pts = pts.reshape(-1, 1)
            if pts.ndim != 2 or len(pts) == 0:
                raise ValueError("a finite grid needs at least one point")
            object.__setattr__(self, "points", pts)
        elif self.kind == "box":
            lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
            hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
            if lo.shape != hi.shape or np.any(lo > hi):
                raise ValueError("box bounds must have equal shapes and lo <= hi")
            object.__setattr__(self, "lo", lo)
            object.__setattr__(self, "hi", hi)
        elif self.kind == "ball":
            c = np.atleast_1d(np.asarray(self.center, dtype=float))
            if not (self.radius is not None and self.radius > 0):
                raise ValueError("ball radius must be positive")
            object.__setattr__(self, "center", c)
        else:
            raise ValueError(f"unknown feasible set kind {self.kind!r}")

    # constructors
    @classmethod
    def grid(cls, points, norm: Norm = EUCLIDEAN) -> "FeasibleSet":
        return cls("finite_grid", points=points, norm=norm)

    @classmethod
    def interval_grid(cls, lo: float, hi: float, count: int) -> "FeasibleSet":
        return cls.grid(np.linspace(lo, hi, count))

    @classmethod
    def box(cls, lo, hi, norm: Norm = EUCLIDEAN) -> "FeasibleSet":
        return cls("box", lo=lo, hi=hi, norm=norm)

    @classmethod
    def ball(cls, center, radius: float, norm: Norm = EUCLIDEAN) -> "FeasibleSet":
        return cls("ball", center=center, radius=radius, norm=norm)

    @property
    def ambient_dimension(self) -> int:
        if self.kind == "finite_grid":
            return self.points.shape[1]
        if self.kind == "box":
            return self.lo.shape[0]
        return self.center.shape[0]

    @property
    def midpoint(self) -> np.ndarray:
        if self.kind == "finite_grid":
            return self.points[len(self.points) // 2].copy()
        if self.kind == "box":
            return 0.5 * (self.lo + self.hi)
        return self.center.copy()

    def project(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            return np.clip(u, self.lo, self.hi)
        if self.kind == "ball":
            d = u - self.center
            n = float(np.linalg.norm(d))
            return u.copy() if n <= self.radius else self.center + d * (self.radius / n)
        i = int(np.argmin(np.linalg.norm(self.points - u, axis=1)))
        return self.points[i].copy()

    def contains(self, u, tol: float = 0.0) -> bool:
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            return bool(np.all(u >= self.lo - tol) and np.all(u <= self.hi + tol))
        if self.kind == "ball":
            return bool(np.linalg.norm(u - self.center) <= self.radius + tol)
        return bool(np.min(np.linalg.norm(self.points - u, axis=1)) <= tol)

    def test_points(self, count: int = 256, seed: int = 0) -> np.ndarray:
        """Boundary points plus a scrambled Halton cloud; deterministic in ``seed``."""
        if self.kind == "finite_grid":
            return self.points
        dim = self.ambient_dimension
        cloud = qmc.Halton(d=dim, scramble=True, seed=seed).random(count)
        if self.kind == "box":
            span = self.hi - self.lo
            inner = self.lo + cloud * span
            corners = _box_corners(self.lo, self.hi, limit=2 * count)
            faces = []
            for j in range(dim):
                if span[j] == 0:
                    continue
                for side in (self.lo[j], self.hi[j]):
                    f = inner[: max(1, count // (2 * dim))].copy()
                    f[:, j] = side
                    faces.append(f)
            return np.vstack([corners, inner, *faces]) if faces else np.vstack([corners, inner])
        g = 2.0 * cloud - 1.0
        g = g / np.maximum(1.0, np.linalg.norm(g, axis=1, keepdims=True))
        inner = self.center + self.radius * g
        sphere = qmc.Halton(d=dim, scramble=True, seed=seed + 1).random(count) - 0.5
        sphere /= np.linalg.norm(sphere, axis=1, keepdims=True)
        return np.vstack([inner, self.center + self.radius * sphere])


def _box_corners(lo, hi, limit: int) -> np.ndarray:
    dim = lo.shape[0]
    if 2 ** dim > limit:
        return np.vstack([lo, hi])
    idx = (np.arange(2 ** dim)[:, None] >> np.arange(dim)[None, :]) & 1
    return np.where(idx == 1, hi, lo).astype(float)


@dataclass(frozen=True)
class SolutionSet:
    points: PointSet
    tolerance: float
    mu: Any
    residuals: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def worst_residual(self) -> float:
        return float(np.min(self.residuals)) if len(self.residuals) else math.nan


def solve_grid(F: Trifunction, K: FeasibleSet, mu=None, tol: float = 0.0) -> SolutionSet:
    """Exact brute force on a finite grid: ``u in S`` iff ``F(u, z, u; mu) >= -tol`` for all grid ``z``."""
    if K.kind != "finite_grid":
        raise ValueError("solve_grid needs a finite_grid feasible set")
    keep, res = [], []
    for i, u in enumerate(K.points):
        worst = float(np.min(F.row(u, K.points, mu)))
        if worst >= -tol:
            keep.append(i)
            res.append(worst)
    pts = PointSet(K.points[keep], K.norm) if keep else PointSet.empty(K.ambient_dimension, K.norm)
    return SolutionSet(pts, tol, mu, np.array(res), {"method": "grid", "certification": "exact"})


def _resolve_operator(F) -> Callable:
    if isinstance(F, Trifunction):
        if F.operator is None:
            raise ValueError("projected iteration needs a trifunction in variational form")
        return F.operator
    if not callable(F):
        raise TypeError("expected a descent map G(u, mu) or a variational trifunction")
    return F


def certify_point(G: Callable, u, K: FeasibleSet, mu, samples: int = 256, seed: int = 0) -> float:
    """``min_z <-G(u; mu), z - u>`` over the sampled test points of ``K``."""
    Z = K.test_points(samples, seed)
    g = np.asarray(G(u, mu), dtype=float)
    return float(np.min(-(Z - u) @ g))


def solve_projected_iteration(F, K: FeasibleSet, mu=None, step: float = 0.1, tol: float = 1e-10,
                              max_iter: int = 100_000, start=None, samples: int = 256,
                              seed: int = 0) -> SolutionSet:
    """
    Fixed-point iteration ``u <- proj_K(u + step * G(u; mu))``.

    ``G`` is the descent field (minus the operator), so a fixed point solves
    ``<-G(u; mu), z - u> >= 0`` for all ``z`` in ``K``. Stops once
    ``|u_next - u| <= tol * step``.

    Returns
    -------
    SolutionSet
        A singleton on convergence, certified by sampling ``z`` over the
        boundary and a seeded cloud of ``K``; empty on stall, with the reason
        in ``diagnostics``.

    Raises
    ------
    DivergenceError
        If an iterate leaves the ball of radius 1e6.
    """
    if K.kind not in ("box", "ball"):
        raise ValueError("projected iteration needs a box or ball feasible set")
    if step <= 0:
        raise ValueError("step must be positive")
    G = _resolve_operator(F)
    u = K.project(K.midpoint if start is None else np.asarray(start, dtype=float))
    gap = math.inf
    for it in range(1, max_iter + 1):
        nxt = K.project(u + step * np.asarray(G(u, mu), dtype=float))
        if not np.all(np.isfinite(nxt)) or np.linalg.norm(nxt) > 1e6:
            raise DivergenceError(f"iterate norm exceeded 1e6 after {it} iterations")
        gap = float(np.linalg.norm(nxt - u))
        u = nxt
        if gap <= tol * step:
            res = certify_point(G, u, K, mu, samples, seed)
            diag = {"method": "projected_iteration", "iterations": it, "certification": "sampled",
                    "samples": samples, "seed": seed}
            return SolutionSet(PointSet(u[None, :], K.norm), max(tol, -res), mu, np.array([res]), diag)
    diag = {"method": "projected_iteration", "iterations": max_iter, "stalled": True, "last_gap": gap}
    return SolutionSet(PointSet.empty(K.ambient_dimension, K.norm), tol, mu, np.array([]), diag)


def measure_excess(S_mu: SolutionSet, S_ref: SolutionSet, center, radius: float = math.inf) -> float:
    """``e(S(mu) cap B(center, radius), S(mu_ref))``."""
    return pompeiu_excess(S_mu.points.restrict_to_ball(center, radius), S_ref.points)


def merge_solutions(sets: list[SolutionSet], radius: float) -> SolutionSet:
    """Union of solution sets with points closer than ``radius`` identified (first kept)."""
    if not sets:
        raise ValueError("nothing to merge")
    norm = sets[0].points.norm
    kept, res = [], []
    for S in sets:
        for p, r in zip(S.points, S.residuals):
            if all(float(norm(p - q)) > radius for q in kept):
                kept.append(p)
                res.append(r)
    dim = sets[0].points.dim
    pts = PointSet(np.array(kept).reshape(-1, dim), norm)
    diag = {"merged_runs": len(sets), "dedup_radius": radius,
            "stalled_runs": sum(1 for S in sets if S.diagnostics.get("stalled"))}
    return SolutionSet(pts, max(S.tolerance for S in sets), sets[0].mu, np.array(res), diag)
