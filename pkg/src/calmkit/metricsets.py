"""
Scalar parts calculus and metric machinery on finite point sets.

Distances that can be infinite (empty infima, excess onto the empty set)
are returned as ``math.inf``; no operation here produces NaN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


# %% parts of a real number

@dataclass(frozen=True)
class PartsPair:
    plus: float
    minus: float

    @property
    def value(self) -> float:
        return self.plus - self.minus


def parts(a: float) -> PartsPair:
    """Return ``(a_+, a_-)`` with ``a_+ = max(a, 0)`` and ``a_- = max(-a, 0)``."""
    a = float(a)
    if not math.isfinite(a):
        raise ValueError(f"parts() needs a finite real, got {a!r}")
    return PartsPair(plus=max(a, 0.0), minus=max(-a, 0.0))


def pos(a):
    """Vectorised positive part."""
    return np.maximum(a, 0.0)


def neg(a):
    """Vectorised negative part."""
    return np.maximum(-np.asarray(a), 0.0)


# %% norms and point sets

@dataclass(frozen=True, eq=False)
class Norm:
    """A norm on R^dim.

    ``kind`` is one of ``"euclidean"``, ``"max"``, ``"l1"`` or ``"gram"``.
    A gram norm is ``sqrt(x^T G x)`` for a symmetric positive definite ``G``.
    """

    kind: str = "euclidean"
    gram: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("euclidean", "max", "l1", "gram"):
            raise ValueError(f"unknown norm kind {self.kind!r}")
        if (self.kind == "gram") != (self.gram is not None):
            raise ValueError("a gram matrix is required for, and only for, kind='gram'")
        if self.gram is not None:
            g = np.array(self.gram, dtype=float)
            if g.ndim != 2 or g.shape[0] != g.shape[1]:
                raise ValueError("gram matrix must be square")
            g.setflags(write=False)
            object.__setattr__(self, "gram", g)

    @property
    def dim(self) -> int | None:
        return None if self.gram is None else self.gram.shape[0]

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "euclidean":
            return np.sqrt(np.sum(x * x, axis=-1))
        if self.kind == "max":
            return np.max(np.abs(x), axis=-1)
        if self.kind == "l1":
            return np.sum(np.abs(x), axis=-1)
        gx = x @ self.gram
        return np.sqrt(np.maximum(np.sum(gx * x, axis=-1), 0.0))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Norm) or self.kind != other.kind:
            return False
        if self.gram is None:
            return True
        return self.gram.shape == other.gram.shape and bool(np.array_equal(self.gram, other.gram))

    def __hash__(self):
        return hash((self.kind, None if self.gram is None else self.gram.tobytes()))


EUCLIDEAN = Norm()


@dataclass(frozen=True, eq=False)
class PointSet:
    """A finite (possibly empty) set of points in R^dim with a declared norm."""

    points: np.ndarray
    norm: Norm = field(default=EUCLIDEAN)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.ndim != 2:
            raise ValueError("points must be a 2-D array of shape (count, dim)")
        if self.norm.dim is not None and pts.shape[1] != self.norm.dim:
            raise ValueError(f"points have dimension {pts.shape[1]}, norm expects {self.norm.dim}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def empty(cls, dim: int, norm: Norm = EUCLIDEAN) -> "PointSet":
        return cls(np.zeros((0, dim)), norm)

    @classmethod
    def of(cls, points: Iterable, norm: Norm = EUCLIDEAN, dim: int | None = None) -> "PointSet":
        pts = [np.atleast_1d(np.asarray(p, dtype=float)) for p in points]
        if not pts:
            if dim is None:
                dim = norm.dim if norm.dim is not None else 1
            return cls.empty(dim, norm)
        return cls(np.stack(pts), norm)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]

    def __iter__(self):
        return iter(self.points)

    def restrict_to_ball(self, center, radius: float) -> "PointSet":
        """Points strictly inside the open ball ``B(center, radius)``."""
        if radius == math.inf or len(self) == 0:
            return self
        center = _as_point(center, self.dim)
        keep = self.norm(self.points - center) < radius
        return PointSet(self.points[keep], self.norm)


def _as_point(a, dim: int) -> np.ndarray:
    a = np.atleast_1d(np.asarray(a, dtype=float))
    if a.shape != (dim,):
        raise ValueError(f"point of shape {a.shape} does not live in R^{dim}")
    return a


def _check_compatible(A: PointSet, B: PointSet) -> None:
    if A.dim != B.dim:
        raise ValueError(f"dimension mismatch: {A.dim} vs {B.dim}")
    if A.norm != B.norm:
        raise ValueError("point sets carry different norms")


def point_to_set_distance(a, B: PointSet) -> float:
    a = _as_point(a, B.dim)
    if len(B) == 0:
        return math.inf
    return float(np.min(B.norm(B.points - a)))


def pompeiu_excess(A: PointSet, B: PointSet) -> float:
    """``e(A, B) = sup_{a in A} d(a, B)`` with ``e(., empty) = inf`` and ``e(empty, B) = 0``."""
    _check_compatible(A, B)
    if len(B) == 0:
        return math.inf
    if len(A) == 0:
        return 0.0
    diff = A.points[:, None, :] - B.points[None, :, :]
    return float(np.max(np.min(A.norm(diff), axis=1)))


def hausdorff_distance(A: PointSet, B: PointSet) -> float:
    return max(pompeiu_excess(A, B), pompeiu_excess(B, A))


# %% empirical Hoelder fits

@dataclass(frozen=True)
class HolderFit:
    exponent_estimate: float
    rank_estimate: float
    residual: float
    sample_count: int
    discarded: int = 0

    def to_dict(self) -> dict:
        return {
            "exponent_estimate": self.exponent_estimate,
            "rank_estimate": self.rank_estimate,
            "residual": self.residual,
            "sample_count": self.sample_count,
            "discarded": self.discarded,
        }


def fit_holder_exponent(samples: Sequence[tuple[float, float]]) -> HolderFit:
    """
    Least-squares fit of ``log d_out = log k + eps * log d_in``.

    Samples with ``d_out == 0`` carry no information on the log scale; they
    are dropped from the regression and reported in ``discarded``.

    Returns
    -------
    HolderFit
        ``residual`` is the largest absolute deviation of a retained sample
        from the fitted line in log-log coordinates.
    """
    arr = np.asarray(samples, dtype=float).reshape(-1, 2)
    d_in, d_out = arr[:, 0], arr[:, 1]
    if np.any(d_in <= 0) or np.any(d_out < 0) or not np.all(np.isfinite(arr)):
        raise ValueError("samples need d_in > 0 and finite d_out >= 0")
    usable = d_out > 0
    if np.count_nonzero(usable) < 2:
        raise ValueError("at least two samples with nonzero output distance are needed")
    x, y = np.log(d_in[usable]), np.log(d_out[usable])
    if np.ptp(x) == 0:
        raise ValueError("input distances must not all coincide")
    slope, intercept = np.polyfit(x, y, 1)
    res = float(np.max(np.abs(y - (intercept + slope * x))))
    return HolderFit(
        exponent_estimate=float(slope),
        rank_estimate=float(np.exp(intercept)),
        residual=res,
        sample_count=len(arr),
        discarded=int(len(arr) - np.count_nonzero(usable)),
    )
