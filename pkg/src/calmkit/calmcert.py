"""
Hoelder calmness certificates.

The engine works in three layers:

* :func:`lemma_bound` -- when does ``x^p - l x^q <= y`` force ``x <= k y^delta``;
* :func:`classify_case` / :func:`certificate` -- the three calm regimes of a
  parametric equilibrium problem and the resulting rank and exponent;
* :func:`ns_constants` -- how the Navier-Stokes constants feed those regimes.
"""

from __future__ import annotations

import enum
import math
import sys
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .metricsets import parts
from .trifunc import MixedPair, Trifunction

ATOL = 1e-9
RTOL = 1e-9


class NotApplicable(ValueError):
    """The requested bound does not exist for these inputs."""


class NotCalm(ValueError):
    """The constants fall in none of the calm regimes."""


class HypothesesFail(ValueError):
    """Preconditions of a certificate are violated (distinct from a non-calm verdict)."""


def _leq(lhs: float, rhs: float) -> bool:
    return lhs <= rhs + ATOL + RTOL * max(abs(lhs), abs(rhs))


def _margin(lhs: float, rhs: float) -> float:
    return rhs + ATOL + RTOL * max(abs(lhs), abs(rhs)) - lhs


def _pow(x: float, e: float) -> float:
    # ranks beyond double range are reported as +inf rather than raising
    try:
        return x ** e
    except OverflowError:
        return math.inf


# %% x^p - l x^q <= y  ==>  x <= k y^delta

@dataclass(frozen=True)
class LemmaBound:
    k: float
    delta: float
    eps0: float
    eps: float
    branch: str


def lemma_bound(p: float, q: float, l: float, eps: float | None = None) -> LemmaBound:
    """
    Rank and exponent for the implication ``x^p - l x^q <= y => x <= k y^(1/p)``.

    Branches, in order of precedence: ``l = 0`` (``k = 1``, any ``x > 0``);
    ``p = q, l < 1`` (``k = (1 - l)^(-1/p)``, any ``x > 0``);
    ``p < q`` (valid for ``x`` in ``(0, eps)`` with ``eps < eps0 = l^(1/(p-q))``,
    ``k = eps (eps^p - l eps^q)^(-1/p)``). When ``eps`` is omitted in the last
    branch it defaults to ``eps0 / 2``.
    """
    if p <= 0 or q <= 0 or l < 0:
        raise ValueError("need p > 0, q > 0, l >= 0")
    delta = 1.0 / p
    if l == 0:
        return LemmaBound(1.0, delta, math.inf, math.inf if eps is None else eps, "l=0")
    if p == q:
        if l < 1:
            return LemmaBound(_pow(1.0 - l, -delta), delta, math.inf,
                              math.inf if eps is None else eps, "p=q")
        raise NotApplicable(f"p = q with l = {l} >= 1: x^p (1 - l) <= 0 < y for every x")
    if p > q:
        raise NotApplicable("p > q with l > 0: x^p - l x^q < 0 near 0, so no bound x <= k y^delta holds")
    log_eps0 = math.log(l) / (p - q)
    if log_eps0 < math.log(sys.float_info.min):
        raise NotApplicable(f"p < q with l = {l}: the validity interval (0, exp({log_eps0:.4g})) "
                            "is below floating-point range")
    eps0 = math.exp(log_eps0) if log_eps0 < math.log(sys.float_info.max) else math.inf
    if eps is None:
        eps = 0.5 * eps0 if math.isfinite(eps0) else 1.0
    if not 0 < eps < eps0:
        raise ValueError(f"eps must lie in (0, {eps0!r}), got {eps!r}")
    # eps (eps^p - l eps^q)^(-1/p) = (1 - l eps^(q-p))^(-1/p), free of overflow
    t = math.exp(min(math.log(l) + (q - p) * math.log(eps), 0.0))
    k = _pow(1.0 - t, -delta) if t < 1.0 else math.inf
    return LemmaBound(k, delta, eps0, eps, "p<q")


@dataclass(frozen=True)
class LemmaCheck:
    points: int
    checked: int
    violations: int
    worst_excess: float


def lemma_oracle(p: float, q: float, l: float, bound: LemmaBound, n_points: int = 10_000,
                 x_max: float = 10.0, atol: float = 1e-12) -> LemmaCheck:
    """Brute-force check of ``x <= k y^delta`` with ``y = x^p - l x^q`` on a grid in ``(0, min(eps, x_max))``."""
    top = min(bound.eps, x_max)
    x = np.linspace(0.0, top, n_points + 2)[1:-1]
    # factored form of x^p - l x^q, avoiding cancellation when the bound is tight
    y = x ** p * (1.0 - l * x ** (q - p))
    ok = y > 0
    excess = x[ok] - bound.k * y[ok] ** bound.delta
    worst = float(np.max(excess)) if excess.size else -math.inf
    return LemmaCheck(n_points, int(np.count_nonzero(ok)), int(np.count_nonzero(excess > atol)), worst)


def necessity_witness(p: float, q: float, l: float, k: float = 1.0, delta: float = 1.0,
                      n_points: int = 10_000) -> tuple[float, float] | None:
    """
    Search for ``(x, y)`` with ``x^p - l x^q <= y``, ``y > 0`` and ``x > k y^delta``.

    Outside the calm branches a grid point with ``x^p - l x^q <= 0`` exists
    near the origin; any positive ``y`` below ``(x / (2k))^(1/delta)`` then
    defeats the candidate ``(k, delta)``. Returns ``None`` when none is found.
    """
    if l == 0:
        return None
    top = l ** (1.0 / (p - q)) if p > q else 1.0
    x = np.linspace(0.0, top, n_points + 2)[1:-1]
    phi = x ** p - l * x ** q
    idx = np.flatnonzero(phi <= 0)
    if idx.size == 0:
        return None
    xw = float(x[idx[len(idx) // 2]])
    y = (xw / (2.0 * k)) ** (1.0 / delta)
    if y <= 0:
        y = np.nextafter(0.0, 1.0)
    if xw > k * y ** delta and xw ** p - l * xw ** q <= y:
        return xw, float(y)
    return None


# %% constants, cases, certificates

@dataclass(frozen=True)
class HolderConstants:
    m: float
    c: float
    a: float
    b: float
    alpha: float
    beta: float
    theta: float
    xi: float

    def __post_init__(self):
        for name in ("m", "b", "alpha", "beta", "xi"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("c", "a", "theta"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)!r}")
        if not self.theta < self.beta:
            raise ValueError("need theta < beta")
        if not self.c < self.m:
            raise ValueError("need c < m")

    @property
    def theta_zero(self) -> bool:
        return self.theta == 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("m", "c", "a", "b", "alpha", "beta", "theta", "xi")}


class CalmnessCase(str, enum.Enum):
    CASE1 = "Case1"
    CASE2 = "Case2"
    CASE3 = "Case3"
    NOT_CALM = "NotCalm"


def _same(x: float, y: float) -> bool:
    return math.isclose(x, y, rel_tol=1e-12, abs_tol=1e-12)


def classify_case(h: HolderConstants) -> CalmnessCase:
    """a = 0 wins over the other two regimes."""
    if h.a == 0:
        return CalmnessCase.CASE3
    if _same(h.beta, h.alpha + h.theta):
        return CalmnessCase.CASE2 if h.a + h.c < h.m else CalmnessCase.NOT_CALM
    if h.beta < h.alpha + h.theta:
        return CalmnessCase.CASE1
    return CalmnessCase.NOT_CALM


@dataclass(frozen=True)
class CalmnessCertificate:
    case: CalmnessCase
    delta: float
    k: float
    r: float | None
    unique_local_solution: bool
    constants: HolderConstants | None = None
    details: dict = field(default_factory=dict)

    def bound(self, d_mu: float) -> float:
        return self.k * d_mu ** self.delta

    def to_dict(self) -> dict:
        out = {
            "case": self.case.value,
            "delta": self.delta,
            "k": self.k,
            "r": self.r,
            "unique_local_solution": self.unique_local_solution,
            "constants": None if self.constants is None else self.constants.to_dict(),
        }
        if self.details:
            out["details"] = dict(self.details)
        return out


def case1_radius_bound(h: HolderConstants) -> float:
    return ((h.m - h.c) / h.a) ** (1.0 / (h.alpha + h.theta - h.beta))


def case1_rank(h: HolderConstants, r: float) -> float:
    p = h.beta - h.theta
    inner = r ** p - (h.a / (h.m - h.c)) * r ** h.alpha
    if inner <= 0:
        return math.inf
    return r * inner ** (-1.0 / p) * (h.b / (h.m - h.c)) ** (1.0 / p)


def certificate(h: HolderConstants, r: float | None = None) -> CalmnessCertificate:
    """
    Calmness exponent ``delta = xi / (beta - theta)`` and rank ``k``.

    In Case1 the neighbourhood is cut down to the ball of radius ``r``; the
    default is half of the admissible supremum.
    """
    case = classify_case(h)
    p = h.beta - h.theta
    delta = h.xi / p
    if case is CalmnessCase.NOT_CALM:
        raise NotCalm(f"constants {h.to_dict()} satisfy none of the calm regimes")
    if case is CalmnessCase.CASE3:
        k = (h.b / (h.m - h.c)) ** (1.0 / p)
        return CalmnessCertificate(case, delta, k, None, True, h)
    if case is CalmnessCase.CASE2:
        k = (h.b / (h.m - h.c - h.a)) ** (1.0 / p)
        return CalmnessCertificate(case, delta, k, None, True, h)
    sup = case1_radius_bound(h)
    if r is None:
        r = 0.5 * sup
    if not 0 < r < sup:
        raise ValueError(f"Case1 radius must lie in (0, {sup!r}), got {r!r}")
    return CalmnessCertificate(case, delta, case1_rank(h, r), r, False, h)


def best_case1_radius(h: HolderConstants, n: int = 2001) -> tuple[float, float]:
    """Grid search for the radius minimising the Case1 rank; returns ``(r, k)``."""
    sup = case1_radius_bound(h)
    rs = np.linspace(0.0, sup, n + 2)[1:-1]
    ks = np.array([case1_rank(h, r) for r in rs])
    i = int(np.argmin(ks))
    return float(rs[i]), float(ks[i])


def check_base_inequality(d_vu: float, d_mu: float, h: HolderConstants) -> bool:
    """``d_vu^(beta-theta) <= a/(m-c) d_vu^alpha + b/(m-c) d_mu^xi`` within tolerance."""
    lhs = d_vu ** (h.beta - h.theta)
    rhs = h.a / (h.m - h.c) * d_vu ** h.alpha + h.b / (h.m - h.c) * d_mu ** h.xi
    return _leq(lhs, rhs)


# %% condition checks on solved instances

def _default_distance(u, v) -> float:
    return float(np.linalg.norm(np.atleast_1d(np.asarray(u, float) - np.asarray(v, float))))


@dataclass(frozen=True)
class ConditionReport:
    passed: dict[str, list[bool]]
    worst_margin: dict[str, float]

    @property
    def holds(self) -> bool:
        return all(all(v) for v in self.passed.values())

    def to_dict(self) -> dict:
        return {"holds": self.holds,
                "passed": {k: all(v) for k, v in self.passed.items()},
                "worst_margin": dict(self.worst_margin)}


def _collect(margins: dict[str, list[float]]) -> ConditionReport:
    passed = {k: [m >= 0 for m in v] for k, v in margins.items()}
    worst = {k: (min(v) if v else math.inf) for k, v in margins.items()}
    return ConditionReport(passed, worst)


def check_calmness_conditions(F: Trifunction, u_bar, mu_bar, candidates: Sequence, h: HolderConstants,
                               distance: Callable = _default_distance,
                               param_distance: Callable = _default_distance) -> ConditionReport:
    """
    Evaluate the two a-priori estimates on solved candidates ``(v, mu)``:

    (i)  ``m d^beta(u, v) <= F(u, v, u; mu_bar)_- + F(u, v, v; mu_bar)_+``;
    (ii) ``F(u, v, v; mu_bar) <= c d^beta + d^theta (a d^alpha + b d(mu, mu_bar)^xi)`` for ``v != u``.

    Margins are ``rhs - lhs`` (with tolerance), negative when violated.
    """
    if len(candidates) == 0:
        raise ValueError("no candidates")
    margins = {"i": [], "ii": []}
    for v, mu in candidates:
        d = distance(u_bar, v)
        dm = param_distance(mu, mu_bar)
        f_vu = F(u_bar, v, u_bar, mu_bar)
        f_vv = F(u_bar, v, v, mu_bar)
        lhs = h.m * d ** h.beta
        margins["i"].append(_margin(lhs, parts(f_vu).minus + parts(f_vv).plus))
        if d > 0:
            rhs = h.c * d ** h.beta + d ** h.theta * (h.a * d ** h.alpha + h.b * dm ** h.xi)
            margins["ii"].append(_margin(f_vv, rhs))
    return _collect(margins)


def check_mixed_conditions(pair: MixedPair, u_bar, mu_bar, candidates: Sequence, h: HolderConstants,
                               b1: float, distance: Callable = _default_distance,
                               param_distance: Callable = _default_distance) -> ConditionReport:
    """
    Mixed-form estimates with ``b = b1 + b2`` split between ``f`` and ``g``:

    (i)   ``m d^beta <= [f(u,v;mu_bar) + g(u,v;mu_bar)]_- + [f(v,u;mu_bar) - g(u,v;mu_bar)]_-``;
    (ii)  ``f(v,u;mu) - f(v,u;mu_bar) <= b1 d^theta d(mu,mu_bar)^xi``;
    (iii) ``g(u,v;mu_bar) + g(v,u;mu) <= c d^beta + d^theta (a d^alpha + b2 d(mu,mu_bar)^xi)``;

    plus the reduced estimate on ``F(u, v, v; mu_bar)`` that the mixed form
    hands to the trifunction theory (key ``"reduction"``).
    """
    if len(candidates) == 0:
        raise ValueError("no candidates")
    if not 0 <= b1 <= h.b:
        raise ValueError("b1 must lie in [0, b]")
    b2 = h.b - b1
    f, g = pair.f, pair.g
    margins = {"i": [], "ii": [], "iii": [], "reduction": []}
    for v, mu in candidates:
        d = distance(u_bar, v)
        dm = param_distance(mu, mu_bar)
        fuv, fvu = f(u_bar, v, mu_bar), f(v, u_bar, mu_bar)
        guv = g(u_bar, v, mu_bar)
        margins["i"].append(_margin(h.m * d ** h.beta, parts(fuv + guv).minus + parts(fvu - guv).minus))
        if d == 0:
            continue
        margins["ii"].append(_margin(f(v, u_bar, mu) - fvu, b1 * d ** h.theta * dm ** h.xi))
        lhs3 = guv + g(v, u_bar, mu)
        rhs3 = h.c * d ** h.beta + d ** h.theta * (h.a * d ** h.alpha + b2 * dm ** h.xi)
        margins["iii"].append(_margin(lhs3, rhs3))
        F_vv = -fvu + guv
        rhs = h.c * d ** h.beta + d ** h.theta * (h.a * d ** h.alpha + h.b * dm ** h.xi)
        margins["reduction"].append(_margin(F_vv, rhs))
    return _collect(margins)


# %% Navier-Stokes constants

def ns_a_coefficient(nu: float, rho_c1: float, tau: float, monotone_near: bool,
                     c2: float | None = None, c_tau: float | None = None) -> tuple[float, str]:
    """The three-branch choice of ``a``; returns ``(a, branch_label)``.

    The middle value is read as the midpoint ``((nu - rho c1) + c(2)) / 2``.
    """
    if monotone_near:
        return 0.0, "monotone"
    gap = nu - rho_c1
    if tau == 2:
        if c2 is None:
            raise ValueError("tau = 2 needs c(2)")
        if 0 < c2 < gap:
            return 0.5 * (gap + c2), "relaxed"
        return 1.0 + c2, "generic"
    if c_tau is None:
        raise ValueError("tau != 2 needs c(tau)")
    return 1.0 + c_tau, "generic"


def ns_constants(nu: float, rho: float, c1: float, c0: float, theta: float, tau: float,
                 monotone_near: bool = False, c2: float | None = None,
                 c_tau: float | None = None) -> HolderConstants:
    """Map viscosity, convection and trace constants to ``(m, c, a, b, alpha, beta, theta, xi)``."""
    if not nu > 0 or not rho > 0:
        raise ValueError("nu and rho must be positive")
    if not 0 <= theta <= 1:
        raise ValueError("theta must lie in [0, 1]")
    if not rho * c1 < nu:
        raise HypothesesFail(f"rho c1 = {rho * c1!r} is not below nu = {nu!r}")
    if not tau > theta:
        raise HypothesesFail(f"tau = {tau!r} must exceed theta = {theta!r}")
    a, _ = ns_a_coefficient(nu, rho * c1, tau, monotone_near, c2=c2, c_tau=c_tau)
    return HolderConstants(m=nu, c=rho * c1, a=a, b=c0, alpha=tau - theta, beta=2.0, theta=theta, xi=1.0)
