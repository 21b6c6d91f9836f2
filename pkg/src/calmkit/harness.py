"""
Experiment runner: build a problem family, certify it, sweep parameter
perturbations along a ray, measure excess of the perturbed solution sets
over the reference set, fit an empirical Hoelder exponent and compare
against the certificate.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import calmcert, nshvi
from .calmcert import CalmnessCertificate, HolderConstants, HypothesesFail, NotApplicable, NotCalm
from .epsolve import FeasibleSet, SolutionSet, measure_excess, solve_grid, solve_projected_iteration
from .metricsets import fit_holder_exponent
from .trifunc import Bifunction, MixedPair, Trifunction, mixed_trifunction

SCHEMA_VERSION = 1
CSV_COLUMNS = ("magnitude", "param_distance", "excess", "bound_value", "residual", "solutions_in_V")
FIT_TOLERANCE = 0.1

Verdict = Literal["certified_bound_holds", "bound_violated", "hypotheses_fail", "inconclusive"]


class ReferenceSolveError(RuntimeError):
    """The reference problem has no solution; the calmness question is void."""


# %% configuration

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class SolverConfig(_Strict):
    strategy: Literal["grid", "projected_iteration"] | None = None
    tol: float = Field(1e-10, gt=0)
    seed: int = Field(0, ge=0)
    n_starts: int = Field(4, ge=1)
    start_spread: float = Field(1.0, ge=0)
    step: float | None = Field(None, gt=0)
    max_iter: int = Field(200_000, ge=1)
    samples: int = Field(256, ge=1)
    workers: int = Field(1, ge=1)
    coarse_factor: float = Field(100.0, gt=1)


class NeighborhoodConfig(_Strict):
    center: list[float] | None = None
    radius: float | None = Field(None, gt=0)


class OutputConfig(_Strict):
    out_dir: str = "out"
    stem: str = "report"
    format: Literal["csv", "json", "both"] = "both"


class SyntheticConfig(_Strict):
    grid_points: int = Field(2001, ge=3)
    lo: float = 0.0
    hi: float = 1.0
    mu_bar: float = 0.5


class MixedConfig(_Strict):
    lam: float = Field(0.5, alias="lambda", ge=0, lt=1)
    lambda_split: Literal["c", "a"] = "c"
    mu_bar: float = 0.5
    lo: float = -2.0
    hi: float = 2.0
    grid_points: int = Field(4001, ge=3)


class ControlConfig(_Strict):
    family: Literal["linear", "bilinear", "clarke"] = "linear"
    kappa: list[float] = [0.5, -0.3]
    M: list[list[float]] = [[0.5, 0.0], [0.0, 0.5]]
    g: list[float] = [1.0, 0.0]
    bilinear_kappa: float = -0.5
    superpotential: Literal["smooth_quadratic", "scaled_norm"] = "smooth_quadratic"
    coefficients: list[float] = [-0.5]


class GridAxisConfig(_Strict):
    lo: float = -1.0
    hi: float = 1.0
    count: int = Field(41, ge=2)


class NavierStokesConfig(_Strict):
    n: int = Field(2, ge=1, le=len(nshvi.CATALOGUE))
    quad_order: int = Field(12, ge=2)
    nu: float = Field(1.0, gt=0)
    rho: float | None = Field(None, gt=0)
    tau: float = Field(2.0, gt=0)
    theta: float = Field(1.0, ge=0, le=1)
    forcing_amplitude: float = 1.0
    halfwidth: float = Field(10.0, gt=0)
    control: ControlConfig = ControlConfig()
    direction: list[float] = [1.0, 0.5, 0.0, 0.0, 0.0, 0.0]
    distance_method: Literal["auto", "general", "homogeneous", "linear", "constant_linear"] = "auto"
    c1_samples: int = Field(32, ge=1)
    czeta_samples: int = Field(64, ge=16)
    czeta_radii: list[float] | None = None
    grid_axis: GridAxisConfig = GridAxisConfig()


class ExperimentConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    problem: Literal["synthetic_pe", "mixed_pme", "navier_stokes"]
    magnitudes: list[float] = [0.2, 0.1, 0.05, 0.02, 0.01]
    synthetic: SyntheticConfig = SyntheticConfig()
    mixed: MixedConfig = MixedConfig()
    navier_stokes: NavierStokesConfig = NavierStokesConfig()
    solver: SolverConfig = SolverConfig()
    neighborhood: NeighborhoodConfig = NeighborhoodConfig()
    output: OutputConfig = OutputConfig()

    @field_validator("magnitudes")
    @classmethod
    def _decreasing(cls, v):
        if any(m <= 0 or not math.isfinite(m) for m in v):
            raise ValueError("perturbation magnitudes must be finite and positive")
        if any(b >= a for a, b in zip(v, v[1:])):
            raise ValueError("perturbation magnitudes must be strictly decreasing")
        return v


def load_config(source: str | Path | dict) -> ExperimentConfig:
    """Parse a config from a path, a JSON string or a dict; unknown keys are rejected."""
    if isinstance(source, dict):
        return ExperimentConfig.model_validate(source)
    p = Path(source)
    text = p.read_text() if p.exists() else str(source)
    return ExperimentConfig.model_validate_json(text)


# %% problem families

@dataclass
class Family:
    """Everything the sweep needs, independent of the problem type."""

    name: str
    mu_bar: Any
    perturb: Callable[[float], Any]
    distance: Callable[[Any, Any], float]
    solve: Callable[[Any, float], SolutionSet]
    state_distance: Callable[[Any, Any], float]
    grid_spacing: float
    certify: Callable[[np.ndarray], CalmnessCertificate]
    check: Callable[[np.ndarray, list, CalmnessCertificate], dict]
    default_radius: Callable[[np.ndarray, CalmnessCertificate | None], float]
    info: dict = field(default_factory=dict)


def _abs_distance(a, b) -> float:
    return abs(float(a) - float(b))


def _scalar_dist(u, v) -> float:
    return float(np.linalg.norm(np.atleast_1d(np.asarray(u, float) - np.asarray(v, float))))


def _synthetic(cfg: ExperimentConfig) -> Family:
    sc, so = cfg.synthetic, cfg.solver
    K = FeasibleSet.interval_grid(sc.lo, sc.hi, sc.grid_points)

    def ev(u, v, w, mu):
        return np.sum((np.asarray(w) - mu) * (np.asarray(v) - np.asarray(u)), axis=-1)

    F = Trifunction(ev, feasible_set=K, batched=True)
    h = HolderConstants(m=1.0, c=0.0, a=0.0, b=1.0, alpha=1.0, beta=2.0, theta=1.0, xi=1.0)

    def check(u_bar, cands, cert):
        return {"calmness_conditions": calmcert.check_calmness_conditions(F, u_bar, sc.mu_bar, cands, h,
                                                                 param_distance=_abs_distance).to_dict()}

    return Family(
        name="synthetic_pe", mu_bar=sc.mu_bar, perturb=lambda e: sc.mu_bar + e, distance=_abs_distance,
        solve=lambda mu, tol: solve_grid(F, K, mu, tol), state_distance=_scalar_dist,
        grid_spacing=(sc.hi - sc.lo) / (sc.grid_points - 1),
        certify=lambda u_bar: calmcert.certificate(h), check=check,
        default_radius=lambda u_bar, cert: math.inf,
        info={"trifunction": "(w - mu)(v - u)", "constants": h.to_dict()},
    )


def _mixed(cfg: ExperimentConfig) -> Family:
    mc, so = cfg.mixed, cfg.solver
    lam = mc.lam
    strategy = so.strategy or "projected_iteration"

    def f(u, v, mu=None):
        return np.sum((np.asarray(v) - np.asarray(u)) * np.asarray(u), axis=-1)

    def g(u, v, mu):
        u = np.asarray(u)
        return np.sum((np.asarray(v) - u) * (lam * np.sin(u) - mu), axis=-1)

    pair = MixedPair(Bifunction(f, diagonal_zero=True, batched=True), Bifunction(g, batched=True))
    if lam == 0:
        h = HolderConstants(m=1.0, c=0.0, a=0.0, b=1.0, alpha=1.0, beta=2.0, theta=1.0, xi=1.0)
    elif mc.lambda_split == "c":
        h = HolderConstants(m=1.0, c=lam, a=0.0, b=1.0, alpha=1.0, beta=2.0, theta=1.0, xi=1.0)
    else:
        h = HolderConstants(m=1.0, c=0.0, a=lam, b=1.0, alpha=1.0, beta=2.0, theta=1.0, xi=1.0)

    def G(u, mu):
        u = np.asarray(u, float)
        return -(u + lam * np.sin(u) - mu)

    if strategy == "grid":
        K = FeasibleSet.interval_grid(mc.lo, mc.hi, mc.grid_points)
        F = mixed_trifunction(pair, K)
        spacing = (mc.hi - mc.lo) / (mc.grid_points - 1)

        def solve(mu, tol):
            return solve_grid(F, K, mu, tol)
    else:
        K = FeasibleSet.box([mc.lo], [mc.hi])
        spacing = 0.0

        def solve(mu, tol):
            return solve_projected_iteration(G, K, mu, step=so.step or 0.5, tol=tol, max_iter=so.max_iter,
                                             samples=so.samples, seed=so.seed)

    def check(u_bar, cands, cert):
        return {"mixed_conditions": calmcert.check_mixed_conditions(pair, u_bar, mc.mu_bar, cands, h, b1=0.0,
                                                                 param_distance=_abs_distance).to_dict()}

    return Family(
        name="mixed_pme", mu_bar=mc.mu_bar, perturb=lambda e: mc.mu_bar + e, distance=_abs_distance,
        solve=solve, state_distance=_scalar_dist, grid_spacing=spacing,
        certify=lambda u_bar: calmcert.certificate(h), check=check,
        default_radius=lambda u_bar, cert: math.inf,
        info={"f": "(v - u) u", "g": "(v - u)(lambda sin u - mu)", "lambda": lam,
              "lambda_split": mc.lambda_split, "strategy": strategy, "constants": h.to_dict()},
    )


def _ns_control(cc: ControlConfig, theta: float) -> nshvi.BoundaryControl:
    if cc.family == "linear":
        return nshvi.linear_control(cc.kappa, cc.M, theta)
    if cc.family == "bilinear":
        return nshvi.bilinear_control(cc.bilinear_kappa, cc.g, theta)
    j = nshvi.make_superpotential(cc.superpotential, *cc.coefficients)
    return nshvi.clarke_control(j, theta)


def _navier_stokes(cfg: ExperimentConfig) -> Family:
    nc, so = cfg.navier_stokes, cfg.solver
    basis = nshvi.build_basis(nc.n, nc.quad_order)
    model = nshvi.assemble(basis, nc.nu, nshvi.trig_forcing(nc.forcing_amplitude),
                           forcing_label=f"trig({nc.forcing_amplitude!r})")
    mu_bar = _ns_control(nc.control, nc.theta)
    strategy = so.strategy or ("projected_iteration" if mu_bar.linear_in_s else "grid")
    if strategy == "grid":
        ax = nc.grid_axis
        axis = np.linspace(ax.lo, ax.hi, ax.count)
        problem = nshvi.grid_problem(model, mu_bar, axis)
        spacing = float(np.max(problem.norm(np.eye(model.n) * (axis[1] - axis[0]))))
    else:
        problem = nshvi.stationary_problem(model, mu_bar, nc.halfwidth)
        spacing = 0.0
    direction = np.asarray(nc.direction, float)
    if direction.shape != (len(mu_bar.coefficients),):
        # a short direction perturbs the leading coefficients only
        d = np.zeros(len(mu_bar.coefficients))
        d[: len(direction)] = direction[: len(d)]
        direction = d
    c1 = nshvi.estimate_c1(model, samples=nc.c1_samples, seed=so.seed)
    state = {}

    def distance(mu, mu_ref):
        return nshvi.parameter_distance(mu, mu_ref, model, method=nc.distance_method)

    def solve(mu, tol):
        return nshvi.solve_ns(problem, tol=tol, strategy=strategy, control=mu, step=so.step,
                              max_iter=so.max_iter, n_starts=so.n_starts, start_spread=so.start_spread,
                              seed=so.seed)

    def certify(u_bar):
        cert = nshvi.ns_certificate(problem, u_bar, rho=nc.rho, tau=nc.tau, c1=c1,
                                    czeta_radii=nc.czeta_radii, czeta_samples=nc.czeta_samples, seed=so.seed)
        state["cert"] = cert
        return cert

    def check(u_bar, cands, cert):
        dist = lambda mu, ref=None: distance(mu, mu_bar)
        out = {"ns_chain": nshvi.check_ns_estimate(problem, u_bar, mu_bar, cands, cert, dist)}
        pair = nshvi.ns_mixed_pair(problem)
        out["mixed_conditions"] = calmcert.check_mixed_conditions(
            pair, u_bar, mu_bar, cands, cert.constants, b1=0.0,
            distance=lambda a, b: float(problem.norm(np.asarray(a) - np.asarray(b))),
            param_distance=lambda mu, ref: distance(mu, ref)).to_dict()
        return out

    def radius(u_bar, cert):
        if cert is None:
            return math.inf
        return float(cert.details["rho"] - cert.details["u_bar_norm"])

    return Family(
        name="navier_stokes", mu_bar=mu_bar, perturb=lambda e: mu_bar.ray(direction, e), distance=distance,
        solve=solve, state_distance=lambda u, v: float(problem.norm(np.asarray(u) - np.asarray(v))),
        grid_spacing=spacing, certify=certify, check=check, default_radius=radius,
        info={"n": nc.n, "nu": nc.nu, "strategy": strategy, "control": mu_bar.to_dict(),
              "direction": [float(x) for x in direction], "c1": c1.value,
              "skew_residual": model.skew_residual, "boundary_measure": model.boundary_measure},
    )


_FAMILIES = {"synthetic_pe": _synthetic, "mixed_pme": _mixed, "navier_stokes": _navier_stokes}


# %% report

@dataclass(frozen=True)
class SweepRow:
    magnitude: float
    param_distance: float
    excess: float
    bound_value: float
    residual: float
    solutions_in_V: int
    solutions: int
    excess_coarse: float
    excess_extrapolated: float
    slack: float
    violated: bool


@dataclass
class ExperimentReport:
    problem: str
    config: dict
    reference: dict
    certificate: dict | None
    rows: list[SweepRow]
    fit: dict | None
    verdict: str
    notes: list[str]
    hypothesis_checks: dict
    info: dict

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "problem": self.problem,
            "config": self.config,
            "reference": self.reference,
            "certificate": self.certificate,
            "rows": [asdict(r) for r in self.rows],
            "fit": self.fit,
            "verdict": self.verdict,
            "notes": list(self.notes),
            "hypothesis_checks": self.hypothesis_checks,
            "info": self.info,
        }


def _encode(obj):
    if isinstance(obj, float):
        if math.isnan(obj):
            return "nan"
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return obj
    if isinstance(obj, (np.floating,)):
        return _encode(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return [_encode(x) for x in obj.tolist()]
    if isinstance(obj, dict):
        return {str(k): _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(x) for x in obj]
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    return obj


def _decode(obj):
    if isinstance(obj, str) and obj in ("inf", "-inf", "nan"):
        return float(obj)
    if isinstance(obj, dict):
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(x) for x in obj]
    return obj


def report_to_json(report: ExperimentReport) -> str:
    return json.dumps(_encode(report.to_dict()), sort_keys=True, indent=2, allow_nan=False) + "\n"


def report_from_dict(doc: dict) -> ExperimentReport:
    doc = _decode(doc)
    rows = [SweepRow(**r) for r in doc["rows"]]
    return ExperimentReport(doc["problem"], doc["config"], doc["reference"], doc["certificate"], rows,
                            doc["fit"], doc["verdict"], doc["notes"], doc["hypothesis_checks"], doc["info"])


def report_to_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in report.rows:
        w.writerow([repr(float(r.magnitude)), repr(float(r.param_distance)), repr(float(r.excess)),
                    repr(float(r.bound_value)), repr(float(r.residual)), str(int(r.solutions_in_V))])
    return buf.getvalue()


def emit_report(report: ExperimentReport, out_dir: str | Path, stem: str = "report",
                format: str = "both") -> list[Path]:
    """Write ``<stem>.csv`` and/or ``<stem>.json``; returns the written paths."""
    if format not in ("csv", "json", "both"):
        raise ValueError(f"unknown format {format!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if format in ("csv", "both"):
        p = out / f"{stem}.csv"
        p.write_text(report_to_csv(report))
        written.append(p)
    if format in ("json", "both"):
        p = out / f"{stem}.json"
        p.write_text(report_to_json(report))
        written.append(p)
    return written


# %% pipeline

def build_family(cfg: ExperimentConfig) -> Family:
    return _FAMILIES[cfg.problem](cfg)


def certify_only(cfg: ExperimentConfig) -> tuple[dict | None, str, dict]:
    """Reference solve plus certificate; returns ``(certificate, status, reference)``."""
    fam = build_family(cfg)
    S_ref = fam.solve(fam.mu_bar, cfg.solver.tol)
    if len(S_ref) == 0:
        raise ReferenceSolveError("reference problem has no (epsilon-)solution")
    u_bar = S_ref.points.points[0]
    ref = {"u_bar": u_bar.tolist(), "solutions": len(S_ref)}
    try:
        cert = fam.certify(u_bar)
    except (HypothesesFail, NotCalm, NotApplicable) as exc:
        return None, f"hypotheses_fail: {exc}", ref
    return cert.to_dict(), "certified", ref


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """
    Build, certify, sweep, measure, fit and decide.

    The sweep is executed even when certification fails, so the report
    still carries the measured excess for diagnostics.

    Raises
    ------
    ReferenceSolveError
        If the solution set at the reference parameter is empty.
    """
    fam = build_family(cfg)
    so = cfg.solver
    tol, coarse_tol = so.tol, so.tol * so.coarse_factor
    S_ref = fam.solve(fam.mu_bar, tol)
    if len(S_ref) == 0:
        raise ReferenceSolveError("reference problem has no (epsilon-)solution")
    S_ref_coarse = fam.solve(fam.mu_bar, coarse_tol)
    u_bar = S_ref.points.points[0]
    notes: list[str] = []
    cert = None
    try:
        cert = fam.certify(u_bar)
    except (HypothesesFail, NotCalm, NotApplicable) as exc:
        notes.append(f"hypotheses fail: {exc}")

    center = np.asarray(cfg.neighborhood.center, float) if cfg.neighborhood.center is not None else u_bar
    radius = cfg.neighborhood.radius if cfg.neighborhood.radius is not None else fam.default_radius(u_bar, cert)

    def one(eps):
        mu = fam.perturb(eps)
        S = fam.solve(mu, tol)
        S_c = fam.solve(mu, coarse_tol)
        return eps, mu, S, S_c, fam.distance(mu, fam.mu_bar)

    if so.workers > 1 and len(cfg.magnitudes) > 1:
        with ThreadPoolExecutor(max_workers=so.workers) as pool:
            results = list(pool.map(one, cfg.magnitudes))   # map keeps input order
    else:
        results = [one(e) for e in cfg.magnitudes]

    rows, candidates, samples = [], [], []
    k = cert.k if cert is not None else math.nan
    for eps, mu, S, S_c, d in results:
        inV = S.points.restrict_to_ball(center, radius)
        e_fine = measure_excess(S, S_ref, center, radius)
        e_coarse = measure_excess(S_c, S_ref_coarse, center, radius)
        extrap = e_fine - (e_coarse - e_fine) / (so.coarse_factor - 1.0) if math.isfinite(e_coarse) else e_fine
        bound = cert.bound(d) if cert is not None else math.nan
        # effective epsilon of the solves, which may exceed tol under sampled certification
        eff = max(tol, S.tolerance, S_ref.tolerance)
        slack = eff * (1.0 + (k if cert is not None else 0.0)) + fam.grid_spacing
        violated = cert is not None and e_fine > bound + slack
        res = S.worst_residual if len(S) else math.nan
        rows.append(SweepRow(float(eps), float(d), float(e_fine), float(bound), float(res), len(inV), len(S),
                             float(e_coarse), float(extrap), float(slack), bool(violated)))
        candidates += [(p, mu) for p in inV]
        if d > 0 and math.isfinite(e_fine):
            samples.append((d, e_fine))

    fit = None
    try:
        fit = fit_holder_exponent(samples).to_dict() if len(samples) >= 2 else None
    except ValueError:
        fit = None
    if fit is None and rows:
        notes.append("fit unavailable: fewer than two nonzero excess samples")

    checks = {}
    if cert is not None and candidates:
        checks = fam.check(u_bar, candidates, cert)

    if cert is None:
        verdict = "hypotheses_fail"
    else:
        n_viol = sum(r.violated for r in rows)
        verdict = "bound_violated" if n_viol >= 2 else ("inconclusive" if n_viol == 1 else "certified_bound_holds")
        if n_viol == 1:
            notes.append("single-magnitude violation within the epsilon-solution guard")
        if cert.unique_local_solution:
            multi = [r.magnitude for r in rows if r.solutions_in_V > 1]
            if multi:
                notes.append(f"more than one solution in V at magnitudes {multi}")
                if verdict == "certified_bound_holds":
                    verdict = "inconclusive"
        if fit is not None and verdict == "certified_bound_holds":
            if fit["exponent_estimate"] < cert.delta - FIT_TOLERANCE:
                notes.append("fitted exponent below the certified exponent")
                verdict = "inconclusive"
            elif fit["exponent_estimate"] > cert.delta + FIT_TOLERANCE:
                notes.append("certificate conservative")

    reference = {"u_bar": [float(x) for x in u_bar], "solutions": len(S_ref),
                 "residual": S_ref.worst_residual, "neighborhood_radius": float(radius),
                 "neighborhood_center": [float(x) for x in center]}
    return ExperimentReport(
        problem=fam.name, config=cfg.model_dump(mode="json", by_alias=True), reference=reference,
        certificate=None if cert is None else cert.to_dict(), rows=rows, fit=fit, verdict=verdict,
        notes=notes, hypothesis_checks=checks, info=fam.info,
    )
