"""Damped Picard iteration for the quasi-stationary mean field game.

One application of the map takes a measure path, finds the common Aubry point
of its time slices, computes critical values and barriers at every time node,
and transports the initial measure along the resulting feedback drift.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidInput
from .model import HamiltonianModel, ModelConstants, estimate_constants
from .torus import GridMeasure, TorusGrid, convex_combination, fmt, torus_distance, w1
from .transport import (
    DriftField,
    MeasurePath,
    check_linfty,
    constant_path,
    initial_binning,
    simulate,
    time_lipschitz,
    validate_initial,
)
from .weakkam import AubryData, BarrierField, LaxOleinikParams, WeakKam, check_semiconcavity

N_TEST_MODES = 5


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    model: HamiltonianModel
    m0: GridMeasure
    horizon: float = 1.0
    J: int = 20
    lo: LaxOleinikParams = field(default_factory=LaxOleinikParams)
    particles: int = 10000
    seed: int = 0
    substeps: int = 1
    rho_cap: float = 50.0

    def __post_init__(self):
        if self.m0.grid.d != 1:
            raise InvalidInput("the solver works on 1-d grids (exact W1 is 1-d only)")
        if self.model.d != self.m0.grid.d:
            raise InvalidInput("model and initial measure dimensions differ")
        if not self.horizon > 0 or self.J < 1:
            raise InvalidInput("need a positive horizon and at least one time interval")
        report = validate_initial(self.m0, self.rho_cap)
        if not report["passed"]:
            raise InvalidInput(f"initial measure fails: {', '.join(report['failed'])}")

    @property
    def grid(self) -> TorusGrid:
        return self.m0.grid

    @property
    def dt(self) -> float:
        return self.horizon / self.J


@dataclass(frozen=True)
class SolveParams:
    theta: float = 0.5
    max_iter: int = 50
    tol: float = 1e-2
    threads: int = 1

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise InvalidInput("theta must lie in (0, 1]")
        if self.max_iter < 1 or not self.tol >= 0 or self.threads < 1:
            raise InvalidInput("max_iter >= 1, tol >= 0 and threads >= 1 are required")


@dataclass(eq=False)
class PicardOutput:
    path: MeasurePath
    alphas: np.ndarray
    barriers: list
    x_m: int
    aubry: list


@dataclass(eq=False)
class SolutionBundle:
    """Best iterate of the Picard loop.

    ``path`` is the transported path ``S(m)`` and ``input_path`` the iterate
    ``m`` whose slices define the critical values and barriers.
    """

    path: MeasurePath
    input_path: MeasurePath
    alphas: np.ndarray
    barriers: list
    x_m: int
    aubry: list
    residuals: list
    best_residuals: list
    best_iteration: int
    converged: bool
    constants: ModelConstants
    verification: Optional[dict] = None

    @property
    def x_m_point(self) -> np.ndarray:
        return self.path.grid.node_coords(self.x_m)

    @property
    def residual(self) -> float:
        return self.residuals[self.best_iteration]


def _unique_slices(measures):
    """Indices of distinct measure objects, so repeated slices are solved once."""
    first = {}
    owner = []
    for j, m in enumerate(measures):
        owner.append(first.setdefault(id(m), j))
    return owner


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def picard_map(path: MeasurePath, problem: ProblemSpec, wk: Optional[WeakKam] = None, threads: int = 1) -> PicardOutput:
    """One application of the fixed-point map."""
    if wk is None:
        wk = WeakKam(problem.model, problem.grid, problem.lo)
    if path.J != problem.J:
        raise InvalidInput(f"path has {path.J} intervals, problem expects {problem.J}")
    measures = path.measures
    owner = _unique_slices(measures)
    distinct = sorted(set(owner))

    def weak(j):
        m = measures[j]
        a = wk.critical_value(m)
        return a, wk.aubry_set(m, a)

    res = dict(zip(distinct, _map(weak, distinct, threads)))
    alphas = np.array([res[owner[j]][0] for j in range(len(measures))])
    aubry = [res[owner[j]][1] for j in range(len(measures))]
    x_m, _, _ = wk.common_aubry_point(measures, aubry=aubry)
    bars = dict(zip(distinct, _map(lambda j: wk.peierls_barrier(x_m, measures[j], alphas[j]), distinct, threads)))
    barriers = [bars[owner[j]] for j in range(len(measures))]
    out = simulate(problem.model, problem.m0, [b.costate for b in barriers[:-1]], measures[:-1], problem.dt, problem.J,
                   particles=problem.particles, seed=problem.seed, substeps=problem.substeps,
                   speed_limit=10.0 * wk.constants.kappa)
    return PicardOutput(path=out, alphas=alphas, barriers=barriers, x_m=x_m, aubry=aubry)


def path_residual(a: MeasurePath, b: MeasurePath) -> float:
    return max(w1(x, y) for x, y in zip(a.measures, b.measures))


def initial_path(problem: ProblemSpec) -> MeasurePath:
    return constant_path(initial_binning(problem.m0, problem.particles, problem.seed), problem.J, problem.dt)


def solve(problem: ProblemSpec, params: SolveParams = SolveParams(), wk: Optional[WeakKam] = None,
          verify_result: bool = True, progress=None) -> SolutionBundle:
    """Damped Picard iteration with best-iterate tracking.  Never raises on non-convergence."""
    if wk is None:
        wk = WeakKam(problem.model, problem.grid, problem.lo)
    path = initial_path(problem)
    residuals, best_hist = [], []
    best = None
    for it in range(params.max_iter):
        out = picard_map(path, problem, wk, params.threads)
        r = path_residual(path, out.path)
        residuals.append(r)
        if best is None or r < best[0]:
            best = (r, it, path, out)
        best_hist.append(best[0])
        if progress is not None:
            progress(it, r)
        if r <= params.tol:
            break
        path = MeasurePath(dt=problem.dt, measures=[convex_combination(a, b, params.theta)
                                                    for a, b in zip(path.measures, out.path.measures)])
    r, it, m_in, out = best
    bundle = SolutionBundle(path=out.path, input_path=m_in, alphas=out.alphas, barriers=out.barriers, x_m=out.x_m,
                            aubry=out.aubry, residuals=residuals, best_residuals=best_hist, best_iteration=it,
                            converged=r <= params.tol, constants=wk.constants)
    if verify_result:
        bundle.verification = verify(bundle, problem, wk)
    return bundle


# --- verification ----------------------------------------------------------------------

def _test_functions():
    """``(phi, dphi, sup|dphi|, sup|d2phi|)`` for sin/cos modes k = 1..5."""
    out = []
    for k in range(1, N_TEST_MODES + 1):
        w = 2.0 * np.pi * k
        out.append((lambda x, w=w: np.sin(w * x), lambda x, w=w: w * np.cos(w * x), w, w * w))
        out.append((lambda x, w=w: np.cos(w * x), lambda x, w=w: -w * np.sin(w * x), w, w * w))
    return out


def _finite(x):
    x = float(x)
    return x if math.isfinite(x) else None


def verify(bundle: SolutionBundle, problem: ProblemSpec, wk: Optional[WeakKam] = None) -> dict:
    """Pass/fail report on the properties a solution must have."""
    if wk is None:
        wk = WeakKam(problem.model, problem.grid, problem.lo)
    grid = problem.grid
    lo = problem.lo
    ins = bundle.input_path.measures
    tol_fp = lo.tol_fp
    report = {}

    certs = [wk.certificate(b.values, m, a) for b, m, a in zip(bundle.barriers, ins, bundle.alphas)]
    report["certificate"] = {"per_time": certs, "max": max(certs), "tol": tol_fp,
                             "passed": bool(max(certs) <= tol_fp)}

    hj = []
    for b, m, a in zip(bundle.barriers, ins, bundle.alphas):
        frozen = problem.model.freeze(m)
        hj.append(np.abs(frozen.H(grid.points, b.costate) + a))
    hj = np.concatenate(hj)
    med, p95 = float(np.median(hj)), float(np.percentile(hj, 95))
    report["hj_residual"] = {"median": med, "p95": p95, "max": float(np.max(hj)), "tol": 5e-2,
                             "passed": bool(med <= 5e-2)}

    report["continuity_equation"] = _continuity_residual(bundle, problem)

    sc = [check_semiconcavity(b.values, grid) for b in bundle.barriers]
    report["semiconcavity"] = {"C_sc": [s["C_sc"] for s in sc], "max_C_sc": max(s["C_sc"] for s in sc),
                               "max_kink_ratio": max(s["kink_ratio"] for s in sc),
                               "passed": all(s["passed"] for s in sc)}

    report["time_continuity"] = _time_continuity(bundle, problem, wk)

    lip = time_lipschitz(bundle.path)
    cb = bundle.constants.C_b
    report["time_lipschitz"] = {"ratio": lip["ratio"], "max_speed": lip["max_speed"], "C_b": cb,
                                "passed": bool(lip["ratio"] <= lip["max_speed"] + 1e-12 and lip["ratio"] <= 1.1 * cb)}

    on_aubry = [min(float(torus_distance(grid.node_coords(bundle.x_m), grid.node_coords(i))) for i in a.members)
                <= grid.h + 1e-12 for a in bundle.aubry]
    pinned = [abs(float(b.values[bundle.x_m])) for b in bundle.barriers]
    report["aubry_pinning"] = {"x_m": grid.node_coords(bundle.x_m).tolist(), "in_every_aubry_set": all(on_aubry),
                               "max_abs_u_at_x_m": max(pinned), "eps_aubry": wk.eps_aubry,
                               "passed": bool(all(on_aubry) and max(pinned) <= wk.eps_aubry)}

    report["linfty"] = {k: v for k, v in check_linfty(bundle.path).items() if k != "per_time"}
    report["passed"] = all(v.get("passed", True) for k, v in report.items() if isinstance(v, dict) and k != "linfty")
    return report


def _continuity_residual(bundle: SolutionBundle, problem: ProblemSpec) -> dict:
    path = bundle.path
    grid = problem.grid
    dt = path.dt
    worst_ratio = 0.0
    worst = 0.0
    for j in range(path.J):
        x0 = path.snapshots[j]
        x1 = path.snapshots[j + 1]
        field_ = DriftField(problem.model, bundle.barriers[j].costate, bundle.input_path.measures[j])
        b = field_(x0)[:, 0]
        node_b = field_(grid.points)[:, 0]
        cells = np.unique(np.floor(np.concatenate([x0[:, 0], x1[:, 0]]) * grid.n).astype(int) % grid.n)
        lip = float(np.max(np.abs(node_b[(cells + 1) % grid.n] - node_b[cells]))) / grid.h
        speed = float(np.max(np.abs(b))) if len(b) else 0.0
        for phi, dphi, s1, s2 in _test_functions():
            lhs = float(np.mean(phi(x1[:, 0])) - np.mean(phi(x0[:, 0])))
            rhs = dt * float(np.mean(b * dphi(x0[:, 0])))
            res = abs(lhs - rhs)
            bound = (0.5 * s2 * speed**2 + 0.5 * s1 * lip * speed) * dt**2
            worst = max(worst, res)
            if res > 0:
                worst_ratio = max(worst_ratio, res / bound if bound > 0 else np.inf)
    return {"max_residual": worst, "max_ratio_to_bound": worst_ratio, "dt": dt, "test_functions": 2 * N_TEST_MODES,
            "passed": bool(worst_ratio <= 1.0 + 1e-9 or worst <= 1e-12)}


def _time_continuity(bundle: SolutionBundle, problem: ProblemSpec, wk: WeakKam) -> dict:
    lo = problem.lo
    grid = problem.grid
    probes = (np.arange(lo.probes) * grid.size) // lo.probes
    horizon = (lo.n_burn + lo.n_window) * lo.dtau
    worst_gap = 0.0
    worst_excess = -np.inf
    ins = bundle.input_path.measures
    for j in range(len(bundle.barriers) - 1):
        du = float(np.max(np.abs(bundle.barriers[j + 1].values[probes] - bundle.barriers[j].values[probes])))
        c0, c1 = wk.engine(ins[j]).cost, wk.engine(ins[j + 1]).cost
        ok = np.isfinite(c0) & np.isfinite(c1)
        dl = float(np.max(np.abs(c0[ok] - c1[ok]))) / lo.dtau if np.any(ok) else 0.0
        da = abs(float(bundle.alphas[j + 1] - bundle.alphas[j]))
        bound = horizon * (dl + da) + 2.0 * lo.tol_fp
        worst_gap = max(worst_gap, du)
        worst_excess = max(worst_excess, du - bound)
    return {"max_jump": worst_gap, "max_excess_over_bound": _finite(worst_excess) if len(bundle.barriers) > 1 else 0.0,
            "passed": bool(worst_excess <= 0.0) if len(bundle.barriers) > 1 else True}


def refine_measure(m: GridMeasure) -> GridMeasure:
    """Prolongate a 1-d measure to the grid with twice as many nodes.

    Coarse node ``i`` keeps half its mass on fine node ``2i`` and gives a
    quarter to each of ``2i - 1`` and ``2i + 1``; symmetric measures stay symmetric.
    """
    fine = TorusGrid(1, 2 * m.grid.n)
    w = np.zeros(fine.n)
    coarse = m.weights.ravel()
    idx = 2 * np.arange(m.grid.n)
    w[idx] += 0.5 * coarse
    w[(idx - 1) % fine.n] += 0.25 * coarse
    w[(idx + 1) % fine.n] += 0.25 * coarse
    return GridMeasure.normalized(fine, w)


# --- persistence ------------------------------------------------------------------------

def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _finite(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def write_bundle(bundle: SolutionBundle, problem: ProblemSpec, outdir, config_echo: dict, figures: bool = False) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    plot = out / "plotdata"
    plot.mkdir(exist_ok=True)
    times = bundle.path.times
    manifest = {
        "config": config_echo,
        "converged": bundle.converged,
        "verified": None if bundle.verification is None else bundle.verification["passed"],
        "iterations": len(bundle.residuals),
        "best_iteration": bundle.best_iteration,
        "residual_history": bundle.residuals,
        "best_residual_history": bundle.best_residuals,
        "x_m": bundle.x_m_point.tolist(),
        "x_m_node": bundle.x_m,
        "constants": bundle.constants.to_dict(),
        "eps_aubry": bundle.barriers[0].eps_aubry,
        "measure_path": bundle.path.manifest(),
        "files": ["alpha.csv", "measures.csv", "verify.json"]
                 + [f"barrier_{j}.csv" for j in range(len(bundle.barriers))],
    }
    _write(out / "manifest.json", dumps(manifest))
    _write(out / "alpha.csv", "t,alpha\n" + "".join(f"{fmt(t)},{fmt(a)}\n" for t, a in zip(times, bundle.alphas)))
    for j, b in enumerate(bundle.barriers):
        b.to_csv(out / f"barrier_{j}.csv")
    bundle.path.to_csv(out / "measures.csv")
    _write(out / "verify.json", dumps(bundle.verification or {}))
    grid = problem.grid
    head = "t," + ",".join(fmt(x) for x in grid.axis)
    rows = [fmt(t) + "," + ",".join(fmt(v) for v in m.density.ravel()) for t, m in zip(times, bundle.path.measures)]
    _write(plot / "density.csv", head + "\n" + "\n".join(rows) + "\n")
    _write(plot / "residual.csv", "iteration,residual,best\n" + "".join(
        f"{k},{fmt(r)},{fmt(b)}\n" for k, (r, b) in enumerate(zip(bundle.residuals, bundle.best_residuals))))
    _write(plot / "alpha.csv", "t,alpha\n" + "".join(f"{fmt(t)},{fmt(a)}\n" for t, a in zip(times, bundle.alphas)))
    if figures:
        from .plotting import render_bundle_figures

        render_bundle_figures(out)
    return out


def _write(path: Path, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)
