"""Built-in oracle suite run by ``qsmfg selftest`` (n = 64, well under a minute)."""
from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .model import Mechanical, ScaledSeparable, free_model
from .solver import ProblemSpec, SolveParams, solve
from .torus import GridMeasure, TorusGrid, w1
from .transport import DriftField, ParticleEnsemble, advance, simulate
from .weakkam import WeakKam, check_semiconcavity

N = 64
TOL = 5e-2


def _barrier_oracle(y):
    return (2.0 / np.pi) * np.minimum(1.0 - np.cos(np.pi * y), 1.0 + np.cos(np.pi * y))


class _Fixture:
    def __init__(self):
        self.grid = TorusGrid(1, N)
        self.mech = Mechanical()
        self.wk = WeakKam(self.mech, self.grid)
        self.uniform = GridMeasure.uniform(self.grid)
        self.barrier = self.wk.peierls_barrier(0, self.uniform, 0.0, check=False)
        self.scaled = WeakKam(ScaledSeparable(), self.grid)


def check_mechanical_critical_value(fx):
    ms = [fx.uniform, GridMeasure.random(fx.grid, 1), GridMeasure.dirac(fx.grid, 0.5)]
    vals = [fx.wk.critical_value(m) for m in ms]
    return max(abs(a) for a in vals) <= TOL, f"alphas {vals}"


def check_scaled_critical_value(fx):
    a_u = fx.scaled.critical_value(fx.uniform)
    a_d = fx.scaled.critical_value(GridMeasure.dirac(fx.grid, 0.0))
    return abs(a_u - 1.0) <= TOL and abs(a_d - 1.5) <= TOL, f"uniform {a_u:.6f}, dirac {a_d:.6f}"


def check_mechanical_aubry(fx):
    data = fx.wk.aubry_set(fx.uniform, 0.0)
    return data.members == [0], f"members {data.members}"


def check_scaled_aubry(fx):
    m = fx.uniform
    data = fx.scaled.aubry_set(m, fx.scaled.critical_value(m))
    return data.members == [0], f"members {data.members}"


def check_barrier_oracle(fx):
    err = float(np.max(np.abs(fx.barrier.values - _barrier_oracle(fx.grid.axis))))
    return err <= TOL, f"sup error {err:.4g}"


def check_certificate(fx):
    res = fx.barrier.certificate
    return res <= 1e-2, f"fixed-point residual {res:.3g}"


def check_lo_step_bruteforce(fx):
    eng = fx.wk.engine(fx.uniform)
    u = np.zeros(N)
    got = fx.wk.lo_step(u, fx.uniform)
    z = np.arange(N)
    best = np.array([np.min(u + eng.transition_cost(z, np.full(N, y))) for y in range(N)])
    err = float(np.max(np.abs(got - best)))
    return err <= 1e-12, f"max deviation from exhaustive search {err:.3g}"


def check_lo_step_structure(fx):
    rng = np.random.default_rng(3)
    u = rng.random(N)
    v = u + rng.random(N)
    a, b = fx.wk.lo_step(u, fx.uniform), fx.wk.lo_step(v, fx.uniform)
    shifted = fx.wk.lo_step(u + 0.75, fx.uniform)
    ok = bool(np.all(a <= b)) and float(np.max(np.abs(shifted - a - 0.75))) <= 1e-12
    return ok, "monotone and commutes with constants" if ok else "structure violated"


def check_calibrated_curves(fx):
    worst_def, worst_speed = 0.0, 0.0
    for y in range(N):
        curve = fx.wk.calibrated_curve(fx.barrier, y, 40, fx.uniform)
        worst_def = max(worst_def, curve.max_defect)
        worst_speed = max(worst_speed, curve.max_speed)
    kappa = fx.wk.constants.kappa
    ok = worst_def <= 5 * fx.wk.params.tol_fp and worst_speed <= kappa
    return ok, f"max defect {worst_def:.3g}, max speed {worst_speed:.3g} (kappa {kappa:.3g})"


def check_domination(fx):
    rng = np.random.default_rng(11)
    for _ in range(20):
        steps = rng.integers(-1, 2, size=50)
        nodes = (rng.integers(N) + np.concatenate([[0], np.cumsum(steps)])) % N
        rep = fx.wk.check_dominated(nodes, fx.barrier, fx.uniform, raise_on_failure=False)
        if not rep["passed"]:
            return False, f"violation {rep['min_step_slack']:.3g}"
    return True, "20 random walks dominated"


def check_drift(fx):
    field_ = DriftField.from_barrier(fx.mech, fx.barrier, fx.uniform)
    b = field_(np.array([[0.25], [0.75], [0.0]]))[:, 0]
    ok = abs(b[0] + np.sqrt(2.0)) <= 0.1 and abs(b[0] + b[1]) <= 1e-6 and b[2] == 0.0
    return ok, f"drift(1/4) {b[0]:.4f}, drift(3/4) {b[1]:.4f}, drift(0) {b[2]}"


def check_rk2_step(fx):
    field_ = DriftField.from_barrier(fx.mech, fx.barrier, fx.uniform)
    ens = advance(ParticleEnsemble(np.full(100, 0.25)), field_, 0.01)
    x = float(ens.positions[0, 0])
    return abs(x - 0.23586) <= 1e-3, f"position {x:.5f}"


def check_concentration_monotonicity(fx):
    path = simulate(fx.mech, fx.uniform, [fx.barrier.costate] * 20, [fx.uniform] * 20, 0.05, 20, particles=2000)
    near = np.minimum(np.arange(N), N - np.arange(N)) * fx.grid.h <= 0.1
    mass = np.array([float(np.sum(m.weights[near])) for m in path.measures])
    steps = np.diff(mass)
    saturated = mass[:-1] >= 1.0 - 1e-9
    ok = bool(np.all(steps >= -1e-12) and np.all((steps > 0) | saturated))
    return ok, f"mass near the Aubry point {mass[0]:.3f} -> {mass[-1]:.3f}"


def check_mass_conservation(fx):
    path = simulate(fx.mech, GridMeasure.bump(fx.grid, 0.3, 0.1), [fx.barrier.costate] * 10, [fx.uniform] * 10,
                    0.05, 10, particles=1000)
    err = max(abs(float(np.sum(m.weights)) - 1.0) for m in path.measures)
    return err <= 1e-12, f"mass drift {err:.3g}"


def check_free_model_solve(fx):
    pb = ProblemSpec(free_model(), GridMeasure.bump(fx.grid, 0.5, 0.15), 1.0, 5, particles=1000)
    bundle = solve(pb, SolveParams(max_iter=3))
    return bundle.residuals == [0.0] and bundle.converged, f"residuals {bundle.residuals}"


def check_continuity_probe(fx):
    rep = fx.scaled.critical_continuity_probe(fx.uniform, GridMeasure.dirac(fx.grid, 0.0))
    ok = abs(rep["difference"] - 0.5) <= 0.1 and abs(rep["w1"] - 0.25) <= 1e-12
    return ok, f"|d alpha| {rep['difference']:.4f}, W1 {rep['w1']:.4f}"


def check_semiconcavity_flags_kink(fx):
    r = np.minimum(fx.grid.axis, 1.0 - fx.grid.axis)
    good = check_semiconcavity(fx.barrier.values, fx.grid)
    bad = check_semiconcavity(r, fx.grid)
    return good["passed"] and not bad["passed"], f"barrier C_sc {good['C_sc']:.3g}, |x| kink ratio {bad['kink_ratio']:.3g}"


def check_w1_oracle(fx):
    d = w1(fx.uniform, GridMeasure.dirac(fx.grid, 0.0))
    d2 = w1(GridMeasure.dirac(fx.grid, 0.0), GridMeasure.dirac(fx.grid, 0.25))
    return abs(d - 0.25) <= 1e-12 and abs(d2 - 0.25) <= 1e-12, f"W1 {d}, {d2}"


CHECKS: list[tuple[str, Callable]] = [
    ("mechanical_critical_value", check_mechanical_critical_value),
    ("scaled_critical_value", check_scaled_critical_value),
    ("mechanical_aubry_set", check_mechanical_aubry),
    ("scaled_aubry_set", check_scaled_aubry),
    ("barrier_closed_form", check_barrier_oracle),
    ("fixed_point_certificate", check_certificate),
    ("lo_step_exhaustive", check_lo_step_bruteforce),
    ("lo_step_monotone_additive", check_lo_step_structure),
    ("calibrated_curves", check_calibrated_curves),
    ("domination_random_walks", check_domination),
    ("drift_closed_form", check_drift),
    ("rk2_single_step", check_rk2_step),
    ("concentration_monotonicity", check_concentration_monotonicity),
    ("mass_conservation", check_mass_conservation),
    ("free_model_fixed_point", check_free_model_solve),
    ("critical_value_continuity", check_continuity_probe),
    ("semiconcavity_kink_detection", check_semiconcavity_flags_kink),
    ("w1_closed_form", check_w1_oracle),
]


def run(echo=print) -> list:
    """Run every check; returns ``[(name, passed, detail, seconds)]``."""
    start = time.perf_counter()
    fx = _Fixture()
    results = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn(fx)
        except Exception as exc:  # a crash is a failed check, reported by name
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail, time.perf_counter() - t0))
        if echo is not None:
            echo(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    if echo is not None:
        echo(f"{sum(r[1] for r in results)}/{len(results)} checks passed in {time.perf_counter() - start:.1f} s")
    return results
