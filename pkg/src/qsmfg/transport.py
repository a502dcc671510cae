"""Particle transport of the initial measure along the optimal feedback drift."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import qmc

from .errors import DriftBlowup, InvalidInput
from .model import HamiltonianModel
from .torus import GridMeasure, TorusGrid, fmt, interp, kernel_density, w1_points, wrap
from .weakkam import BarrierField

# mass moves with velocity -D_p H(y, Du, m)
DRIFT_SIGN = -1.0
MIN_PARTICLES = 100


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """Equal-weight particles on the torus, positions of shape ``(P, d)``."""

    positions: np.ndarray

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        if pos.ndim == 1:
            pos = pos[:, None]
        if len(pos) < MIN_PARTICLES:
            raise InvalidInput(f"an ensemble needs at least {MIN_PARTICLES} particles, got {len(pos)}")
        pos = wrap(pos)
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @property
    def size(self) -> int:
        return len(self.positions)

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.size, 1.0 / self.size)

    def binned(self, grid: TorusGrid) -> GridMeasure:
        return kernel_density(self.positions, grid)


class DriftField:
    """``y -> DRIFT_SIGN * D_p H(y, p(y), m)`` with ``p`` the interpolated costate.

    Records the largest speed it has produced in :attr:`max_speed`; speeds
    above ``limit`` raise :class:`DriftBlowup`.
    """

    def __init__(self, model: HamiltonianModel, costate: np.ndarray, m: GridMeasure, limit: float = np.inf):
        self.grid = m.grid
        self.frozen = model.freeze(m)
        self.costate = np.asarray(costate, dtype=float).reshape(self.grid.size, self.grid.d)
        self.limit = limit
        self.max_speed = 0.0

    @classmethod
    def from_barrier(cls, model, barrier: BarrierField, m: GridMeasure, limit: float = np.inf):
        return cls(model, barrier.costate, m, limit)

    def momentum(self, y) -> np.ndarray:
        y = self.grid.as_points(y)
        cols = [interp(self.costate[:, ax].reshape(self.grid.shape), self.grid, y) for ax in range(self.grid.d)]
        return np.stack(cols, axis=-1)

    def __call__(self, y) -> np.ndarray:
        y = self.grid.as_points(y)
        b = DRIFT_SIGN * self.frozen.dH_dp(y, self.momentum(y))
        speed = float(np.max(np.sqrt(np.sum(b * b, axis=-1)))) if len(b) else 0.0
        if speed > self.limit:
            raise DriftBlowup(f"drift speed {speed:.4g} exceeds {self.limit:.4g}; barrier costate is corrupt")
        self.max_speed = max(self.max_speed, speed)
        return b


def drift(y, model: HamiltonianModel, barrier: BarrierField, m: GridMeasure):
    """Drift at one point or a batch of points."""
    field_ = DriftField.from_barrier(model, barrier, m)
    out = field_(y)
    single = np.asarray(y).ndim == 0 or (m.grid.d > 1 and np.asarray(y).ndim == 1)
    if single:
        return float(out[0, 0]) if m.grid.d == 1 else out[0]
    return out[:, 0] if m.grid.d == 1 else out


def advance(ens: ParticleEnsemble, velocity: Callable, dt: float) -> ParticleEnsemble:
    """One explicit-midpoint step of ``x' = velocity(x)``, wrapped to the torus."""
    if not dt > 0:
        raise InvalidInput("dt must be positive")
    x = ens.positions
    mid = wrap(x + 0.5 * dt * velocity(x))
    return ParticleEnsemble(x + dt * velocity(mid))


def sample_particles(m0: GridMeasure, count: int, seed: int = 0) -> ParticleEnsemble:
    """Deterministic low-discrepancy sample of ``m0``.

    1-d: stratified inverse CDF of the piecewise-constant density whose cells
    are centred on the nodes (node 0's cell is split across the origin, which
    keeps symmetric measures symmetric).  2-d: scrambled Halton points mapped
    through the marginal and conditional inverse CDFs.
    """
    if count < MIN_PARTICLES:
        raise InvalidInput(f"need at least {MIN_PARTICLES} particles")
    grid = m0.grid
    if grid.d == 1:
        q = (np.arange(count) + 0.5) / count
        return ParticleEnsemble(_inverse_cdf(m0.weights, q)[:, None])
    u = qmc.Halton(d=2, scramble=True, seed=seed).random(count)
    w = m0.weights
    x = _inverse_cdf(w.sum(axis=1), u[:, 0])
    row = np.round(x * grid.n).astype(int) % grid.n
    y = np.empty(count)
    for r in np.unique(row):
        sel = row == r
        y[sel] = _inverse_cdf(w[r] / w[r].sum(), u[sel, 1])
    return ParticleEnsemble(np.stack([x, y], axis=-1))


def _inverse_cdf(weights, q) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    n = len(w)
    h = 1.0 / n
    seg_w = np.concatenate([[0.5 * w[0]], w[1:], [0.5 * w[0]]])
    seg_lo = np.concatenate([[0.0], (np.arange(1, n) - 0.5) * h, [1.0 - 0.5 * h]])
    seg_len = np.concatenate([[0.5 * h], np.full(n - 1, h), [0.5 * h]])
    cdf = np.concatenate([[0.0], np.cumsum(seg_w)])
    cdf /= cdf[-1]
    k = np.clip(np.searchsorted(cdf, q, side="right") - 1, 0, len(seg_w) - 1)
    mass = np.diff(cdf)[k]
    frac = np.where(mass > 0, (q - cdf[k]) / np.where(mass > 0, mass, 1.0), 0.5)
    return wrap(seg_lo[k] + frac * seg_len[k])


@dataclass(eq=False)
class MeasurePath:
    """Time grid ``t_j = j dt``, binned measures and the particle snapshots."""

    dt: float
    measures: list
    snapshots: list = field(default_factory=list, repr=False)
    particles: int = 0
    seed: int = 0
    max_speed: float = 0.0

    @property
    def J(self) -> int:
        return len(self.measures) - 1

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.measures)) * self.dt

    @property
    def grid(self) -> TorusGrid:
        return self.measures[0].grid

    def to_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write("t,node,weight\n")
            for t, m in zip(self.times, self.measures):
                ts = fmt(t)
                for i, w in enumerate(m.weights.ravel()):
                    fh.write(f"{ts},{i},{fmt(w)}\n")

    def manifest(self) -> dict:
        return {"dt": self.dt, "J": self.J, "P": self.particles, "seed": self.seed}

    def manifest_json(self) -> str:
        return json.dumps(self.manifest(), indent=2, sort_keys=True)

    @classmethod
    def from_csv(cls, path, grid: TorusGrid, dt: float) -> "MeasurePath":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        times = np.unique(data[:, 0])
        measures = []
        for t in times:
            rows = data[data[:, 0] == t]
            w = np.zeros(grid.size)
            w[rows[:, 1].astype(int)] = rows[:, 2]
            measures.append(GridMeasure(grid, w.reshape(grid.shape)))
        return cls(dt=dt, measures=measures)


def constant_path(m: GridMeasure, J: int, dt: float) -> MeasurePath:
    return MeasurePath(dt=dt, measures=[m] * (J + 1))


def simulate(model: HamiltonianModel, m0: GridMeasure, costates: Sequence[np.ndarray], frozen_measures: Sequence[GridMeasure],
             dt: float, J: int, particles: int = 10000, seed: int = 0, substeps: int = 1,
             speed_limit: float = np.inf) -> MeasurePath:
    """Push ``m0`` forward through ``J`` intervals of length ``dt``.

    The drift on ``[t_j, t_{j+1})`` uses ``costates[j]`` and measure
    ``frozen_measures[j]`` (piecewise constant in time).
    """
    if len(costates) < J or len(frozen_measures) < J:
        raise InvalidInput("need a costate and a measure for every time interval")
    if substeps < 1:
        raise InvalidInput("substeps must be at least 1")
    ens = sample_particles(m0, particles, seed)
    grid = m0.grid
    snaps = [ens.positions]
    measures = [ens.binned(grid)]
    top = 0.0
    for j in range(J):
        vel = DriftField(model, costates[j], frozen_measures[j], limit=speed_limit)
        for _ in range(substeps):
            ens = advance(ens, vel, dt / substeps)
        top = max(top, vel.max_speed)
        snaps.append(ens.positions)
        measures.append(ens.binned(grid))
    return MeasurePath(dt=dt, measures=measures, snapshots=snaps, particles=particles, seed=seed, max_speed=top)


def initial_binning(m0: GridMeasure, particles: int = 10000, seed: int = 0) -> GridMeasure:
    """Binned sample of ``m0``: the first node of every simulated path."""
    return sample_particles(m0, particles, seed).binned(m0.grid)


def check_linfty(path: MeasurePath, bound: Optional[float] = None) -> dict:
    """Largest nodal density along the path; asserted only when ``bound`` is given."""
    per_time = [float(np.max(m.density)) for m in path.measures]
    top = max(per_time)
    return {
        "max_density": top,
        "per_time": per_time,
        "bound": bound,
        "passed": True if bound is None else bool(top <= bound),
        "grows": bool(per_time[-1] > per_time[0] * (1 + 1e-9)),
    }


def time_lipschitz(path: MeasurePath) -> dict:
    """Largest ``W1(m_j, m_k) / |t_j - t_k|`` over snapshot pairs (exact circular W1)."""
    if path.grid.d != 1 or not path.snapshots:
        raise InvalidInput("time-Lipschitz ratio needs 1-d particle snapshots")
    snaps = path.snapshots
    ratio = 0.0
    for j in range(len(snaps)):
        for k in range(j + 1, len(snaps)):
            ratio = max(ratio, w1_points(snaps[j], snaps[k]) / ((k - j) * path.dt))
    return {"ratio": ratio, "max_speed": path.max_speed}


def validate_initial(m0: GridMeasure, rho_cap: float = 50.0) -> dict:
    """Initial-condition checks: unit mass, nonnegative weights, bounded density."""
    w = m0.weights
    mass = float(np.sum(w))
    checks = {
        "unit_mass": abs(mass - 1.0) <= 1e-12,
        "nonnegative": bool(np.all(w >= 0)),
        "bounded_density": bool(np.max(m0.density) <= rho_cap),
    }
    return {"mass": mass, "max_density": float(np.max(m0.density)), "rho_cap": rho_cap,
            "checks": checks, "passed": all(checks.values()),
            "failed": [k for k, ok in checks.items() if not ok]}
