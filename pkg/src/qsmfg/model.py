"""Measure-dependent Tonelli Hamiltonians on the torus.

Three families are provided:

* :class:`Mechanical` -- ``H(x, p, m) = |p|^2 / 2 - F(x, m)`` with
  ``F(x, m) = ∫ k(x, y) m(dy)``;
* :class:`ScaledSeparable` -- ``H(x, p, m) = F(m) (|p|^2 / 2 - V(x))``;
* :class:`Custom` -- any vectorised callable ``H(x, p, m)``; the Lagrangian is
  obtained by a numeric Legendre transform.

Every model is evaluated through :meth:`HamiltonianModel.freeze`, which fixes
the measure and returns an object with vectorised ``H``, ``dH_dp``, ``L``,
``dL_dv`` and ``dL_dx`` methods acting on arrays of shape ``(N, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import CoercivityFailure, GradientRadiusExceeded, InvalidInput, UnsupportedFamily
from .torus import GridMeasure, TorusGrid, displacement, interp, w1

TWO_PI = 2.0 * np.pi


def _node_angles(n):
    """Angles 2π|x_i ⊖ 0| computed from integers so that i and n-i agree bitwise."""
    i = np.arange(n)
    return TWO_PI * np.minimum(i, n - i) / n, np.sign(n - 2 * i) * (i > 0)


def _node_profile(grid, kind):
    """``1 - cos 2πx`` (kind='g') or its derivative (kind='dg') at the nodes, per axis."""
    ang, sign = _node_angles(grid.n)
    if kind == "g":
        return 1.0 - np.cos(ang)
    return TWO_PI * sign * np.sin(ang)


def _broadcast_axes(grid, per_axis, weights):
    """Sum_i weights[i] * per_axis(x_i) on the full grid."""
    if grid.d == 1:
        return weights[0] * per_axis
    return weights[0] * per_axis[:, None] + weights[1] * per_axis[None, :]


def _axis_cos_moments(m: GridMeasure):
    """E_m[cos 2π y_i] for each axis."""
    grid = m.grid
    c = np.cos(TWO_PI * grid.axis)
    w = m.weights
    if grid.d == 1:
        return np.array([np.dot(c, w)])
    return np.array([np.dot(c, w.sum(axis=1)), np.dot(c, w.sum(axis=0))])


# --- coupling kernels ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CouplingKernel:
    """Continuous periodic kernel ``k(x, y)``.

    ``builtin``: ``k(x, y) = scale * Σ_i (1 - cos 2πx_i)(1 + coupling/2 · cos 2πy_i)``.
    ``coupling`` tunes how strongly the cost depends on the measure; with
    ``coupling=0`` the cost does not depend on ``m`` at all.

    ``tabulated``: node values ``table[i, j] = k(x_i, y_j)`` (flat node indices),
    interpolated periodically and linearly in ``x``.
    """

    family: str = "builtin"
    coupling: float = 1.0
    scale: float = 1.0
    table: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.family not in ("builtin", "tabulated"):
            raise InvalidInput(f"unknown kernel family {self.family!r}")
        if self.family == "tabulated":
            if self.table is None:
                raise InvalidInput("tabulated kernel needs a table")
            t = np.array(self.table, dtype=float)
            if t.ndim != 2 or t.shape[0] != t.shape[1]:
                raise InvalidInput("kernel table must be square (nodes x nodes)")
            t.setflags(write=False)
            object.__setattr__(self, "table", t)

    def values(self, grid: TorusGrid) -> np.ndarray:
        """Matrix ``k(x_i, y_j)`` over flat node indices."""
        if self.family == "tabulated":
            if self.table.shape[0] != grid.size:
                raise InvalidInput(f"kernel table has {self.table.shape[0]} nodes, grid has {grid.size}")
            return self.table
        g = _node_profile(grid, "g")
        c = 1.0 + 0.5 * self.coupling * np.cos(TWO_PI * grid.axis)
        if grid.d == 1:
            return self.scale * np.outer(g, c)
        gx = np.repeat(g, grid.n)
        gy = np.tile(g, grid.n)
        cx = np.repeat(c, grid.n)
        cy = np.tile(c, grid.n)
        return self.scale * (np.outer(gx, cx) + np.outer(gy, cy))

    def check(self, grid: TorusGrid, role: str = "mechanical") -> dict:
        """Invariant checks on the grid nodes.  Returns ``name -> bool``."""
        k = self.values(grid)
        out = {"kernel_finite": bool(np.all(np.isfinite(k))), "kernel_nonnegative": bool(np.all(k >= 0))}
        if role == "mechanical" and self.family == "builtin":
            origin = 0
            off = np.ones(grid.size, dtype=bool)
            off[origin] = False
            out["kernel_vanishes_at_origin"] = bool(np.all(k[origin] == 0.0))
            out["kernel_positive_off_origin"] = bool(self.scale == 0 or np.all(k[off] > 0))
        return out

    @classmethod
    def from_csv(cls, path, grid: TorusGrid) -> "CouplingKernel":
        """Read ``i,j,k_value`` rows (row-major, optional header)."""
        table = np.full((grid.size, grid.size), np.nan)
        with open(path) as fh:
            for line in fh:
                parts = [s.strip() for s in line.split(",")]
                if len(parts) < 3 or not parts[0].lstrip("-").isdigit():
                    continue
                table[int(parts[0]), int(parts[1])] = float(parts[2])
        if np.isnan(table).any():
            raise InvalidInput(f"kernel table {path} does not cover every node pair")
        return cls(family="tabulated", table=table)


# --- frozen (measure fixed) evaluators --------------------------------------------

class FrozenHamiltonian:
    """A model with its measure argument fixed.  Subclasses fill in the maths."""

    def __init__(self, model, m: GridMeasure):
        self.model = model
        self.m = m
        self.grid = m.grid

    def H(self, x, p):
        raise NotImplementedError

    def dH_dp(self, x, p):
        raise NotImplementedError

    def L(self, x, v):
        raise NotImplementedError

    def dL_dv(self, x, v):
        raise NotImplementedError

    def dL_dx(self, x, v):
        raise NotImplementedError

    def L_checked(self, x, v):
        """Lagrangian plus a mask of entries where the value is not trustworthy."""
        return self.L(x, v), np.zeros(len(x), dtype=bool)

    # node-indexed variants; subclasses may override for exact symmetry
    def L_nodes(self, idx, v):
        return self.L_checked(self.grid.points[idx], v)

    def dL_dx_nodes(self, idx, v):
        return self.dL_dx(self.grid.points[idx], v)


class _FrozenMechanical(FrozenHamiltonian):
    def __init__(self, model, m):
        super().__init__(model, m)
        kern = model.kernel
        grid = self.grid
        if kern.family == "builtin":
            self._c = kern.scale * (1.0 + 0.5 * kern.coupling * _axis_cos_moments(m))
            self.F_nodes = _broadcast_axes(grid, _node_profile(grid, "g"), self._c).ravel()
            grads = []
            for ax in range(grid.d):
                w = np.zeros(grid.d)
                w[ax] = self._c[ax]
                grads.append(_broadcast_axes(grid, _node_profile(grid, "dg"), w).ravel())
            self.dF_nodes = np.stack(grads, axis=-1)
        else:
            self._c = None
            self.F_nodes = kern.values(grid) @ m.weights.ravel()
            f = self.F_nodes.reshape(grid.shape)
            grads = [(np.roll(f, -1, axis=ax) - np.roll(f, 1, axis=ax)).ravel() * (0.5 * grid.n)
                     for ax in range(grid.d)]
            self.dF_nodes = np.stack(grads, axis=-1)

    def F(self, x):
        x = np.asarray(x, dtype=float)
        if self._c is not None:
            r = displacement(0.0, x)
            return np.sum(self._c * (1.0 - np.cos(TWO_PI * np.abs(r))), axis=-1)
        return interp(self.F_nodes, self.grid, x)

    def dF(self, x):
        x = np.asarray(x, dtype=float)
        if self._c is not None:
            return self._c * TWO_PI * np.sin(TWO_PI * x)
        cols = [interp(self.dF_nodes[:, ax], self.grid, x) for ax in range(self.grid.d)]
        return np.stack(cols, axis=-1)

    def H(self, x, p):
        return 0.5 * np.sum(p * p, axis=-1) - self.F(x)

    def dH_dp(self, x, p):
        return np.array(p, dtype=float)

    def L(self, x, v):
        return 0.5 * np.sum(v * v, axis=-1) + self.F(x)

    def dL_dv(self, x, v):
        return np.array(v, dtype=float)

    def dL_dx(self, x, v):
        return self.dF(x)

    def L_nodes(self, idx, v):
        return 0.5 * np.sum(v * v, axis=-1) + self.F_nodes[idx], np.zeros(len(idx), dtype=bool)

    def dL_dx_nodes(self, idx, v):
        return self.dF_nodes[idx]


class _FrozenScaled(FrozenHamiltonian):
    def __init__(self, model, m):
        super().__init__(model, m)
        self.Fm = model.measure_factor(m)
        grid = self.grid
        g = _node_profile(grid, "g")
        # V = v0 - v1 Σ cos 2πx_i = (v0 - d v1) + v1 Σ (1 - cos 2πx_i)
        base = model.v0 - grid.d * model.v1
        self.V_nodes = base + _broadcast_axes(grid, g, np.full(grid.d, model.v1)).ravel()
        self.dV_nodes = np.stack(
            [_broadcast_axes(grid, _node_profile(grid, "dg"), np.eye(grid.d)[ax] * model.v1).ravel()
             for ax in range(grid.d)], axis=-1)

    def V(self, x):
        return self.model.potential(x)

    def H(self, x, p):
        return self.Fm * (0.5 * np.sum(p * p, axis=-1) - self.V(x))

    def dH_dp(self, x, p):
        return self.Fm * np.asarray(p, dtype=float)

    def L(self, x, v):
        return 0.5 * np.sum(v * v, axis=-1) / self.Fm + self.Fm * self.V(x)

    def dL_dv(self, x, v):
        return np.asarray(v, dtype=float) / self.Fm

    def dL_dx(self, x, v):
        return self.Fm * self.model.v1 * TWO_PI * np.sin(TWO_PI * np.asarray(x, dtype=float))

    def L_nodes(self, idx, v):
        val = 0.5 * np.sum(v * v, axis=-1) / self.Fm + self.Fm * self.V_nodes[idx]
        return val, np.zeros(len(idx), dtype=bool)

    def dL_dx_nodes(self, idx, v):
        return self.Fm * self.dV_nodes[idx]


class _FrozenCustom(FrozenHamiltonian):
    def __init__(self, model, m, p_max=None):
        super().__init__(model, m)
        self.p_max = p_max if p_max is not None else model.p_max

    def H(self, x, p):
        return np.asarray(self.model.H(x, p, self.m), dtype=float)

    def dH_dp(self, x, p):
        if self.model.dH_dp is not None:
            return np.asarray(self.model.dH_dp(x, p, self.m), dtype=float)
        p = np.asarray(p, dtype=float)
        step = 1e-5 * (1.0 + np.sqrt(np.sum(p * p, axis=-1)))[:, None]
        out = np.empty_like(p)
        for ax in range(p.shape[-1]):
            e = np.zeros(p.shape[-1])
            e[ax] = 1.0
            out[:, ax] = (self.H(x, p + step * e) - self.H(x, p - step * e)) / (2 * step[:, 0])
        return out

    def _legendre(self, x, v):
        if self.model.L is not None:
            val = np.asarray(self.model.L(x, v, self.m), dtype=float)
            return val, None, np.zeros(len(x), dtype=bool)
        if self.p_max is None:
            raise InvalidInput("Custom model needs p_max for the numeric Legendre transform")
        return legendre_transform(self.H, x, v, self.p_max)

    def L_checked(self, x, v):
        val, _, hit = self._legendre(x, v)
        return val, hit

    def L(self, x, v):
        val, hit = self.L_checked(x, v)
        if np.any(hit):
            raise GradientRadiusExceeded(
                f"Legendre maximiser reached |p| = {self.p_max}; increase the gradient radius")
        return val

    def dL_dv(self, x, v):
        val, pstar, hit = self._legendre(x, v)
        if pstar is None:
            return _central_diff(lambda vv: self.L(x, vv), v)
        return pstar

    def dL_dx(self, x, v):
        x = np.asarray(x, dtype=float)
        _, pstar, _ = self._legendre(x, v)
        if pstar is None:
            return _central_diff(lambda xx: self.L(xx, v), x)
        # envelope theorem: D_x L(x, v) = -D_x H(x, p*)
        return -_central_diff(lambda xx: self.H(xx, pstar), x)


def _central_diff(fun, z, rel=1e-5):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    for ax in range(z.shape[-1]):
        step = rel * (1.0 + np.abs(z[:, ax]))
        e = np.zeros_like(z)
        e[:, ax] = step
        out[:, ax] = (fun(z + e) - fun(z - e)) / (2 * step)
    return out


def legendre_transform(H, x, v, p_max, samples=64, golden_iters=60, chunk=4096):
    """Numeric ``sup_p <p, v> - H(x, p)`` over the box ``|p_i| <= p_max``.

    Coarse search on ``samples`` points per axis followed by golden-section
    refinement inside the winning cell (axis by axis, two sweeps in 2-d).
    Returns ``(value, argmax, hit_boundary)``.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    N, d = x.shape
    axis = np.linspace(-p_max, p_max, samples)
    step = axis[1] - axis[0]
    grids = np.stack([g.ravel() for g in np.meshgrid(*([axis] * d), indexing="ij")], axis=-1)
    best = np.empty((N, d))
    hit = np.zeros(N, dtype=bool)
    for start in range(0, N, max(1, chunk // len(grids))):
        sl = slice(start, min(N, start + max(1, chunk // len(grids))))
        xs = np.repeat(x[sl], len(grids), axis=0)
        ps = np.tile(grids, (len(x[sl]), 1))
        vs = np.repeat(v[sl], len(grids), axis=0)
        obj = (np.sum(ps * vs, axis=-1) - H(xs, ps)).reshape(len(x[sl]), len(grids))
        k = np.argmax(obj, axis=1)
        best[sl] = grids[k]
        hit[sl] = np.any(np.abs(np.abs(grids[k]) - p_max) < 0.5 * step, axis=-1)

    def objective(p):
        return np.sum(p * v, axis=-1) - H(x, p)

    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    for _ in range(1 if d == 1 else 2):
        for ax in range(d):
            lo = best[:, ax] - step
            hi = best[:, ax] + step
            c = hi - invphi * (hi - lo)
            e = lo + invphi * (hi - lo)

            def at(t):
                p = best.copy()
                p[:, ax] = t
                return objective(p)

            fc, fe = at(c), at(e)
            for _ in range(golden_iters):
                left = fc > fe
                hi = np.where(left, e, hi)
                lo = np.where(left, lo, c)
                c_new = hi - invphi * (hi - lo)
                e_new = lo + invphi * (hi - lo)
                c, e = c_new, e_new
                fc, fe = at(c), at(e)
            best[:, ax] = 0.5 * (lo + hi)
    return objective(best), best, hit


# --- model families ------------------------------------------------------------------

class HamiltonianModel:
    family = "abstract"
    d = 1

    def freeze(self, m: GridMeasure, **kw) -> FrozenHamiltonian:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"family": self.family, "d": self.d}


@dataclass(frozen=True, eq=False)
class Mechanical(HamiltonianModel):
    kernel: CouplingKernel = field(default_factory=CouplingKernel)
    d: int = 1
    family = "mechanical"

    def freeze(self, m, **kw):
        return _FrozenMechanical(self, m)

    @property
    def is_free(self) -> bool:
        return self.kernel.family == "builtin" and self.kernel.scale == 0.0

    def describe(self):
        k = self.kernel
        out = {"family": "free" if self.is_free else "mechanical", "d": self.d, "kernel": k.family}
        if k.family == "builtin":
            out.update(coupling=k.coupling, kernel_scale=k.scale)
        return out


@dataclass(frozen=True, eq=False)
class ScaledSeparable(HamiltonianModel):
    """``F(m) (|p|^2/2 - V(x))`` with ``F(m) = f0 + f1 · mean_i E_m cos 2πy_i`` and
    ``V(x) = v0 - v1 Σ_i cos 2πx_i`` (unique minimum at the origin when v1 > 0)."""

    f0: float = 1.0
    f1: float = 0.5
    v0: float = 2.0
    v1: float = 1.0
    d: int = 1
    family = "scaled_separable"

    def __post_init__(self):
        if self.f0 - abs(self.f1) <= 0:
            raise InvalidInput("scaled-separable model needs f0 - |f1| > 0 so that F(m) >= δ > 0")
        if self.v1 <= 0:
            raise InvalidInput("v1 must be positive for V to have a unique minimiser")

    @property
    def delta(self) -> float:
        return self.f0 - abs(self.f1)

    def measure_factor(self, m: GridMeasure) -> float:
        return float(self.f0 + self.f1 * np.mean(_axis_cos_moments(m)))

    def potential(self, x):
        x = np.asarray(x, dtype=float)
        r = displacement(0.0, x)
        return self.v0 - self.v1 * np.sum(np.cos(TWO_PI * np.abs(r)), axis=-1)

    def freeze(self, m, **kw):
        return _FrozenScaled(self, m)

    def describe(self):
        return {"family": self.family, "d": self.d, "f0": self.f0, "f1": self.f1, "v0": self.v0, "v1": self.v1}


@dataclass(frozen=True, eq=False)
class Custom(HamiltonianModel):
    """User Hamiltonian ``H(x, p, m)`` vectorised over rows of ``x`` and ``p``.

    ``L`` and ``dH_dp`` are optional; without them a numeric Legendre transform
    over ``|p_i| <= p_max`` and central differences are used.
    """

    H: Callable = None
    L: Optional[Callable] = None
    dH_dp: Optional[Callable] = None
    p_max: Optional[float] = None
    d: int = 1
    name: str = "custom"
    family = "custom"

    def freeze(self, m, p_max=None, **kw):
        return _FrozenCustom(self, m, p_max=p_max)

    def describe(self):
        return {"family": self.family, "d": self.d, "name": self.name, "p_max": self.p_max}


def free_model(d: int = 1) -> Mechanical:
    """Zero coupling: ``H = |p|^2 / 2``."""
    return Mechanical(CouplingKernel(scale=0.0), d=d)


def tabulated_hamiltonian(grid: TorusGrid, p_nodes, table, name="tabulated") -> Custom:
    """Measure-independent 1-d Hamiltonian from node values ``table[i, j] = H(x_i, p_j)``.

    Periodic-linear in ``x``, linear in ``p`` (linear extrapolation outside
    the ``p`` range).
    """
    if grid.d != 1:
        raise InvalidInput("tabulated Hamiltonians are 1-d")
    p_nodes = np.asarray(p_nodes, dtype=float)
    table = np.asarray(table, dtype=float)
    if table.shape != (grid.n, len(p_nodes)):
        raise InvalidInput("table must have shape (n_x, n_p)")
    slopes_lo = (table[:, 1] - table[:, 0]) / (p_nodes[1] - p_nodes[0])
    slopes_hi = (table[:, -1] - table[:, -2]) / (p_nodes[-1] - p_nodes[-2])

    def H(x, p, m):
        xs = np.asarray(x, dtype=float)[:, 0]
        ps = np.asarray(p, dtype=float)[:, 0]
        pos = (xs % 1.0) * grid.n
        i0 = np.floor(pos).astype(int) % grid.n
        i1 = (i0 + 1) % grid.n
        t = pos - np.floor(pos)
        pc = np.clip(ps, p_nodes[0], p_nodes[-1])
        j = np.clip(np.searchsorted(p_nodes, pc) - 1, 0, len(p_nodes) - 2)
        s = (pc - p_nodes[j]) / (p_nodes[j + 1] - p_nodes[j])

        def row(i):
            base = (1 - s) * table[i, j] + s * table[i, j + 1]
            base = base + np.where(ps < p_nodes[0], (ps - p_nodes[0]) * slopes_lo[i], 0.0)
            return base + np.where(ps > p_nodes[-1], (ps - p_nodes[-1]) * slopes_hi[i], 0.0)

        return (1 - t) * row(i0) + t * row(i1)

    return Custom(H=H, p_max=float(np.max(np.abs(p_nodes))), d=1, name=name)


# --- public point-wise operations --------------------------------------------------

def _prepare(model, x, q, m):
    grid = m.grid
    if grid.d != model.d:
        raise InvalidInput(f"model has d={model.d} but the measure lives on a d={grid.d} grid")
    xs = grid.as_points(x)
    qs = np.asarray(q, dtype=float)
    scalar = qs.ndim == 0 or (qs.ndim == 1 and model.d > 1 and qs.shape[0] == model.d and xs.shape[0] == 1)
    qs = grid.as_points(qs) if qs.ndim else qs.reshape(1, 1)
    if qs.shape[-1] != model.d:
        raise InvalidInput("momentum/velocity dimension does not match the model")
    if len(xs) == 1 and len(qs) > 1:
        xs = np.repeat(xs, len(qs), axis=0)
    if len(qs) == 1 and len(xs) > 1:
        qs = np.repeat(qs, len(xs), axis=0)
        scalar = False
    if len(xs) != len(qs):
        raise InvalidInput("x and p batches have different lengths")
    single = scalar or (np.asarray(x).ndim <= (0 if model.d == 1 else 1) and len(xs) == 1)
    return xs, qs, single


def _out(val, single):
    val = np.asarray(val)
    return float(val[0]) if single and val.ndim == 1 else (val[0] if single else val)


def hamiltonian(model: HamiltonianModel, x, p, m: GridMeasure):
    xs, ps, single = _prepare(model, x, p, m)
    return _out(model.freeze(m).H(xs, ps), single)


def lagrangian(model: HamiltonianModel, x, v, m: GridMeasure, p_max=None):
    xs, vs, single = _prepare(model, x, v, m)
    return _out(model.freeze(m, p_max=p_max).L(xs, vs), single)


def dp_hamiltonian(model: HamiltonianModel, x, p, m: GridMeasure):
    xs, ps, single = _prepare(model, x, p, m)
    val = model.freeze(m).dH_dp(xs, ps)
    if single:
        return float(val[0, 0]) if model.d == 1 else val[0]
    return val[:, 0] if model.d == 1 else val


def coupling(model: HamiltonianModel, x, m: GridMeasure):
    """``F(x, m) = Σ_j k(x, y_j) w_j`` for the mechanical family."""
    if not isinstance(model, Mechanical):
        raise UnsupportedFamily(f"coupling is defined for the mechanical family, not {model.family}")
    xs, _, single = _prepare(model, x, np.zeros(model.d) if model.d > 1 else 0.0, m)
    frozen = model.freeze(m)
    val = frozen.F(xs)
    # exact node values when x is a node
    node = np.round(xs * m.grid.n)
    on_grid = np.all(np.abs(xs * m.grid.n - node) < 1e-9, axis=-1)
    if np.any(on_grid):
        idx = np.ravel_multi_index(tuple((node[on_grid].astype(int) % m.grid.n).T), m.grid.shape)
        val = np.array(val, dtype=float)
        val[on_grid] = frozen.F_nodes[idx]
    return _out(val, single)


# --- structural constants ------------------------------------------------------------

@dataclass(frozen=True)
class ModelConstants:
    """Numerical estimates of the structural constants of a Tonelli Hamiltonian.

    ``cH_lower`` is the convexity role (``D²_p H >= 1/cH_lower``), ``cH_growth``
    the gradient-growth role (``|D_p H| <= cH_growth (1 + |p|)``).
    """

    cH_lower: float
    cH_growth: float
    M_alpha: float
    R_p: float
    kappa: float
    C_b: float
    degenerate: bool = False
    notes: tuple = ()

    def to_dict(self) -> dict:
        return {
            "cH_lower": self.cH_lower, "cH_growth": self.cH_growth, "M_alpha": self.M_alpha,
            "R_p": self.R_p, "kappa": self.kappa, "C_b": self.C_b,
            "degenerate": self.degenerate, "notes": list(self.notes),
        }


def default_samples(grid: TorusGrid, seed: int = 0):
    return [GridMeasure.uniform(grid), GridMeasure.random(grid, seed), GridMeasure.dirac(grid, np.zeros(grid.d))]


def _directions(d, count=16):
    if d == 1:
        return np.array([[1.0], [-1.0]])
    ang = TWO_PI * np.arange(count) / count
    return np.stack([np.cos(ang), np.sin(ang)], axis=-1)


def _eval_all(frozens, xs, p):
    """H over every (measure, x) with a single momentum vector ``p``."""
    ps = np.broadcast_to(p, xs.shape)
    return np.concatenate([f.H(xs, ps) for f in frozens])


def estimate_constants(model: HamiltonianModel, grid: TorusGrid, samples=None, seed: int = 0,
                       radial_samples: int = 33) -> ModelConstants:
    """Sample-based estimates of ``M_alpha``, ``R_p``, ``cH_*``, ``kappa`` and ``C_b``."""
    if samples is None:
        samples = default_samples(grid, seed)
    if not samples:
        raise InvalidInput("estimate_constants needs at least one measure sample")
    frozens = [model.freeze(m) for m in samples]
    xs = grid.points
    dirs = _directions(grid.d)
    zero = np.zeros(grid.d)

    M_alpha = float(np.max(np.abs(_eval_all(frozens, xs, zero))))

    def margin(R):
        return min(np.min(_eval_all(frozens, xs, R * e)) for e in dirs) - M_alpha

    hi = 1.0
    while margin(hi) <= 0:
        hi *= 2.0
        if hi > 1e3:
            raise CoercivityFailure("H(x, p, m) stays below M_alpha up to |p| = 1e3; the Hamiltonian is not coercive")
    lo = 0.0
    for _ in range(200):
        if hi - lo < 1e-12:
            break
        mid = 0.5 * (lo + hi)
        if margin(mid) > 0:
            hi = mid
        else:
            lo = mid
    R_p = hi if hi > 1e-9 else 0.0

    p_range = max(2.0 * R_p, 1.0)
    radii = np.linspace(0.0, p_range, radial_samples)
    growth = 0.0
    curv = np.inf
    delta = 1e-3 * p_range
    for f in frozens:
        for e in dirs:
            for r in radii:
                p = np.broadcast_to(r * e, xs.shape)
                g = np.sqrt(np.sum(f.dH_dp(xs, p) ** 2, axis=-1))
                growth = max(growth, float(np.max(g / (1.0 + r))))
                h0 = f.H(xs, p)
                d2 = (f.H(xs, p + delta * e) - 2.0 * h0 + f.H(xs, p - delta * e)) / delta**2
                curv = min(curv, float(np.min(d2)))
    cH_lower = 1.0 / curv if curv > 1e-12 else np.inf
    kappa = growth * (1.0 + R_p)
    C_b = np.sqrt(growth) * (np.sqrt(growth) + np.sqrt(M_alpha + growth))
    notes = []
    degenerate = M_alpha == 0.0
    if degenerate:
        notes.append("free Hamiltonian regime: H(x, 0, m) = 0, every node is an Aubry point")
    if not np.isfinite(cH_lower):
        notes.append("no positive curvature in p: Hamiltonian is not strictly convex")
    return ModelConstants(cH_lower=float(cH_lower), cH_growth=float(growth), M_alpha=M_alpha, R_p=float(R_p),
                          kappa=float(kappa), C_b=float(C_b), degenerate=degenerate, notes=tuple(notes))


# --- Tonelli validation -----------------------------------------------------------------

@dataclass
class CheckResult:
    passed: bool
    value: float = float("nan")
    detail: str = ""

    def to_dict(self):
        return {"passed": bool(self.passed), "value": _json_float(self.value), "detail": self.detail}


def _json_float(x):
    x = float(x)
    return x if np.isfinite(x) else str(x)


@dataclass
class TonelliReport:
    checks: dict
    constants: Optional[ModelConstants] = None

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    @property
    def failed(self) -> list:
        return [name for name, c in self.checks.items() if not c.passed]

    def to_dict(self):
        return {
            "passed": self.passed,
            "failed": self.failed,
            "checks": {k: c.to_dict() for k, c in self.checks.items()},
            "constants": None if self.constants is None else {
                k: _json_float(v) if isinstance(v, float) else v for k, v in self.constants.to_dict().items()},
        }


def validate_tonelli(model: HamiltonianModel, grid: TorusGrid, n_samples: int = 64, seed: int = 1) -> TonelliReport:
    """Empirical checks of convexity, superlinear growth, gradient growth and
    continuity in the measure.  Never raises on a failed check."""
    checks = {}
    try:
        const = estimate_constants(model, grid, seed=seed)
    except CoercivityFailure as exc:
        checks["coercivity"] = CheckResult(False, detail=str(exc))
        return TonelliReport(checks)
    rng = np.random.default_rng(seed)
    d = grid.d
    measures = default_samples(grid, seed) + [GridMeasure.random(grid, seed + 101)]
    p_range = max(2.0 * const.R_p, 1.0)

    def ball(k):
        dirs = rng.normal(size=(k, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return dirs * p_range * rng.random((k, 1)) ** (1.0 / d)

    worst = np.inf
    for m in measures:
        f = model.freeze(m)
        x = rng.random((n_samples, d))
        p, q = ball(n_samples), ball(n_samples)
        gap = f.H(x, p) + f.H(x, q) - 2.0 * f.H(x, 0.5 * (p + q))
        worst = min(worst, float(np.min(gap / (0.25 * np.sum((p - q) ** 2, axis=-1)))))
    checks["convexity"] = CheckResult(worst > 1e-6, worst, "min of midpoint curvature ratio on sampled triples")

    R1 = max(4.0, 4.0 * const.R_p)

    def slope(R):
        vals = []
        for m in measures:
            f = model.freeze(m)
            for e in _directions(d):
                vals.append(np.min(f.H(grid.points, np.broadcast_to(R * e, grid.points.shape))) / R)
        return min(vals)

    g1, g2 = slope(R1), slope(2 * R1)
    checks["superlinear_growth"] = CheckResult(bool(g1 > 0 and g2 >= 1.5 * g1), g2 / g1 if g1 else np.inf,
                                               "ratio of min H/|p| at 2R and R (>= 1.5 expected)")

    ratio = 0.0
    for m in measures:
        f = model.freeze(m)
        x = rng.random((n_samples, d))
        p = ball(n_samples)
        g = np.sqrt(np.sum(f.dH_dp(x, p) ** 2, axis=-1)) / (1.0 + np.sqrt(np.sum(p * p, axis=-1)))
        ratio = max(ratio, float(np.max(g)))
    checks["gradient_growth"] = CheckResult(ratio <= const.cH_growth * (1 + 1e-6) + 1e-12, ratio,
                                            f"max |D_p H|/(1+|p|) on fresh samples vs cH_growth={const.cH_growth:.6g}")

    slopes = []
    for k in range(6):
        m1, m2 = GridMeasure.random(grid, seed + 200 + k), GridMeasure.random(grid, seed + 300 + k)
        dist = w1(m1, m2, diagnostic=True) if d > 1 and grid.size <= 1024 else (w1(m1, m2) if d == 1 else np.nan)
        x = rng.random((n_samples, d))
        p = ball(n_samples)
        dh = np.max(np.abs(model.freeze(m1).H(x, p) - model.freeze(m2).H(x, p)))
        if np.isfinite(dist) and dist > 0:
            slopes.append(dh / dist)
    modulus = max(slopes) if slopes else 0.0
    checks["measure_continuity"] = CheckResult(bool(np.isfinite(modulus)), modulus,
                                               "max |H(m1) - H(m2)| / W1(m1, m2) over sampled pairs")
    if isinstance(model, Mechanical):
        for name, ok in model.kernel.check(grid).items():
            checks[name] = CheckResult(ok)
    if isinstance(model, ScaledSeparable):
        checks["measure_factor_positive"] = CheckResult(model.delta > 0, model.delta, "f0 - |f1|")
    return TonelliReport(checks, const)
