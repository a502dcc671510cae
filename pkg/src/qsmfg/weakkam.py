"""Discrete Lax-Oleinik semigroup and the weak-KAM objects built on it.

Conventions
-----------
Grid fields are flat float arrays indexed like ``TorusGrid.points``.

The critical equation is ``H(x, Du, m) + alpha = 0``.  One Lax-Oleinik step

    u'(y) = min_z  u(z) + cost(z -> y),
    cost(z -> y) = dtau * (L(z, v) + L(y, v)) / 2,   v = (y ⊖ z) / dtau,

makes the iterates of any bounded field grow like ``+alpha * k * dtau``.  The
barrier is therefore ``min_k A_k - alpha k dtau`` and the fixed-point
certificate reads ``lo_step(h) - alpha dtau = h``.  The trapezoidal cost keeps
the scheme second order in ``dtau``.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    AssumptionAViolated,
    BarrierNotCritical,
    DominationFailure,
    EmptyAubrySet,
    InvalidConfig,
    InvalidInput,
    NoConvergence,
    ReachabilityError,
)
from .model import HamiltonianModel, ModelConstants, estimate_constants
from .torus import GridMeasure, TorusGrid, displacement, fmt, torus_distance, w1

SENTINEL = 1e9
LEAK_LEVEL = 1e8
TIE_RTOL = 1e-12
# iterates grow like +alpha per unit time under the convention H + alpha = 0
ALPHA_SIGN = 1.0


@dataclass(frozen=True)
class LaxOleinikParams:
    """Time step, window and tolerances of the discrete semigroup.

    ``search_radius`` and ``eps_aubry`` default to values derived from the
    model constants (``None`` means "derive").
    """

    dtau: float = 0.1
    n_burn: int = 100
    n_window: int = 50
    search_radius: Optional[float] = None
    eps_aubry: Optional[float] = None
    tol_fp: float = 1e-2
    alpha_tol: float = 5e-2
    probes: int = 5

    def __post_init__(self):
        if not self.dtau > 0:
            raise InvalidConfig("dtau must be positive")
        if self.n_window < 1:
            raise InvalidConfig("n_window must be at least 1")
        if self.n_burn < 0:
            raise InvalidConfig("n_burn must be nonnegative")
        if self.search_radius is not None and not self.search_radius > 0:
            raise InvalidConfig("search_radius must be positive")
        if self.tol_fp <= 0 or self.alpha_tol <= 0:
            raise InvalidConfig("tolerances must be positive")

    def resolved_radius(self, grid: TorusGrid, constants: ModelConstants) -> float:
        if self.search_radius is not None:
            if self.search_radius < grid.h:
                raise InvalidConfig(
                    f"search radius {self.search_radius} is smaller than one grid cell ({grid.h})")
            return self.search_radius
        return max(constants.kappa * self.dtau, grid.h)

    def resolved_eps(self, grid: TorusGrid, constants: ModelConstants) -> float:
        if self.eps_aubry is not None:
            return self.eps_aubry
        return grid.h**2 / (4.0 * self.dtau * max(1.0, constants.cH_growth))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# --- one-step engine ---------------------------------------------------------------

def _offsets(grid: TorusGrid, radius: float) -> np.ndarray:
    """Integer node offsets within ``radius``, nearest first (ties keep the nearer)."""
    s_max = int(np.floor(radius / grid.h + 1e-9))
    s_max = min(s_max, grid.n // 2)
    r = np.arange(-s_max, s_max + 1)
    if grid.d == 1:
        offs = r[:, None]
    else:
        a, b = np.meshgrid(r, r, indexing="ij")
        offs = np.stack([a.ravel(), b.ravel()], axis=-1)
    norm = np.sqrt(np.sum(offs.astype(float) ** 2, axis=-1)) * grid.h
    offs = offs[norm <= radius + 1e-12]
    norm = np.sqrt(np.sum(offs.astype(float) ** 2, axis=-1))
    # nearest first; among equal norms the lexicographic order is fixed
    order = np.lexsort(tuple(offs[:, ax] for ax in reversed(range(grid.d))) + (norm,))
    return offs[order]


class LaxOleinikEngine:
    """Precomputed cost table for one (model, measure) pair."""

    def __init__(self, model: HamiltonianModel, m: GridMeasure, params: LaxOleinikParams,
                 constants: ModelConstants):
        grid = m.grid
        if grid.d != model.d:
            raise InvalidInput("model and measure dimensions differ")
        self.model = model
        self.m = m
        self.grid = grid
        self.params = params
        self.constants = constants
        self.dtau = params.dtau
        self.radius = params.resolved_radius(grid, constants)
        p_max = getattr(model, "p_max", None) or 2.0 * max(constants.R_p, 1.0) + constants.kappa
        self.frozen = model.freeze(m, p_max=p_max)
        self.offsets = _offsets(grid, self.radius)
        K = len(self.offsets)
        multi = np.stack(np.unravel_index(np.arange(grid.size), grid.shape), axis=-1)
        # source node z = y - s for each (offset, target y)
        src = (multi[None, :, :] - self.offsets[:, None, :]) % grid.n
        self.src = np.ravel_multi_index(tuple(np.moveaxis(src, -1, 0)), grid.shape)
        self.velocity = self.offsets * (grid.h / self.dtau)
        y_idx = np.tile(np.arange(grid.size), K)
        z_idx = self.src.ravel()
        v = np.repeat(self.velocity, grid.size, axis=0)
        lz, bad_z = self.frozen.L_nodes(z_idx, v)
        ly, bad_y = self.frozen.L_nodes(y_idx, v)
        cost = 0.5 * self.dtau * (lz + ly)
        cost[bad_z | bad_y | ~np.isfinite(cost)] = np.inf
        self.cost = cost.reshape(K, grid.size)
        finite = self.cost[np.isfinite(self.cost)]
        self.neutral = bool(np.all(self.cost[0] == 0.0) and np.all(finite >= 0.0))

    def candidates(self, u: np.ndarray) -> np.ndarray:
        """``u(y - s) + cost(s, y)`` with shape ``(..., K, size)``."""
        return u[..., self.src] + self.cost

    def step(self, u: np.ndarray, return_argmin: bool = False):
        u = np.asarray(u, dtype=float)
        if not return_argmin and u.ndim == 2 and u.shape[0] >= 8:
            return self._batched_step(u)
        cand = self.candidates(u)
        if return_argmin:
            k = np.argmin(cand, axis=-2)
            return np.take_along_axis(cand, k[..., None, :], axis=-2)[..., 0, :], k
        return np.min(cand, axis=-2)

    def _batched_step(self, u: np.ndarray) -> np.ndarray:
        # slice views of a periodic pad beat a (B, K, n) gather for wide batches
        grid = self.grid
        n = grid.n
        S = int(np.max(np.abs(self.offsets)))
        shaped = u.reshape((u.shape[0],) + grid.shape)
        pad = np.pad(shaped, [(0, 0)] + [(S, S)] * grid.d, mode="wrap")
        cost = self.cost.reshape((len(self.offsets),) + grid.shape)
        out = np.full(shaped.shape, np.inf)
        tmp = np.empty(shaped.shape)
        for k, off in enumerate(self.offsets.tolist()):
            view = pad[(slice(None),) + tuple(slice(S - s, S - s + n) for s in off)]
            np.add(view, cost[k], out=tmp)
            np.minimum(out, tmp, out=out)
        return out.reshape(u.shape)

    def iterate(self, u0: np.ndarray, steps: int, record=None):
        """Run ``steps`` steps; ``record(k, u_k)`` is called after each step."""
        u = np.asarray(u0, dtype=float)
        for k in range(1, steps + 1):
            u = self.step(u)
            if record is not None:
                record(k, u)
        return u

    def transition_cost(self, z_idx, y_idx) -> np.ndarray:
        """Trapezoidal cost between arbitrary nodes (no radius cap)."""
        grid = self.grid
        z = grid.points[np.asarray(z_idx)]
        y = grid.points[np.asarray(y_idx)]
        v = displacement(z, y) / self.dtau
        v = v.reshape(len(z), grid.d)
        lz, _ = self.frozen.L_nodes(np.asarray(z_idx), v)
        ly, _ = self.frozen.L_nodes(np.asarray(y_idx), v)
        return 0.5 * self.dtau * (lz + ly)

    def costate(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Momentum at the minimiser of one step applied to ``u``.

        Returns ``(u_next, costate (size, d), predecessor node per target)``.
        The offset is refined to sub-grid accuracy by a parabola through the
        neighbouring candidates, then the envelope formula
        ``p = (D_vL(z, v) + D_vL(y, v)) / 2 + dtau/2 · D_xL(y, v)`` is applied.
        Exact ties between separated minimisers are averaged.
        """
        grid = self.grid
        cand = self.candidates(u)
        k = np.argmin(cand, axis=0)
        cols = np.arange(grid.size)
        best = cand[k, cols]
        pred = self.src[k, cols]
        p = self._momentum(cand, k)
        tol = TIE_RTOL * np.maximum(1.0, np.abs(best))
        tied = cand <= (best + tol)[None, :]
        far = np.zeros(grid.size, dtype=int)
        far_dist = np.zeros(grid.size)
        for j in range(len(self.offsets)):
            dist = np.sqrt(np.sum((self.offsets[j] - self.offsets[k]) ** 2, axis=-1))
            upd = tied[j] & (dist > far_dist)
            far[upd] = j
            far_dist[upd] = dist[upd]
        split = far_dist > 1.5
        if np.any(split):
            p_other = self._momentum(cand, far)
            p[split] = 0.5 * (p[split] + p_other[split])
        return best, p, pred

    def _momentum(self, cand: np.ndarray, k: np.ndarray) -> np.ndarray:
        grid = self.grid
        cols = np.arange(grid.size)
        s_ref = self.offsets[k].astype(float)
        lookup = {tuple(o): j for j, o in enumerate(self.offsets.tolist())}
        for ax in range(grid.d):
            e = np.zeros(grid.d, dtype=int)
            e[ax] = 1
            lo_idx = np.array([lookup.get(tuple(o - e), -1) for o in self.offsets.tolist()])[k]
            hi_idx = np.array([lookup.get(tuple(o + e), -1) for o in self.offsets.tolist()])[k]
            ok = (lo_idx >= 0) & (hi_idx >= 0)
            c0 = cand[k, cols]
            cm = np.where(ok, cand[np.maximum(lo_idx, 0), cols], np.inf)
            cp = np.where(ok, cand[np.maximum(hi_idx, 0), cols], np.inf)
            curv = cm - 2.0 * c0 + cp
            good = ok & np.isfinite(curv) & (curv > 0)
            shift = np.zeros(grid.size)
            shift[good] = 0.5 * (cm[good] - cp[good]) / curv[good]
            s_ref[:, ax] += np.clip(shift, -0.5, 0.5)
        v = s_ref * (grid.h / self.dtau)
        y = grid.points
        z = (y - s_ref * grid.h) % 1.0
        f = self.frozen
        return 0.5 * (f.dL_dv(z, v) + f.dL_dv(y, v)) + 0.5 * self.dtau * f.dL_dx_nodes(cols, v)


# --- result containers ---------------------------------------------------------------

@dataclass(eq=False)
class BarrierField:
    grid: TorusGrid
    base: int
    values: np.ndarray
    costate: np.ndarray
    alpha: float
    predecessor: np.ndarray
    certificate: float
    eps_aubry: float
    window_spread: float = 0.0
    dtau: float = 0.1

    @property
    def base_point(self) -> np.ndarray:
        return self.grid.node_coords(self.base)

    def to_csv(self, path) -> None:
        d = self.grid.d
        head = "node,h," + ",".join(f"p{ax}" for ax in range(d))
        with open(path, "w", newline="\n") as fh:
            fh.write(head + "\n")
            for i in range(self.grid.size):
                row = [str(i), fmt(self.values[i])] + [fmt(c) for c in self.costate[i]]
                fh.write(",".join(row) + "\n")

    @classmethod
    def read_csv(cls, path, grid: TorusGrid) -> tuple[np.ndarray, np.ndarray]:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if len(data) != grid.size:
            raise InvalidInput(f"{path} has {len(data)} rows, grid has {grid.size} nodes")
        return data[:, 1], data[:, 2:]


@dataclass(eq=False)
class AubryData:
    grid: TorusGrid
    diag: np.ndarray
    members: list
    threshold: float
    alpha: float

    @property
    def clusters(self) -> list:
        return cluster_nodes(self.grid, self.members)

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "alpha": self.alpha,
            "members": [int(i) for i in self.members],
            "diagonal": [None if not np.isfinite(x) else float(x) for x in self.diag],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def cluster_nodes(grid: TorusGrid, nodes) -> list:
    """Group node indices into periodically-adjacent clusters (8-neighbourhood in 2-d)."""
    nodes = sorted(int(i) for i in nodes)
    remaining = set(nodes)
    out = []
    while remaining:
        seed = min(remaining)
        remaining.discard(seed)
        stack, comp = [seed], [seed]
        while stack:
            i = stack.pop()
            mi = np.array(np.unravel_index(i, grid.shape))
            for delta in np.ndindex(*([3] * grid.d)):
                nb = (mi + np.array(delta) - 1) % grid.n
                j = int(np.ravel_multi_index(tuple(nb), grid.shape))
                if j in remaining:
                    remaining.discard(j)
                    stack.append(j)
                    comp.append(j)
        out.append(sorted(comp))
    return out


# --- high-level operations ------------------------------------------------------------

class WeakKam:
    """Weak-KAM toolkit for one model on one grid.

    Engines are cached per measure object so repeated calls with the same
    measure reuse the cost table.
    """

    def __init__(self, model: HamiltonianModel, grid: TorusGrid, params: LaxOleinikParams = LaxOleinikParams(),
                 constants: Optional[ModelConstants] = None):
        if model.d != grid.d:
            raise InvalidInput("model and grid dimensions differ")
        self.model = model
        self.grid = grid
        self.params = params
        self.constants = constants if constants is not None else estimate_constants(model, grid)
        self.radius = params.resolved_radius(grid, self.constants)
        self.eps_aubry = params.resolved_eps(grid, self.constants)
        self._cache: dict = {}

    def engine(self, m: GridMeasure) -> LaxOleinikEngine:
        if m.grid != self.grid:
            raise InvalidInput("measure lives on a different grid")
        key = id(m)
        hit = self._cache.get(key)
        if hit is not None and hit[0] is m:
            return hit[1]
        eng = LaxOleinikEngine(self.model, m, self.params, self.constants)
        if len(self._cache) > 64:
            self._cache.clear()
        self._cache[key] = (m, eng)
        return eng

    # semigroup ---------------------------------------------------------------
    def lo_step(self, u, m: GridMeasure, return_argmin: bool = False):
        u = self.grid.check_field(u).ravel()
        eng = self.engine(m)
        if return_argmin:
            val, k = eng.step(u, return_argmin=True)
            return val, eng.src[k, np.arange(self.grid.size)]
        return eng.step(u)

    def reach_steps(self) -> int:
        diameter = 0.5 * np.sqrt(self.grid.d)
        reach = np.max(np.sqrt(np.sum(_offsets(self.grid, self.radius) ** 2.0, axis=-1))) * self.grid.h
        return int(np.ceil(diameter / reach - 1e-12))

    def indicator(self, base) -> np.ndarray:
        u = np.full(self.grid.size, SENTINEL)
        u[self._node(base)] = 0.0
        return u

    def _node(self, x) -> int:
        if isinstance(x, (int, np.integer)):
            if not 0 <= int(x) < self.grid.size:
                raise InvalidInput(f"node index {x} out of range")
            return int(x)
        return self.grid.nearest_node(x)

    def action_table(self, base, m: GridMeasure, steps: int) -> list:
        """``[A_1, ..., A_steps]`` from the indicator of ``base``."""
        if steps < 1:
            raise InvalidInput("action_table needs at least one step")
        eng = self.engine(m)
        reach = self.reach_steps()
        out = []

        def rec(k, u):
            if k >= reach and np.max(u) >= LEAK_LEVEL:
                raise ReachabilityError(f"sentinel still present after {k} steps (reach bound {reach})")
            out.append(u.copy())

        eng.iterate(self.indicator(base), steps, rec)
        return out

    # critical value ------------------------------------------------------------
    def critical_value(self, m: GridMeasure, return_diagnostics: bool = False):
        p = self.params
        eng = self.engine(m)
        grid = self.grid
        probes = (np.arange(p.probes) * grid.size) // p.probes
        total = p.n_burn + p.n_window
        half = p.n_burn + p.n_window // 2
        snaps = {}

        def rec(k, u):
            if k in (p.n_burn, half, total):
                snaps[k] = u[probes].copy()

        eng.iterate(np.zeros(grid.size), total, rec)
        if p.n_burn == 0:
            snaps[0] = np.zeros(len(probes))
        rate = (snaps[total] - snaps[p.n_burn]) / (p.n_window * p.dtau)
        rates = [rate]
        if half > p.n_burn and half < total:
            rates.append((snaps[half] - snaps[p.n_burn]) / ((half - p.n_burn) * p.dtau))
            rates.append((snaps[total] - snaps[half]) / ((total - half) * p.dtau))
        allr = np.concatenate(rates)
        spread = float(np.max(allr) - np.min(allr))
        alpha = ALPHA_SIGN * float(np.mean(rate))
        diag = {"alpha": alpha, "probe_rates": rate.tolist(), "spread": spread, "probes": probes.tolist()}
        if not np.isfinite(alpha) or spread > 10.0 * p.alpha_tol:
            raise NoConvergence(f"Lax-Oleinik increments not settled (spread {spread:.3g})", diag)
        return (alpha, diag) if return_diagnostics else alpha

    # barrier -----------------------------------------------------------------
    def _window_min(self, eng, u0, alpha):
        p = self.params
        reach = self.reach_steps()
        best = None
        window = []
        batch = u0.ndim > 1
        u = u0
        for k in range(1, p.n_burn + p.n_window + 1):
            u = eng.step(u)
            if k >= reach and np.max(u) >= LEAK_LEVEL:
                raise ReachabilityError(f"sentinel still present after {k} steps (reach bound {reach})")
            if k >= p.n_burn:
                shifted = u - alpha * k * p.dtau
                best = shifted if best is None else np.minimum(best, shifted)
                if not batch:
                    window.append(shifted)
        spread = 0.0
        if window:
            w = np.array(window)
            spread = float(np.max(np.max(w, axis=0) - np.min(w, axis=0)))
        return best, spread

    def peierls_barrier(self, base, m: GridMeasure, alpha: Optional[float] = None,
                        check: bool = True) -> BarrierField:
        """``y -> h(base, y)`` with costate, predecessor links and certificate."""
        if alpha is None:
            alpha = self.critical_value(m)
        eng = self.engine(m)
        node = self._node(base)
        if eng.neutral and alpha == 0.0:
            # resting is free everywhere and moving costs O(|v|^2): slow curves
            # drive the long-time action to zero, so the barrier vanishes
            h, spread = np.zeros(self.grid.size), 0.0
        else:
            h, spread = self._window_min(eng, self.indicator(node), alpha)
        nxt, costate, pred = eng.costate(h)
        residual = float(np.max(np.abs(nxt - alpha * self.params.dtau - h)))
        if check and not residual <= self.params.tol_fp:
            raise BarrierNotCritical(
                f"fixed-point residual {residual:.3g} exceeds {self.params.tol_fp}; increase n_burn", residual)
        return BarrierField(grid=self.grid, base=node, values=h, costate=costate, alpha=float(alpha),
                            predecessor=pred, certificate=residual, eps_aubry=self.eps_aubry,
                            window_spread=spread, dtau=self.params.dtau)

    def certificate(self, values, m: GridMeasure, alpha: float) -> float:
        h = self.grid.check_field(values).ravel()
        return float(np.max(np.abs(self.engine(m).step(h) - alpha * self.params.dtau - h)))

    # Aubry set -----------------------------------------------------------------
    def _diagonal(self, eng, nodes, alpha, chunk=128) -> np.ndarray:
        out = np.empty(len(nodes))
        for start in range(0, len(nodes), chunk):
            sel = np.asarray(nodes[start:start + chunk])
            u0 = np.full((len(sel), self.grid.size), SENTINEL)
            u0[np.arange(len(sel)), sel] = 0.0
            best, _ = self._window_min(eng, u0, alpha)
            out[start:start + chunk] = best[np.arange(len(sel)), sel]
        return out

    def aubry_set(self, m: GridMeasure, alpha: Optional[float] = None, full: Optional[bool] = None) -> AubryData:
        if alpha is None:
            alpha = self.critical_value(m)
        grid = self.grid
        eng = self.engine(m)
        diag = np.full(grid.size, np.nan)
        if full is None:
            full = grid.n <= 128
        if full:
            nodes = np.arange(grid.size)
            diag[nodes] = self._diagonal(eng, nodes, alpha)
        else:
            multi = np.stack(np.unravel_index(np.arange(grid.size), grid.shape), axis=-1)
            coarse = np.flatnonzero(np.all(multi % 4 == 0, axis=-1))
            diag[coarse] = self._diagonal(eng, coarse, alpha)
            refine = set()
            cshape = tuple([grid.n // 4] * grid.d) if grid.n % 4 == 0 else None
            cvals = diag[coarse]
            for ci, node in enumerate(coarse):
                if cshape is not None:
                    cm = np.array(np.unravel_index(ci, cshape))
                    nbrs = []
                    for delta in np.ndindex(*([3] * grid.d)):
                        nb = (cm + np.array(delta) - 1) % cshape[0]
                        nbrs.append(int(np.ravel_multi_index(tuple(nb), cshape)))
                    local_min = cvals[ci] <= np.min(cvals[nbrs])
                else:
                    local_min = True
                if local_min or cvals[ci] <= self.eps_aubry:
                    mi = multi[node]
                    for delta in np.ndindex(*([9] * grid.d)):
                        nb = (mi + np.array(delta) - 4) % grid.n
                        refine.add(int(np.ravel_multi_index(tuple(nb), grid.shape)))
            todo = np.array(sorted(refine - set(coarse.tolist())), dtype=int)
            if len(todo):
                diag[todo] = self._diagonal(eng, todo, alpha)
        members = [int(i) for i in np.flatnonzero(np.nan_to_num(diag, nan=np.inf) <= self.eps_aubry)]
        if not members:
            raise EmptyAubrySet(f"no node has diagonal barrier below {self.eps_aubry:.3g}")
        return AubryData(grid=grid, diag=diag, members=members, threshold=self.eps_aubry, alpha=float(alpha))

    def common_aubry_point(self, path: Sequence[GridMeasure], alphas=None, aubry: Optional[list] = None):
        """Unique node shared (up to one cell) by the Aubry sets of every measure.

        Returns ``(node_index, point, list_of_AubryData)``.
        """
        if len(path) < 1:
            raise InvalidInput("common_aubry_point needs at least one measure")
        if aubry is None:
            alphas = alphas if alphas is not None else [self.critical_value(m) for m in path]
            aubry = [self.aubry_set(m, a) for m, a in zip(path, alphas)]
        grid = self.grid
        survivors = None
        for data in aubry:
            grown = set()
            for i in data.members:
                mi = np.array(np.unravel_index(i, grid.shape))
                for delta in np.ndindex(*([3] * grid.d)):
                    grown.add(int(np.ravel_multi_index(tuple((mi + np.array(delta) - 1) % grid.n), grid.shape)))
            survivors = grown if survivors is None else survivors & grown
        if not survivors:
            raise AssumptionAViolated("Aubry sets of the measure path have no common point")
        worst = np.full(grid.size, -np.inf)
        for data in aubry:
            worst = np.maximum(worst, np.nan_to_num(data.diag, nan=np.inf))
        clusters = cluster_nodes(grid, survivors)
        if len(clusters) > 1:
            warnings.warn(f"{len(clusters)} separated common Aubry candidates; choosing the most robust one",
                          RuntimeWarning, stacklevel=2)
        cand = sorted(survivors, key=lambda i: (worst[i], i))
        node = cand[0]
        return node, grid.node_coords(node), aubry

    # curves --------------------------------------------------------------------
    def calibrated_curve(self, barrier: BarrierField, y_end, steps: int, m: GridMeasure) -> "CalibratedCurve":
        eng = self.engine(m)
        node = self._node(y_end)
        nodes = [node]
        for _ in range(steps):
            nodes.append(int(barrier.predecessor[nodes[-1]]))
        nodes = np.array(nodes[::-1])
        cost = eng.transition_cost(nodes[:-1], nodes[1:])
        h = barrier.values
        defects = (h[nodes[1:]] - h[nodes[:-1]]) - (cost - barrier.alpha * self.params.dtau)
        disp = displacement(self.grid.points[nodes[:-1]], self.grid.points[nodes[1:]]).reshape(steps, self.grid.d)
        speeds = np.sqrt(np.sum(disp**2, axis=-1)) / self.params.dtau
        return CalibratedCurve(nodes=nodes, defects=defects, speeds=speeds)

    def check_dominated(self, nodes, barrier: BarrierField, m: GridMeasure, raise_on_failure: bool = True) -> dict:
        """Domination inequality on every sub-interval of a node curve.

        Equivalent to the per-step inequality because both sides are additive.
        """
        nodes = np.asarray(nodes, dtype=int)
        if len(nodes) < 2:
            raise InvalidInput("a curve needs at least two nodes")
        eng = self.engine(m)
        K = len(nodes) - 1
        tol = self.params.tol_fp
        cost = eng.transition_cost(nodes[:-1], nodes[1:])
        h = barrier.values
        lhs = h[nodes[1:]] - h[nodes[:-1]]
        rhs = cost - barrier.alpha * self.params.dtau
        slack = rhs + tol - lhs
        total_lhs = float(h[nodes[-1]] - h[nodes[0]])
        total_rhs = float(np.sum(rhs))
        report = {
            "steps": K,
            "min_step_slack": float(np.min(slack)),
            "total_lhs": total_lhs,
            "total_rhs": total_rhs,
            "total_gap": total_rhs - total_lhs,
            "passed": bool(np.min(slack) >= 0.0),
        }
        if raise_on_failure and not report["passed"]:
            raise DominationFailure(f"domination violated by {-report['min_step_slack']:.3g}", report)
        return report

    # continuity ------------------------------------------------------------------
    def critical_continuity_probe(self, m1: GridMeasure, m2: GridMeasure) -> dict:
        if m1.grid != m2.grid:
            raise InvalidInput("measures on different grids")
        a1 = self.critical_value(m1)
        a2 = a1 if m1 == m2 else self.critical_value(m2)
        dist = w1(m1, m2, diagnostic=True)
        diff = abs(a1 - a2)
        return {"alpha1": a1, "alpha2": a2, "difference": diff, "w1": dist,
                "ratio": diff / dist if dist > 0 else (0.0 if diff == 0 else float("inf"))}

    def continuity_scatter(self, pairs) -> list:
        return [self.critical_continuity_probe(a, b) for a, b in pairs]


@dataclass
class CalibratedCurve:
    nodes: np.ndarray
    defects: np.ndarray
    speeds: np.ndarray

    @property
    def max_defect(self) -> float:
        return float(np.max(np.abs(self.defects))) if len(self.defects) else 0.0

    @property
    def max_speed(self) -> float:
        return float(np.max(self.speeds)) if len(self.speeds) else 0.0


def check_semiconcavity(f, grid: TorusGrid, bound: Optional[float] = None, kink_ratio: float = 0.5) -> dict:
    """Upper bound of centred second differences (per axis, maximised).

    Without ``bound`` the check passes when ``C_sc * h`` stays below
    ``kink_ratio`` times the largest one-cell slope: a convex kink makes the
    second difference scale like ``slope / h`` and fails this test.
    """
    f = grid.check_field(f).reshape(grid.shape)
    h = grid.h
    worst = -np.inf
    slope = 0.0
    for ax in range(grid.d):
        d2 = (np.roll(f, -1, axis=ax) + np.roll(f, 1, axis=ax) - 2.0 * f) / h**2
        worst = max(worst, float(np.max(d2)))
        slope = max(slope, float(np.max(np.abs(np.roll(f, -1, axis=ax) - f))) / h)
    c_sc = max(worst, 0.0)
    ratio = c_sc * h / slope if slope > 0 else 0.0
    passed = c_sc <= bound if bound is not None else ratio <= kink_ratio
    return {"C_sc": c_sc, "max_second_difference": worst, "max_slope": slope, "kink_ratio": ratio,
            "bound": bound, "passed": bool(passed)}


def central_gradient(f, grid: TorusGrid) -> np.ndarray:
    """Periodic central differences, shape ``(size, d)``; a cross-check for the costate."""
    f = grid.check_field(f).reshape(grid.shape)
    cols = [((np.roll(f, -1, axis=ax) - np.roll(f, 1, axis=ax)) / (2 * grid.h)).ravel() for ax in range(grid.d)]
    return np.stack(cols, axis=-1)


def aubry_from_json(text: str, grid: TorusGrid) -> AubryData:
    obj = json.loads(text)
    diag = np.array([np.nan if v is None else v for v in obj["diagonal"]], dtype=float)
    return AubryData(grid=grid, diag=diag, members=list(obj["members"]), threshold=obj["threshold"],
                     alpha=obj["alpha"])


def nearest_member_distance(data: AubryData, point) -> float:
    pts = data.grid.points[data.members]
    return float(np.min(torus_distance(pts, np.asarray(point, dtype=float))))
