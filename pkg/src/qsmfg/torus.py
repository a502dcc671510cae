"""Periodic grids on the unit torus, grid measures and the Wasserstein-1 metric.

Nodes sit at ``x_i = i / n`` along every axis.  Fields are plain numpy arrays
of shape ``grid.shape``; measures are :class:`GridMeasure` instances whose
weights live on the same nodes.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidInput

MASS_TOL = 1e-12


def wrap(x):
    """Map coordinates into ``[0, 1)``."""
    x = np.mod(x, 1.0)
    # np.mod(-1e-18, 1.0) == 1.0
    return np.where(x >= 1.0, 0.0, x)


def displacement(a, b):
    """Shortest signed displacement ``b ⊖ a`` on the torus, componentwise."""
    d = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
    return d - np.round(d)


def torus_distance(a, b):
    d = displacement(a, b)
    if d.ndim == 0:
        return abs(float(d))
    return np.sqrt(np.sum(d * d, axis=-1))


@dataclass(frozen=True)
class TorusGrid:
    d: int
    n: int

    def __post_init__(self):
        if self.d not in (1, 2):
            raise InvalidInput(f"grid dimension must be 1 or 2, got {self.d}")
        if self.n < 8:
            raise InvalidInput(f"grid needs n >= 8 nodes per axis, got {self.n}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.d

    @property
    def size(self) -> int:
        return self.n**self.d

    @property
    def axis(self) -> np.ndarray:
        return np.arange(self.n) / self.n

    @cached_property
    def points(self) -> np.ndarray:
        """Node coordinates, shape ``(size, d)`` in C order."""
        mesh = np.meshgrid(*([self.axis] * self.d), indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        pts.setflags(write=False)
        return pts

    def as_points(self, x) -> np.ndarray:
        """Promote a point or a batch of points to shape ``(N, d)``."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 0:
            if self.d != 1:
                raise InvalidInput("scalar point given for a 2-d grid")
            return x.reshape(1, 1)
        if self.d == 1 and x.ndim == 1:
            return x.reshape(-1, 1)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if x.shape[-1] != self.d:
            raise InvalidInput(f"points have dimension {x.shape[-1]}, grid has d={self.d}")
        return x.reshape(-1, self.d)

    def nearest_node(self, x) -> int:
        """Flat index of the node closest to ``x``."""
        idx = np.round(wrap(self.as_points(x)[0]) * self.n).astype(int) % self.n
        return int(np.ravel_multi_index(tuple(idx), self.shape))

    def node_coords(self, index: int) -> np.ndarray:
        return np.array(np.unravel_index(index, self.shape), dtype=float) / self.n

    def check_field(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if f.shape != self.shape:
            if f.size == self.size:
                return f.reshape(self.shape)
            raise InvalidInput(f"field of shape {f.shape} does not match grid {self.shape}")
        return f


@dataclass(frozen=True, eq=False)
class GridMeasure:
    """Probability measure carried by the nodes of a :class:`TorusGrid`."""

    grid: TorusGrid
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.array(self.grid.check_field(self.weights), dtype=float)
        if not np.all(np.isfinite(w)):
            raise InvalidInput("measure weights must be finite")
        if np.any(w < 0):
            raise InvalidInput("measure weights must be nonnegative")
        total = math_fsum(w)
        if abs(total - 1.0) > MASS_TOL:
            raise InvalidInput(f"measure weights sum to {total!r}, expected 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def density(self) -> np.ndarray:
        return self.weights * self.grid.size

    @classmethod
    def normalized(cls, grid, weights):
        w = np.clip(np.asarray(weights, dtype=float), 0.0, None)
        total = w.sum()
        if not total > 0:
            raise InvalidInput("cannot normalise a measure with zero mass")
        return cls(grid, w / total)

    @classmethod
    def uniform(cls, grid):
        return cls(grid, np.full(grid.shape, 1.0 / grid.size))

    @classmethod
    def dirac(cls, grid, x=0.0):
        w = np.zeros(grid.size)
        w[grid.nearest_node(x)] = 1.0
        return cls(grid, w.reshape(grid.shape))

    @classmethod
    def random(cls, grid, seed):
        rng = np.random.default_rng(seed)
        return cls.normalized(grid, rng.random(grid.shape))

    @classmethod
    def bump(cls, grid, center=0.5, width=0.1):
        """Periodised Gaussian bump sampled at the nodes."""
        r = torus_distance(grid.points, grid.as_points(center)[0])
        return cls.normalized(grid, np.exp(-0.5 * (r / width) ** 2).reshape(grid.shape))

    def __eq__(self, other):
        return (
            isinstance(other, GridMeasure)
            and self.grid == other.grid
            and np.array_equal(self.weights, other.weights)
        )

    __hash__ = None


def math_fsum(a) -> float:
    import math

    return math.fsum(np.asarray(a, dtype=float).ravel())


def _same_grid(mu, nu):
    if mu.grid != nu.grid:
        raise InvalidInput(f"measures live on different grids: {mu.grid} vs {nu.grid}")


def _weighted_median(values, weights):
    order = np.argsort(values, kind="stable")
    cw = np.cumsum(weights[order])
    k = int(np.searchsorted(cw, 0.5 * cw[-1]))
    return values[order][min(k, len(values) - 1)]


def w1_circle(xa, wa, xb, wb) -> float:
    """Exact W1 between two weighted point clouds on the unit circle.

    The circular distance equals ``min_s ∫ |F_a - F_b - s| dx``; the optimal
    shift is a length-weighted median of the CDF difference.
    """
    xa = wrap(np.asarray(xa, dtype=float).ravel())
    xb = wrap(np.asarray(xb, dtype=float).ravel())
    wa = np.broadcast_to(np.asarray(wa, dtype=float), xa.shape)
    wb = np.broadcast_to(np.asarray(wb, dtype=float), xb.shape)
    pos = np.concatenate([xa, xb])
    jump = np.concatenate([wa, -wb])
    order = np.argsort(pos, kind="stable")
    pos, jump = pos[order], jump[order]
    diff = np.cumsum(jump)
    lengths = np.diff(np.append(pos, pos[0] + 1.0))
    # the arc [0, pos[0]) carries the same CDF difference as the closing arc
    s = _weighted_median(diff, lengths)
    return float(np.sum(np.abs(diff - s) * lengths))


def w1(mu: GridMeasure, nu: GridMeasure, diagnostic: bool = False) -> float:
    """Wasserstein-1 distance between two grid measures.

    Exact on the circle (d=1).  For d=2 only an entropic approximation exists,
    and it must be requested explicitly with ``diagnostic=True``.
    """
    _same_grid(mu, nu)
    if mu.grid.d == 1:
        diff = np.cumsum(mu.weights) - np.cumsum(nu.weights)
        s = np.median(diff)
        return float(np.sum(np.abs(diff - s)) * mu.grid.h)
    if not diagnostic:
        raise InvalidInput("exact W1 is only available for d=1; pass diagnostic=True for d=2")
    return entropic_w1(mu, nu)


def w1_points(a, b) -> float:
    """Exact W1 between two equal-weight particle clouds on the circle."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    return w1_circle(a, 1.0 / a.size, b, 1.0 / b.size)


def entropic_w1(mu, nu, eps=1e-4, max_nodes=1024, tol=1e-10) -> float:
    """Log-domain Sinkhorn with eps-scaling; returns the transport cost of the plan.

    Diagnostic use only: accuracy is about 1e-3 on small grids.
    """
    _same_grid(mu, nu)
    grid = mu.grid
    if grid.size > max_nodes:
        raise InvalidInput(f"entropic W1 is limited to {max_nodes} nodes")
    pts = grid.points
    cost = torus_distance(pts[:, None, :], pts[None, :, :])
    a = mu.weights.ravel()
    b = nu.weights.ravel()
    la = np.log(np.where(a > 0, a, 1.0))
    lb = np.log(np.where(b > 0, b, 1.0))
    ma = a > 0
    mb = b > 0
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    for e in np.geomspace(1.0, eps, 30):
        for _ in range(2000):
            f_new = np.where(ma, e * la - e * logsumexp((g[None, :] - cost) / e, b=mb[None, :], axis=1), 0.0)
            g_new = np.where(mb, e * lb - e * logsumexp((f_new[:, None] - cost) / e, b=ma[:, None], axis=0), 0.0)
            delta = max(np.max(np.abs(f_new - f)), np.max(np.abs(g_new - g)))
            f, g = f_new, g_new
            if delta < tol:
                break
    support = ma[:, None] & mb[None, :]
    logp = np.where(support, (f[:, None] + g[None, :] - cost) / eps, -np.inf)
    plan = np.exp(logp - logsumexp(logp))
    return float(np.sum(plan * cost))


def interp(f, grid: TorusGrid, x) -> np.ndarray:
    """Periodic multilinear interpolation of a nodal field; exact at the nodes."""
    f = grid.check_field(f)
    pts = wrap(grid.as_points(x)) * grid.n
    i0 = np.floor(pts).astype(int)
    t = pts - i0
    i0 %= grid.n
    i1 = (i0 + 1) % grid.n
    if grid.d == 1:
        return (1.0 - t[:, 0]) * f[i0[:, 0]] + t[:, 0] * f[i1[:, 0]]
    out = np.zeros(len(pts))
    for cx, ix in ((1.0 - t[:, 0], i0[:, 0]), (t[:, 0], i1[:, 0])):
        for cy, iy in ((1.0 - t[:, 1], i0[:, 1]), (t[:, 1], i1[:, 1])):
            out += cx * cy * f[ix, iy]
    return out


def convex_combination(mu: GridMeasure, nu: GridMeasure, theta: float) -> GridMeasure:
    _same_grid(mu, nu)
    if not 0.0 <= theta <= 1.0:
        raise InvalidInput(f"theta must lie in [0, 1], got {theta}")
    if theta == 0.0:
        return mu
    if theta == 1.0:
        return nu
    w = (1.0 - theta) * mu.weights + theta * nu.weights
    return GridMeasure(mu.grid, w / w.sum())


def _hat_weights(coord, n):
    """Triangular kernel of half-width 2h along one axis: 4 nodes per particle."""
    base = np.floor(coord * n).astype(int)
    idx = base[:, None] + np.arange(-1, 3)[None, :]
    dist = np.abs(coord[:, None] * n - idx)
    w = np.clip(1.0 - 0.5 * dist, 0.0, None) * 0.5
    return idx % n, w


def kernel_density(positions, grid: TorusGrid, weights=None) -> GridMeasure:
    """Bin particles onto the grid with a periodic triangular kernel of bandwidth 2h."""
    pts = wrap(grid.as_points(positions))
    if len(pts) == 0:
        raise InvalidInput("cannot bin an empty particle ensemble")
    if weights is None:
        weights = np.full(len(pts), 1.0 / len(pts))
    weights = np.asarray(weights, dtype=float)
    if grid.d == 1:
        idx, w = _hat_weights(pts[:, 0], grid.n)
        flat = idx.ravel()
        vals = (w * weights[:, None]).ravel()
    else:
        ix, wx = _hat_weights(pts[:, 0], grid.n)
        iy, wy = _hat_weights(pts[:, 1], grid.n)
        flat = (ix[:, :, None] * grid.n + iy[:, None, :]).ravel()
        vals = (wx[:, :, None] * wy[:, None, :] * weights[:, None, None]).ravel()
    mass = np.bincount(flat, weights=vals, minlength=grid.size)
    return GridMeasure(grid, (mass / mass.sum()).reshape(grid.shape))


# --- serialisation -------------------------------------------------------------

def fmt(x) -> str:
    return format(float(x), ".17g")


def measure_to_csv(m: GridMeasure, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("node_index,weight\n")
        for i, w in enumerate(m.weights.ravel()):
            fh.write(f"{i},{fmt(w)}\n")


def measure_from_csv(path, grid: TorusGrid) -> GridMeasure:
    w = np.zeros(grid.size)
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip().lstrip("-").isdigit():
                continue
            w[int(row[0])] = float(row[1])
    return GridMeasure(grid, w.reshape(grid.shape))


def measure_to_json(m: GridMeasure) -> str:
    return "[" + ", ".join(fmt(w) for w in m.weights.ravel()) + "]"


def measure_from_json(text: str, grid: TorusGrid) -> GridMeasure:
    return GridMeasure(grid, np.array(json.loads(text), dtype=float).reshape(grid.shape))


def parse_measure(spec: str, grid: TorusGrid) -> GridMeasure:
    """Build a measure from a short spec string.

    Accepted forms: ``uniform``, ``dirac:<x>``, ``random:<seed>``,
    ``bump:<center>:<width>``, ``file:<path>`` or a bare path (CSV or JSON).
    Points in 2-d are written ``x,y``.
    """
    spec = spec.strip()
    kind, _, arg = spec.partition(":")

    def point(s):
        vals = [float(v) for v in s.split(",")]
        return vals[0] if grid.d == 1 else vals

    try:
        if kind == "uniform":
            return GridMeasure.uniform(grid)
        if kind == "dirac":
            return GridMeasure.dirac(grid, point(arg or "0"))
        if kind == "random":
            return GridMeasure.random(grid, int(arg or 0))
        if kind == "bump":
            center, _, width = arg.partition(":")
            return GridMeasure.bump(grid, point(center), float(width or 0.1))
    except (ValueError, IndexError) as exc:
        if isinstance(exc, InvalidInput):
            raise
        raise InvalidInput(f"malformed measure spec {spec!r}: {exc}") from None
    path = Path(arg if kind == "file" else spec)
    if not path.exists():
        raise InvalidInput(f"unknown measure spec or missing file: {spec!r}")
    if path.suffix == ".json":
        return measure_from_json(path.read_text(), grid)
    return measure_from_csv(path, grid)
