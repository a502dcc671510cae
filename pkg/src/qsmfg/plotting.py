"""PNG figures rendered from a bundle's ``plotdata`` tables.

Imported lazily so that matplotlib is only needed when figures are requested.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "axes.labelsize": 11,
    "xtick.direction": "in",
    "ytick.direction": "in",
    "xtick.top": True,
    "ytick.right": True,
    "font.size": 10,
    "savefig.dpi": 120,
}
# no timestamps or version strings in the files
PNG_METADATA = {"Software": None}


def _read(path: Path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    return header, np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def _save(fig, path: Path) -> None:
    fig.savefig(path, metadata=PNG_METADATA)
    plt.close(fig)


def density_heatmap(plotdata: Path, target: Path) -> None:
    header, data = _read(plotdata / "density.csv")
    t = data[:, 0]
    y = np.array([float(h) for h in header[1:]])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 4))
        mesh = ax.pcolormesh(y, t, data[:, 1:], shading="nearest", cmap="viridis")
        fig.colorbar(mesh, ax=ax, label="density")
        ax.set_xlabel("y")
        ax.set_ylabel("t")
        _save(fig, target)


def residual_curve(plotdata: Path, target: Path) -> None:
    _, data = _read(plotdata / "residual.csv")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.semilogy(data[:, 0], np.maximum(data[:, 1], 1e-300), "o-", label="residual")
        ax.semilogy(data[:, 0], np.maximum(data[:, 2], 1e-300), "k--", label="best so far")
        ax.set_xlabel("iteration")
        ax.set_ylabel("sup_t W1")
        ax.legend(frameon=False)
        _save(fig, target)


def alpha_curve(plotdata: Path, target: Path) -> None:
    _, data = _read(plotdata / "alpha.csv")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(data[:, 0], data[:, 1], "o-")
        ax.set_xlabel("t")
        ax.set_ylabel("critical value")
        _save(fig, target)


def render_bundle_figures(outdir) -> list:
    out = Path(outdir)
    plotdata = out / "plotdata"
    figs = out / "figures"
    figs.mkdir(exist_ok=True)
    made = []
    for name, fn in (("density.png", density_heatmap), ("residual.png", residual_curve), ("alpha.png", alpha_curve)):
        fn(plotdata, figs / name)
        made.append(figs / name)
    return made


def barrier_figure(values, grid_axis, target, reference=None) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(grid_axis, values, label="barrier")
        if reference is not None:
            ax.plot(grid_axis, reference, "k--", label="closed form")
            ax.legend(frameon=False)
        ax.set_xlabel("y")
        ax.set_ylabel("h(y)")
        _save(fig, Path(target))
