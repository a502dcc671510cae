"""Flat ``section.key = value`` run configuration.

One key per line, ``#`` starts a comment, blank lines are ignored.  Every key
has a default; the resolved configuration (defaults filled in) is echoed into
each output manifest.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import InvalidConfig, InvalidInput
from .model import CouplingKernel, HamiltonianModel, Mechanical, ScaledSeparable, free_model
from .torus import GridMeasure, TorusGrid, parse_measure
from .weakkam import LaxOleinikParams

AUTO = "auto"

# key -> (type, default)
SCHEMA: dict[str, tuple[type, Any]] = {
    "model.family": (str, "mechanical"),
    "model.coupling": (float, 1.0),
    "model.kernel_scale": (float, 1.0),
    "model.kernel_file": (str, ""),
    "model.f0": (float, 1.0),
    "model.f1": (float, 0.5),
    "model.v0": (float, 2.0),
    "model.v1": (float, 1.0),
    "grid.d": (int, 1),
    "grid.n": (int, 128),
    "weakkam.dtau": (float, 0.1),
    "weakkam.n_burn": (int, 100),
    "weakkam.n_window": (int, 50),
    "weakkam.search_radius": (float, AUTO),
    "weakkam.eps_aubry": (float, AUTO),
    "weakkam.tol_fp": (float, 1e-2),
    "weakkam.alpha_tol": (float, 5e-2),
    "transport.particles": (int, 10000),
    "transport.horizon": (float, 1.0),
    "transport.steps": (int, 20),
    "transport.seed": (int, 0),
    "transport.substeps": (int, 1),
    "initial.measure": (str, "uniform"),
    "initial.rho_cap": (float, 50.0),
    "solver.theta": (float, 0.5),
    "solver.max_iter": (int, 50),
    "solver.tol": (float, 1e-2),
    "solver.threads": (int, 1),
    "output.directory": (str, "out"),
    "output.formats": (str, "csv,json"),
}

FAMILIES = ("mechanical", "scaled_separable", "free")


def parse_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise InvalidConfig(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key not in SCHEMA:
            raise InvalidConfig(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise InvalidConfig(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _coerce(key: str, raw: str):
    kind, default = SCHEMA[key]
    if raw == AUTO and default == AUTO:
        return AUTO
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise InvalidConfig(f"{key}: cannot read {raw!r} as {kind.__name__}") from None
    return raw


@dataclass(frozen=True)
class RunConfig:
    values: dict
    base_dir: Path = field(default=Path("."))

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def path(self, key) -> Path | None:
        raw = self.values[key]
        if not raw:
            return None
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    # builders -----------------------------------------------------------------
    @property
    def grid(self) -> TorusGrid:
        return TorusGrid(self["grid.d"], self["grid.n"])

    def model(self) -> HamiltonianModel:
        family = self["model.family"]
        d = self["grid.d"]
        if family == "free":
            return free_model(d)
        if family == "scaled_separable":
            return ScaledSeparable(self["model.f0"], self["model.f1"], self["model.v0"], self["model.v1"], d=d)
        kernel_file = self.path("model.kernel_file")
        if kernel_file is not None:
            kernel = CouplingKernel.from_csv(kernel_file, self.grid)
        else:
            kernel = CouplingKernel(coupling=self["model.coupling"], scale=self["model.kernel_scale"])
        return Mechanical(kernel, d=d)

    def lo_params(self) -> LaxOleinikParams:
        auto = lambda k: None if self[k] == AUTO else self[k]  # noqa: E731
        return LaxOleinikParams(dtau=self["weakkam.dtau"], n_burn=self["weakkam.n_burn"],
                                n_window=self["weakkam.n_window"], search_radius=auto("weakkam.search_radius"),
                                eps_aubry=auto("weakkam.eps_aubry"), tol_fp=self["weakkam.tol_fp"],
                                alpha_tol=self["weakkam.alpha_tol"])

    def measure(self, spec: str | None = None) -> GridMeasure:
        spec = spec if spec is not None else self["initial.measure"]
        kind, _, arg = spec.partition(":")
        if kind == "file" or (":" not in spec and spec not in ("uniform",)):
            target = Path(arg if kind == "file" else spec)
            if not target.is_absolute() and not target.exists():
                target = self.base_dir / target
            spec = f"file:{target}"
        return parse_measure(spec, self.grid)

    def with_overrides(self, **kv) -> "RunConfig":
        vals = dict(self.values)
        for k, v in kv.items():
            if v is not None:
                vals[k] = v
        return RunConfig(vals, self.base_dir)

    def echo(self) -> dict:
        return dict(sorted(self.values.items()))


def validate_values(values: dict, base_dir: Path) -> None:
    """Range checks run before any computation."""
    def need(cond, msg):
        if not cond:
            raise InvalidConfig(msg)

    need(values["model.family"] in FAMILIES, f"model.family must be one of {FAMILIES}")
    need(values["grid.d"] in (1, 2), "grid.d must be 1 or 2")
    need(values["grid.n"] >= 8, f"grid.n must be at least 8 (got {values['grid.n']})")
    need(values["weakkam.dtau"] > 0, "weakkam.dtau must be positive")
    need(values["weakkam.n_burn"] >= 0 and values["weakkam.n_window"] >= 1, "weakkam window sizes out of range")
    for key in ("weakkam.search_radius", "weakkam.eps_aubry"):
        need(values[key] == AUTO or values[key] > 0, f"{key} must be positive or 'auto'")
    need(values["weakkam.tol_fp"] > 0 and values["weakkam.alpha_tol"] > 0, "weakkam tolerances must be positive")
    need(values["transport.particles"] >= 100, "transport.particles must be at least 100")
    need(values["transport.horizon"] > 0 and values["transport.steps"] >= 1, "transport horizon/steps out of range")
    need(values["transport.substeps"] >= 1, "transport.substeps must be at least 1")
    need(0 < values["solver.theta"] <= 1, "solver.theta must lie in (0, 1]")
    need(values["solver.max_iter"] >= 1 and values["solver.tol"] >= 0, "solver limits out of range")
    need(values["solver.threads"] >= 1, "solver.threads must be at least 1")
    need(values["initial.rho_cap"] > 0, "initial.rho_cap must be positive")
    kf = values["model.kernel_file"]
    if kf:
        p = Path(kf) if Path(kf).is_absolute() else base_dir / kf
        need(p.is_file(), f"model.kernel_file not found: {p}")
    spec = values["initial.measure"]
    kind = spec.partition(":")[0]
    if kind == "file" or kind not in ("uniform", "dirac", "random", "bump"):
        target = spec.partition(":")[2] if kind == "file" else spec
        p = Path(target) if Path(target).is_absolute() else base_dir / target
        need(p.is_file(), f"initial.measure file not found: {p}")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc.strerror}") from None
    return config_from_text(text, path.parent)


def config_from_text(text: str, base_dir=Path(".")) -> RunConfig:
    raw = parse_text(text)
    values = {key: default for key, (_, default) in SCHEMA.items()}
    for key, value in raw.items():
        values[key] = _coerce(key, value)
    base = Path(base_dir)
    validate_values(values, base)
    return RunConfig(values, base)


def to_text(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.echo().items())


__all__ = ["RunConfig", "load_config", "config_from_text", "SCHEMA", "InvalidConfig", "InvalidInput"]
