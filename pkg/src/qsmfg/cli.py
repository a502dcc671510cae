"""Command-line front end: ``qsmfg <subcommand> --config FILE``.

Exit codes: 0 success, 1 bad or unreadable config, 2 validation failure,
3 weak-KAM failure, 4 not converged or verification failed, 5 no common
Aubry point, 6 self-test failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .errors import AssumptionAViolated, DriftBlowup, InvalidConfig, InvalidInput, QsmfgError, WeakKamError
from .model import validate_tonelli
from .solver import ProblemSpec, SolveParams, dumps, solve, write_bundle
from .torus import fmt
from .transport import validate_initial
from .weakkam import WeakKam

EXIT_OK, EXIT_CONFIG, EXIT_INVALID, EXIT_WEAKKAM, EXIT_UNCONVERGED, EXIT_ASSUMPTION, EXIT_SELFTEST = range(7)


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load(args) -> RunConfig:
    if args.config is None:
        raise InvalidConfig("--config is required")
    cfg = load_config(args.config)
    over = {}
    if getattr(args, "seed", None) is not None:
        over["transport.seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        over["solver.threads"] = args.threads
    return cfg.with_overrides(**over)


def _outdir(args, cfg: RunConfig) -> Path:
    if args.out is not None:
        return Path(args.out)
    return cfg.path("output.directory") or Path("out")


def cmd_validate(args) -> int:
    cfg = _load(args)
    try:
        grid = cfg.grid
        model = cfg.model()
        m0 = cfg.measure(args.measure)
    except (InvalidInput, QsmfgError) as exc:
        raise InvalidConfig(str(exc)) from None
    tonelli = validate_tonelli(model, grid)
    ic = validate_initial(m0, cfg["initial.rho_cap"])
    report = {"tonelli": tonelli.to_dict(), "initial_condition": ic, "passed": tonelli.passed and ic["passed"]}
    report["failed"] = tonelli.failed + [f"initial.{k}" for k in ic["failed"]]
    sys.stdout.write(dumps(report))
    return EXIT_OK if report["passed"] else EXIT_INVALID


def _weakkam(cfg: RunConfig) -> WeakKam:
    return WeakKam(cfg.model(), cfg.grid, cfg.lo_params())


def cmd_critical_value(args) -> int:
    cfg = _load(args)
    m = cfg.measure(args.measure)
    wk = _weakkam(cfg)
    alpha, diag = wk.critical_value(m, return_diagnostics=True)
    out = _outdir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"alpha": alpha, "measure": args.measure or cfg["initial.measure"], "diagnostics": diag,
               "config": cfg.echo()}
    (out / "alpha.json").write_text(dumps(payload))
    print(f"alpha = {alpha:.6f}")
    return EXIT_OK


def cmd_barrier(args) -> int:
    cfg = _load(args)
    m = cfg.measure(args.measure)
    wk = _weakkam(cfg)
    base = args.base if args.base is not None else 0.0
    barrier = wk.peierls_barrier(base, m)
    out = _outdir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    barrier.to_csv(out / "barrier.csv")
    grid = cfg.grid
    print(f"alpha = {barrier.alpha:.6f}")
    print(f"base node = {barrier.base}")
    print(f"certificate residual = {barrier.certificate:.3e}")
    if grid.d == 1:
        for y in (0.25, 0.5):
            i = grid.nearest_node((barrier.base_point[0] + y) % 1.0)
            print(f"h({fmt(grid.node_coords(i)[0])}) = {barrier.values[i]:.6f}")
    return EXIT_OK


def cmd_aubry(args) -> int:
    cfg = _load(args)
    m = cfg.measure(args.measure)
    wk = _weakkam(cfg)
    data = wk.aubry_set(m)
    out = _outdir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "aubry.json").write_text(data.to_json() + "\n")
    print(f"alpha = {data.alpha:.6f}")
    print(f"members = {data.members}")
    print(f"threshold = {data.threshold:.3e}")
    return EXIT_OK


def cmd_solve(args) -> int:
    cfg = _load(args)
    grid = cfg.grid
    if grid.d != 1:
        raise InvalidConfig("solve supports grid.d = 1 only")
    model = cfg.model()
    m0 = cfg.measure(args.measure)
    try:
        problem = ProblemSpec(model=model, m0=m0, horizon=cfg["transport.horizon"], J=cfg["transport.steps"],
                              lo=cfg.lo_params(), particles=cfg["transport.particles"], seed=cfg["transport.seed"],
                              substeps=cfg["transport.substeps"], rho_cap=cfg["initial.rho_cap"])
    except InvalidInput as exc:
        _err(f"InvalidInput: {exc}")
        return EXIT_INVALID
    params = SolveParams(theta=cfg["solver.theta"], max_iter=cfg["solver.max_iter"], tol=cfg["solver.tol"],
                         threads=cfg["solver.threads"])
    wk = WeakKam(model, grid, problem.lo)

    def progress(it, r):
        _err(f"iteration {it}: residual {r:.6e}")

    bundle = solve(problem, params, wk=wk, progress=progress if args.verbose else None)
    echo = cfg.echo()
    echo["weakkam.search_radius.resolved"] = wk.radius
    echo["weakkam.eps_aubry.resolved"] = wk.eps_aubry
    out = write_bundle(bundle, problem, _outdir(args, cfg), echo, figures=args.figures)
    ok = bundle.converged and bundle.verification["passed"]
    print(f"converged = {str(bundle.converged).lower()}")
    print(f"iterations = {len(bundle.residuals)}")
    print(f"residual = {bundle.residual:.6e}")
    print(f"x_m = {fmt(bundle.x_m_point[0])}")
    print(f"alpha range = [{np.min(bundle.alphas):.6f}, {np.max(bundle.alphas):.6f}]")
    print(f"verified = {str(bundle.verification['passed']).lower()}")
    print(f"output = {out}")
    return EXIT_OK if ok else EXIT_UNCONVERGED


def cmd_selftest(args) -> int:
    from .selftest import run

    results = run()
    failed = [name for name, ok, _, _ in results if not ok]
    if failed:
        _err("failed checks: " + ", ".join(failed))
        return EXIT_SELFTEST
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qsmfg", description="Quasi-stationary MFG solver on the torus.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, measure=True):
        p.add_argument("--config", help="run configuration file")
        p.add_argument("--out", help="output directory (default: output.directory)")
        p.add_argument("--threads", type=int, help="cap on worker threads")
        p.add_argument("--seed", type=int, help="override transport.seed")
        if measure:
            p.add_argument("--measure", help="uniform | dirac:<x> | random:<seed> | bump:<c>:<w> | file:<path>")
        return p

    common(sub.add_parser("validate", help="check assumptions on the Hamiltonian and m0")).set_defaults(fn=cmd_validate)
    common(sub.add_parser("critical-value", help="critical value of one measure")).set_defaults(fn=cmd_critical_value)
    p = common(sub.add_parser("barrier", help="barrier field from a base point"))
    p.add_argument("--base", type=float, help="base point (default 0)")
    p.set_defaults(fn=cmd_barrier)
    common(sub.add_parser("aubry", help="Aubry set of one measure")).set_defaults(fn=cmd_aubry)
    p = common(sub.add_parser("solve", help="run the damped fixed-point iteration"))
    p.add_argument("--figures", action="store_true", help="also render PNG figures (needs matplotlib)")
    p.add_argument("--verbose", action="store_true", help="print the residual of each iteration to stderr")
    p.set_defaults(fn=cmd_solve)
    p = sub.add_parser("selftest", help="run the built-in oracle suite")
    p.add_argument("--threads", type=int, help="accepted for symmetry; unused")
    p.set_defaults(fn=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except InvalidConfig as exc:
        _err(f"InvalidConfig: {exc}")
        return EXIT_CONFIG
    except AssumptionAViolated as exc:
        _err(f"AssumptionAViolated: {exc}")
        return EXIT_ASSUMPTION
    except (WeakKamError, DriftBlowup) as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_WEAKKAM
    except InvalidInput as exc:
        _err(f"InvalidInput: {exc}")
        return EXIT_CONFIG
    except QsmfgError as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_WEAKKAM


if __name__ == "__main__":
    sys.exit(main())
