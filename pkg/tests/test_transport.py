import json

import numpy as np
import pytest

from qsmfg.errors import DriftBlowup, InvalidInput
from qsmfg.model import free_model
from qsmfg.torus import GridMeasure, TorusGrid, w1_points
from qsmfg.transport import (DriftField, MeasurePath, ParticleEnsemble, advance, check_linfty, constant_path, drift,
                             sample_particles, simulate, time_lipschitz, validate_initial)


def analytic_velocity(x):
    # minus the derivative of the closed-form barrier on (0, 1/2)
    return -2.0 * np.sin(np.pi * x)


@pytest.fixture(scope="module")
def field(mechanical, barrier64, uniform64):
    return DriftField.from_barrier(mechanical, barrier64, uniform64)


def test_drift_examples(mechanical, barrier64, uniform64):
    assert drift(0.0, mechanical, barrier64, uniform64) == 0.0
    assert drift(0.25, mechanical, barrier64, uniform64) == pytest.approx(-np.sqrt(2), abs=0.1)


def test_drift_antisymmetry(mechanical, barrier64, uniform64):
    y = np.linspace(0.01, 0.49, 37)
    a = drift(y, mechanical, barrier64, uniform64)
    b = drift(1 - y, mechanical, barrier64, uniform64)
    assert np.max(np.abs(a + b)) <= 1e-6


def test_drift_limit(mechanical, barrier64, uniform64):
    f = DriftField.from_barrier(mechanical, barrier64, uniform64, limit=0.5)
    with pytest.raises(DriftBlowup):
        f(np.array([[0.25]]))


def test_advance_fixed_point(field):
    ens = advance(ParticleEnsemble(np.zeros(100)), field, 0.05)
    assert np.all(ens.positions == 0.0)


def test_advance_single_step(field):
    ens = advance(ParticleEnsemble(np.full(100, 0.25)), field, 0.01)
    assert float(ens.positions[0, 0]) == pytest.approx(0.23586, abs=1e-3)


def test_advance_requires_positive_dt(field):
    with pytest.raises(InvalidInput):
        advance(ParticleEnsemble(np.zeros(100)), field, 0.0)


def test_rk2_order_ratio():
    x0 = np.linspace(0.05, 0.45, 200)
    ens = ParticleEnsemble(x0)

    def error(dt):
        one = advance(ens, analytic_velocity, dt).positions
        two = advance(advance(ens, analytic_velocity, dt / 2), analytic_velocity, dt / 2).positions
        return float(np.max(np.abs(one - two)))

    ratio = error(0.02) / error(0.01)
    assert ratio == pytest.approx(8.0, abs=2.0)


def test_ensemble_invariants():
    with pytest.raises(InvalidInput):
        ParticleEnsemble(np.zeros(10))
    ens = ParticleEnsemble(np.linspace(-0.5, 1.5, 200))
    assert np.all((ens.positions >= 0) & (ens.positions < 1))
    assert float(np.sum(ens.weights)) == pytest.approx(1.0)


def test_sampling_deterministic_and_symmetric(grid64):
    m = GridMeasure.bump(grid64, 0.0, 0.1)
    a = sample_particles(m, 1000, seed=3)
    b = sample_particles(m, 1000, seed=3)
    assert np.array_equal(a.positions, b.positions)
    rho = a.binned(grid64).density
    assert np.max(np.abs(rho - np.roll(rho[::-1], 1))) <= 1e-10


def test_sampling_reproduces_measure(grid64):
    m = GridMeasure.random(grid64, 4)
    binned = sample_particles(m, 20_000).binned(grid64)
    from qsmfg.torus import w1
    assert w1(binned, m) <= 2 * grid64.h


def test_sampling_2d():
    g = TorusGrid(2, 8)
    ens = sample_particles(GridMeasure.dirac(g, (0.25, 0.5)), 400, seed=1)
    assert ens.positions.shape == (400, 2)
    assert np.all(np.abs(ens.positions - [0.25, 0.5]) <= 0.5 / 8 + 1e-12)


def test_sampling_needs_particles(uniform64):
    with pytest.raises(InvalidInput):
        sample_particles(uniform64, 50)


def test_free_model_path_is_frozen(grid64):
    m0 = GridMeasure.bump(grid64, 0.5, 0.15)
    zero = np.zeros((64, 1))
    path = simulate(free_model(), m0, [zero] * 5, [m0] * 5, 0.2, 5, particles=1000)
    for m in path.measures[1:]:
        assert np.array_equal(m.weights, path.measures[0].weights)
    rep = check_linfty(path)
    assert rep["per_time"] == [rep["per_time"][0]] * 6 and not rep["grows"]


@pytest.fixture(scope="module")
def concentrating(mechanical, barrier64, uniform64):
    return simulate(mechanical, uniform64, [barrier64.costate] * 20, [uniform64] * 20, 0.05, 20, particles=2000)


def test_mass_conservation(concentrating):
    for m in concentrating.measures:
        assert abs(float(np.sum(m.weights)) - 1.0) <= 1e-12


def test_symmetry_preserved(concentrating):
    for m in concentrating.measures:
        rho = m.density
        assert np.max(np.abs(rho - np.roll(rho[::-1], 1))) <= 1e-10


def test_concentration_toward_aubry_point(concentrating, grid64):
    near = np.minimum(np.arange(64), 64 - np.arange(64)) * grid64.h <= 0.1
    mass = np.array([float(np.sum(m.weights[near])) for m in concentrating.measures])
    steps = np.diff(mass)
    assert np.all(steps >= -1e-12)
    assert np.all((steps > 0) | (mass[:-1] >= 1 - 1e-9))
    assert mass[0] < 0.25 and mass[-1] == pytest.approx(1.0)


def test_time_lipschitz(concentrating, wk64):
    rep = time_lipschitz(concentrating)
    assert 0 < rep["ratio"] <= rep["max_speed"] + 1e-12
    assert rep["ratio"] <= 1.1 * wk64.constants.C_b
    snaps = concentrating.snapshots
    bandwidth = 2 * (1 / 64)
    from qsmfg.torus import w1
    for j in range(0, 20, 4):
        for k in range(j + 1, 21, 5):
            gap = w1(concentrating.measures[j], concentrating.measures[k])
            assert gap <= rep["max_speed"] * (k - j) * 0.05 + 2 * bandwidth
            assert w1_points(snaps[j], snaps[k]) <= rep["max_speed"] * (k - j) * 0.05 + 1e-12


def test_linfty_reports_growth(concentrating):
    rep = check_linfty(concentrating)
    assert rep["grows"] and rep["passed"] and rep["bound"] is None
    assert not check_linfty(concentrating, bound=1.5)["passed"]


def test_linfty_uniform():
    g = TorusGrid(1, 32)
    rep = check_linfty(constant_path(GridMeasure.uniform(g), 4, 0.25))
    assert rep["max_density"] == pytest.approx(1.0)


def test_measure_path_serialization(concentrating, tmp_path, grid64):
    concentrating.to_csv(tmp_path / "m.csv")
    back = MeasurePath.from_csv(tmp_path / "m.csv", grid64, 0.05)
    assert back.J == 20
    for a, b in zip(back.measures, concentrating.measures):
        assert np.array_equal(a.weights, b.weights)
    manifest = json.loads(concentrating.manifest_json())
    assert manifest == {"dt": 0.05, "J": 20, "P": 2000, "seed": 0}


def test_simulate_input_checks(mechanical, uniform64, barrier64):
    with pytest.raises(InvalidInput):
        simulate(mechanical, uniform64, [barrier64.costate], [uniform64], 0.1, 3)
    with pytest.raises(InvalidInput):
        simulate(mechanical, uniform64, [barrier64.costate], [uniform64], 0.1, 1, substeps=0)


def test_substeps_reduce_to_single_step(mechanical, uniform64, barrier64):
    a = simulate(mechanical, uniform64, [barrier64.costate] * 2, [uniform64] * 2, 0.05, 2, particles=500)
    b = simulate(mechanical, uniform64, [barrier64.costate] * 2, [uniform64] * 2, 0.05, 2, particles=500, substeps=4)
    # the drift jumps at the cut locus 1/2; compare where it is smooth
    smooth = np.abs(a.snapshots[0][:, 0] - 0.5) > 0.2
    assert np.max(np.abs(a.snapshots[-1] - b.snapshots[-1])[smooth]) <= 5e-3


def test_validate_initial(grid64):
    assert validate_initial(GridMeasure.uniform(grid64))["passed"]
    rep = validate_initial(GridMeasure.dirac(grid64, 0.0), rho_cap=50.0)
    assert rep["failed"] == ["bounded_density"]
