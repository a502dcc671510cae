import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qsmfg.errors import CoercivityFailure, GradientRadiusExceeded, InvalidInput, UnsupportedFamily
from qsmfg.model import (CouplingKernel, Custom, Mechanical, ScaledSeparable, coupling, dp_hamiltonian,
                         estimate_constants, free_model, hamiltonian, lagrangian, tabulated_hamiltonian,
                         validate_tonelli)
from qsmfg.torus import GridMeasure, TorusGrid


@pytest.fixture(scope="module")
def grid():
    return TorusGrid(1, 64)


@pytest.fixture(scope="module")
def uniform(grid):
    return GridMeasure.uniform(grid)


def kernel_closed_form(x, y):
    return (1 - np.cos(2 * np.pi * x)) * (1 + 0.5 * np.cos(2 * np.pi * y))


def mechanical_custom():
    """The builtin mechanical model re-expressed through callables only."""
    def F(x, m):
        g = m.grid
        return kernel_closed_form(x[:, 0][:, None], g.axis[None, :]) @ m.weights

    def H(x, p, m):
        return 0.5 * np.sum(p * p, axis=-1) - F(x, m)

    return Custom(H=H, p_max=8.0, name="mechanical-callable")


def test_hamiltonian_examples(grid, uniform):
    mech = Mechanical()
    assert hamiltonian(mech, 0.0, 0.0, uniform) == 0.0
    assert hamiltonian(mech, 0.25, 0.0, uniform) == pytest.approx(-1.0, abs=1e-12)
    # V(0) = 1 makes the rest value at the minimizer -1; the value -2 sits at x = 1/4 where V = 2
    assert hamiltonian(ScaledSeparable(), 0.0, 0.0, uniform) == pytest.approx(-1.0, abs=1e-12)
    assert hamiltonian(ScaledSeparable(), 0.25, 0.0, uniform) == pytest.approx(-2.0, abs=1e-12)


def test_lagrangian_examples(grid, uniform):
    mech = Mechanical()
    assert lagrangian(mech, 0.25, 1.0, uniform) == pytest.approx(1.5, abs=1e-12)
    for m in (uniform, GridMeasure.random(grid, 2), GridMeasure.dirac(grid, 0.3)):
        assert lagrangian(mech, 0.0, 0.0, m) == 0.0


def test_custom_lagrangian_matches_closed_form(grid):
    rng = np.random.default_rng(5)
    mech, custom = Mechanical(), mechanical_custom()
    for k in range(10):
        m = GridMeasure.random(grid, k)
        x, v = rng.random(8), rng.uniform(-3, 3, 8)
        exact = lagrangian(mech, x[:, None], v[:, None], m)
        numeric = lagrangian(custom, x[:, None], v[:, None], m)
        assert np.max(np.abs(exact - numeric)) <= 1e-6


def test_custom_lagrangian_radius_too_small(uniform):
    custom = Custom(H=mechanical_custom().H, p_max=0.5)
    with pytest.raises(GradientRadiusExceeded):
        lagrangian(custom, 0.1, 2.0, uniform)


def test_dp_hamiltonian_examples(grid, uniform):
    rng = np.random.default_rng(0)
    mech = Mechanical()
    for x in rng.random(5):
        assert dp_hamiltonian(mech, x, 0.3, GridMeasure.random(grid, 1)) == pytest.approx(0.3)
    assert dp_hamiltonian(ScaledSeparable(), 0.4, 0.5, uniform) == pytest.approx(0.5, abs=1e-12)


def test_custom_gradient_matches_analytic(grid):
    rng = np.random.default_rng(8)
    custom = mechanical_custom()
    m = GridMeasure.random(grid, 3)
    x, p = rng.random((100, 1)), rng.uniform(-3, 3, (100, 1))
    assert np.max(np.abs(dp_hamiltonian(custom, x, p, m) - p[:, 0])) <= 1e-4


def test_coupling_examples(grid):
    mech = Mechanical()
    assert coupling(mech, 0.0, GridMeasure.random(grid, 4)) == 0.0
    assert coupling(mech, 0.5, GridMeasure.dirac(grid, 0.0)) == pytest.approx(3.0, abs=1e-12)
    g256 = TorusGrid(1, 256)
    assert coupling(mech, 0.25, GridMeasure.uniform(g256)) == pytest.approx(1.0, abs=1e-12)


def test_coupling_riemann_sum_off_grid(grid):
    m = GridMeasure.random(grid, 11)
    x = 0.3217
    expected = float(np.sum(kernel_closed_form(x, grid.axis) * m.weights))
    assert coupling(Mechanical(), x, m) == pytest.approx(expected, abs=1e-12)


def test_coupling_requires_mechanical(uniform):
    with pytest.raises(UnsupportedFamily):
        coupling(ScaledSeparable(), 0.1, uniform)


def test_dimension_mismatch(uniform):
    with pytest.raises(InvalidInput):
        hamiltonian(Mechanical(d=2), 0.1, 0.0, uniform)
    with pytest.raises(InvalidInput):
        hamiltonian(Mechanical(), [[0.1]], [[0.0, 1.0]], uniform)


def test_coupling_nonnegative_and_zero_at_origin(grid):
    mech = Mechanical()
    for seed in range(10):
        m = GridMeasure.random(grid, seed)
        vals = coupling(mech, grid.axis[:, None], m)
        assert np.all(vals >= 0) and vals[0] == 0.0


@given(x=st.floats(0, 1, exclude_max=True), p=st.floats(-5, 5), v=st.floats(-5, 5), seed=st.integers(0, 1000),
       family=st.sampled_from(["mechanical", "scaled"]))
@settings(max_examples=200, deadline=None)
def test_fenchel_young(x, p, v, seed, family):
    grid = TorusGrid(1, 32)
    model = Mechanical() if family == "mechanical" else ScaledSeparable()
    m = GridMeasure.random(grid, seed)
    H = hamiltonian(model, x, p, m)
    assert p * v <= lagrangian(model, x, v, m) + H + 1e-12
    v_star = dp_hamiltonian(model, x, p, m)
    assert abs(lagrangian(model, x, v_star, m) + H - p * v_star) <= 1e-8 * (1 + abs(p * v_star))


def test_estimate_constants_mechanical(grid):
    c = estimate_constants(Mechanical(), grid)
    assert c.M_alpha == pytest.approx(3.0, abs=1e-9)
    assert c.R_p == pytest.approx(np.sqrt(12.0), abs=1e-6)
    assert c.C_b == pytest.approx(np.sqrt(c.cH_growth) * (np.sqrt(c.cH_growth) + np.sqrt(c.M_alpha + c.cH_growth)))
    assert c.kappa == pytest.approx(c.cH_growth * (1 + c.R_p))
    assert not c.degenerate


def test_estimate_constants_deterministic(grid):
    a = estimate_constants(ScaledSeparable(), grid, seed=3)
    b = estimate_constants(ScaledSeparable(), grid, seed=3)
    assert a == b


def test_estimate_constants_free_model_flagged(grid):
    c = estimate_constants(free_model(), grid)
    assert c.M_alpha == 0.0 and c.R_p == 0.0
    assert c.degenerate and any("Aubry" in note for note in c.notes)


def test_estimate_constants_rejects_non_coercive(grid):
    def H(x, p, m):
        return np.tanh(np.sum(p * p, axis=-1)) - 2.0

    with pytest.raises(CoercivityFailure):
        estimate_constants(Custom(H=H, p_max=5.0), grid)


def test_validate_tonelli_builtins(grid):
    for model in (Mechanical(), ScaledSeparable()):
        report = validate_tonelli(model, grid)
        assert report.passed, report.failed


def test_validate_tonelli_linear_growth_fails_convexity(grid):
    p_nodes = np.linspace(-8, 8, 65)
    F = 1 - np.cos(2 * np.pi * grid.axis)
    table = np.abs(p_nodes)[None, :] - F[:, None]
    report = validate_tonelli(tabulated_hamiltonian(grid, p_nodes, table), grid)
    assert not report.passed
    assert "convexity" in report.failed


def test_validate_tonelli_negative_kernel(grid):
    table = CouplingKernel(scale=1.0).values(grid).copy()
    table[3, 5] = -0.25
    model = Mechanical(CouplingKernel(family="tabulated", table=table))
    report = validate_tonelli(model, grid)
    assert "kernel_nonnegative" in report.failed


def test_builtin_kernel_invariants(grid):
    checks = CouplingKernel().check(grid)
    assert all(checks.values())
    k = CouplingKernel().values(grid)
    assert np.allclose(k, kernel_closed_form(grid.axis[:, None], grid.axis[None, :]), atol=1e-14)


def test_scaled_separable_requires_positive_factor():
    with pytest.raises(InvalidInput):
        ScaledSeparable(f0=0.4, f1=0.5)


def test_scaled_separable_measure_factor(grid):
    s = ScaledSeparable()
    assert s.measure_factor(GridMeasure.uniform(grid)) == pytest.approx(1.0, abs=1e-14)
    assert s.measure_factor(GridMeasure.dirac(grid, 0.0)) == pytest.approx(1.5)
    assert s.measure_factor(GridMeasure.dirac(grid, 0.5)) == pytest.approx(0.5)


def test_kernel_csv(tmp_path, grid):
    g = TorusGrid(1, 8)
    table = CouplingKernel().values(g)
    rows = [f"{i},{j},{float(table[i, j])!r}" for i in range(8) for j in range(8)]
    (tmp_path / "k.csv").write_text("\n".join(rows) + "\n")
    loaded = CouplingKernel.from_csv(tmp_path / "k.csv", g)
    assert np.array_equal(loaded.values(g), table)


def test_two_dimensional_mechanical():
    g = TorusGrid(2, 8)
    m = GridMeasure.uniform(g)
    mech = Mechanical(d=2)
    assert hamiltonian(mech, [0.0, 0.0], [0.0, 0.0], m) == 0.0
    v = lagrangian(mech, [0.25, 0.0], [1.0, 1.0], m)
    assert v > 1.0
    assert np.allclose(dp_hamiltonian(mech, [0.3, 0.6], [0.2, -0.1], m), [0.2, -0.1])
