import math

import numpy as np
import pytest
from scipy.sparse.linalg import spsolve

import pb
from grid import InterfaceShape, ScalarField, ShapeMismatchError, StructuredGrid, surface_nodes
from model import IonicModel, SoluteAtom, SolvationModel, SolvationParams, debye_kappa
from pb import (
    AdmissibilityError, BoundViolationError, NonConvergenceError, born_free_energy, contraction_ratios,
    diffuse_problem, electrostatic_energy, gaussian_enclosed_charge, interface_traces, sharp_problem,
    smeared_yukawa_potential, solve, solve_sharp,
)


def make_model(charge=1.0, width=0.5, ions=None, eps_p=1.0, eps_w=80.0):
    params = SolvationParams(P0=0.01, gamma0=0.1, rho0=0.03, eps_p=eps_p, eps_w=eps_w)
    atoms = (SoluteAtom((0.0, 0.0, 0.0), charge=charge, smear_width=width),) if charge else ()
    return SolvationModel(params, ionic=ions or IonicModel.none(), atoms=atoms)


@pytest.fixture(scope="module")
def born():
    grid = StructuredGrid((0.0,), (8.0,), (512,), radial=True)
    ball = InterfaceShape.ball((0.0, 0.0, 0.0), 2.0)
    return grid, ball, solve_sharp(ball, grid, make_model())


# ── Trivial and degenerate data ────────────────────────────────────────────

def test_zero_data_gives_zero_potential_in_one_step():
    grid = StructuredGrid((-1.0, -1.0), (1.0, 1.0), (16, 16))
    model = make_model(charge=0.0, ions=IonicModel.symmetric_salt(0.1))
    phi = ScalarField(grid, np.full(grid.shape, 0.5))
    sol = solve(diffuse_problem(grid, model, phi))
    assert sol.iterations == 1
    assert np.all(sol.psi.values == 0.0)
    assert sol.free_energy == 0.0


def test_problem_rejects_foreign_phase_field():
    grid = StructuredGrid((0.0,), (1.0,), (16,))
    other = StructuredGrid((0.0,), (1.0,), (32,))
    with pytest.raises(ShapeMismatchError):
        diffuse_problem(grid, make_model(), ScalarField(other, np.zeros(other.shape)))


def test_unknown_boundary_kind():
    grid = StructuredGrid((0.0,), (4.0,), (32,), radial=True)
    with pytest.raises(ValueError, match="boundary"):
        diffuse_problem(grid, make_model(), ScalarField(grid, np.zeros(grid.shape)), boundary="dipole")


# ── Radial oracles ─────────────────────────────────────────────────────────

def test_gaussian_enclosed_charge_limits():
    assert gaussian_enclosed_charge(0.0, 2.0, 0.3) == pytest.approx(0.0)
    assert gaussian_enclosed_charge(10.0, 2.0, 0.3) == pytest.approx(2.0)


def test_born_energy_of_sharp_ball(born):
    grid, ball, sol = born
    expected = born_free_energy(1.0, 0.5, 2.0, 1.0, 80.0, outer=8.0)
    assert sol.free_energy == pytest.approx(expected, rel=5e-3)
    assert sol.free_energy > 0


def test_born_flux_is_continuous_across_the_interface(born):
    grid, ball, sol = born
    pts, nu, _ = surface_nodes(ball, grid, 4)
    traces = interface_traces(sol, ball, pts, nu)
    gauss = -1.0 / (4 * math.pi * 4.0)
    np.testing.assert_allclose(traces["flux_in"], gauss, rtol=2e-2)
    np.testing.assert_allclose(traces["flux_out"], gauss, rtol=2e-2)
    np.testing.assert_allclose(traces["psi_in"], traces["psi_out"], rtol=1e-2)


def test_screened_gaussian_matches_yukawa_potential():
    salt = IonicModel.symmetric_salt(8.0)
    model = make_model(charge=0.1, ions=salt)
    grid = StructuredGrid((0.0,), (25.0,), (2048,), radial=True)
    sol = solve(diffuse_problem(grid, model, ScalarField(grid, np.zeros(grid.shape))))
    r = grid.radius
    band = (r >= 0.2) & (r <= 4.0)
    kappa = debye_kappa(salt, 80.0)
    expected = smeared_yukawa_potential(r[band], 0.1, 0.5, 80.0, kappa)
    np.testing.assert_allclose(sol.psi.values[band], expected, rtol=2e-3)


def test_yukawa_origin_limit_is_continuous():
    near = smeared_yukawa_potential(np.array([1e-6]), 1.0, 0.4, 10.0, 0.7)[0]
    at = smeared_yukawa_potential(np.array([0.0]), 1.0, 0.4, 10.0, 0.7)[0]
    assert near == pytest.approx(at, rel=1e-6)


# ── Energy functional ──────────────────────────────────────────────────────

def test_solution_minimizes_the_discrete_energy():
    grid = StructuredGrid((0.0,), (6.0,), (128,), radial=True)
    model = make_model(charge=2.0, ions=IonicModel.symmetric_salt(0.5))
    problem = sharp_problem(grid, model, InterfaceShape.ball((0.0, 0.0, 0.0), 1.0))
    sol = solve(problem)
    assert electrostatic_energy(problem, sol.psi) == pytest.approx(sol.energy)
    rng = np.random.default_rng(3)
    for _ in range(3):
        bump = rng.normal(scale=1e-3, size=grid.shape)
        bump[-1] = 0.0
        assert electrostatic_energy(problem, sol.psi.with_values(sol.psi.values + bump)) > sol.energy


def test_trial_potential_must_match_boundary_data():
    grid = StructuredGrid((0.0,), (4.0,), (32,), radial=True)
    problem = sharp_problem(grid, make_model(), InterfaceShape.ball((0.0, 0.0, 0.0), 1.0))
    with pytest.raises(AdmissibilityError):
        electrostatic_energy(problem, ScalarField(grid, np.ones(grid.shape)))


def test_screened_boundary_takes_coulomb_values():
    grid = StructuredGrid((0.0,), (5.0,), (64,), radial=True)
    salt = IonicModel.symmetric_salt(0.2)
    model = make_model(ions=salt)
    problem = sharp_problem(grid, model, InterfaceShape.ball((0.0, 0.0, 0.0), 1.0), boundary="screened")
    kappa = debye_kappa(salt, 80.0)
    assert problem.boundary[-1] == pytest.approx(math.exp(-5 * kappa) / (4 * math.pi * 80.0 * 5.0))
    assert problem.boundary[0] == 0.0
    sol = solve(problem)
    assert sol.psi.values[-1] == pytest.approx(problem.boundary[-1])


# ── Newton behavior ────────────────────────────────────────────────────────

def test_contraction_ratios():
    assert contraction_ratios([1.0, 0.1, 1e-3, 0.0]) == pytest.approx([0.1, 0.01, 0.0])
    assert contraction_ratios([0.0, 1.0]) == []


def test_nonlinear_solve_converges_fast():
    grid = StructuredGrid((0.0,), (6.0,), (128,), radial=True)
    model = make_model(charge=5.0, ions=IonicModel.symmetric_salt(0.5))
    sol = solve_sharp(InterfaceShape.ball((0.0, 0.0, 0.0), 1.0), grid, model)
    assert sol.iterations <= 15
    assert sol.residual_history[-1] < sol.residual_history[0]
    assert sol.diagnostics()["mode"] == "sharp"


def test_iteration_cap_raises_with_history():
    grid = StructuredGrid((0.0,), (4.0,), (32,), radial=True)
    problem = sharp_problem(grid, make_model(), InterfaceShape.ball((0.0, 0.0, 0.0), 1.0))
    with pytest.raises(NonConvergenceError) as info:
        solve(problem, max_iters=0)
    assert len(info.value.residual_history) == 1


def test_failed_line_search_raises(monkeypatch):
    grid = StructuredGrid((0.0,), (4.0,), (32,), radial=True)
    problem = sharp_problem(grid, make_model(), InterfaceShape.ball((0.0, 0.0, 0.0), 1.0))
    # an ascent direction: no halving can lower the residual
    monkeypatch.setattr(pb, "spsolve", lambda J, rhs: -spsolve(J, rhs))
    with pytest.raises(NonConvergenceError, match="line search") as info:
        solve(problem)
    history = info.value.residual_history
    assert len(history) == 2
    assert history[1] > history[0]


def test_bound_violation():
    grid = StructuredGrid((0.0,), (4.0,), (32,), radial=True)
    with pytest.raises(BoundViolationError):
        solve_sharp(InterfaceShape.ball((0.0, 0.0, 0.0), 1.0), grid, make_model(), c_bound=1e-9)
