import numpy as np
import polars as pl
import pytest

from grid import InterfaceShape, ScalarField, StructuredGrid, read_binary
from model import SoluteAtom, SolvationModel, SolvationParams
from profiles import canonical_profile, lift_profile, recovery_phase_field
from relax import (
    LOG_COLUMNS, FlowBoundError, FlowRelaxer, StagnationError, check_schedule, checkpoint,
    write_flow_log, xi_continuation,
)

PARAMS = SolvationParams(P0=0.01, gamma0=0.1, rho0=0.03, eps_p=1.0, eps_w=80.0)


@pytest.fixture
def line():
    return StructuredGrid((-1.0,), (1.0,), (64,))


def constant(grid, value):
    return ScalarField(grid, np.full(grid.shape, value))


# ── Homogeneous fields ─────────────────────────────────────────────────────

def test_solvent_state_is_stationary(line):
    state = FlowRelaxer(SolvationModel(PARAMS), line, 0.1).minimize(constant(line, 0.0), tol=1e-12)
    assert state.converged and state.step == 0
    assert state.energy == 0.0


def test_uniform_field_relaxes_to_the_solvent_well(line):
    relaxer = FlowRelaxer(SolvationModel(PARAMS), line, 0.1)
    state = relaxer.minimize(constant(line, 0.5), tol=1e-5)
    assert state.converged and not state.partial
    assert np.max(np.abs(state.phi.values)) < 1e-3
    # a uniform start never develops spatial structure
    assert np.ptp(state.phi.values) <= 1e-12
    assert np.all(np.diff(state.energies) <= 1e-14)


def test_confinement_bound(line):
    relaxer = FlowRelaxer(SolvationModel(PARAMS), line, 0.1, slack=-0.08)
    with pytest.raises(FlowBoundError):
        relaxer.minimize(constant(line, 0.9), tol=1e-8, max_steps=10)


def test_stagnation_reports_the_last_state(line):
    relaxer = FlowRelaxer(SolvationModel(PARAMS), line, 0.1, dt_min=1.0)
    with pytest.raises(StagnationError) as info:
        relaxer.minimize(constant(line, 0.5), tol=1e-8, dt0=0.5)
    assert info.value.state.step == 0


def test_refresh_period_is_validated(line):
    with pytest.raises(ValueError):
        FlowRelaxer(SolvationModel(PARAMS), line, 0.1, pb_refresh=0)


# ── Interfaces ─────────────────────────────────────────────────────────────

def test_flow_decreases_energy_of_a_solvated_ball():
    grid = StructuredGrid((0.0,), (3.0,), (96,), radial=True)
    ball = InterfaceShape.ball((0.0, 0.0, 0.0), 1.2)
    model = SolvationModel(PARAMS, atoms=(SoluteAtom((0.0, 0.0, 0.0), charge=1.0, lj_energy=1.0),))
    phi0 = recovery_phase_field(ball, 0.25, grid)
    state = FlowRelaxer(model, grid, 0.25, pb_refresh=2).minimize(phi0, tol=1e-12, max_steps=8)
    assert state.partial and not state.converged
    assert state.step == 8
    assert np.all(np.diff(state.energies) <= 64 * np.finfo(float).eps * abs(state.energies[0]))
    assert state.energies[-1] < state.energies[0]
    assert state.pb is not None and state.breakdown.ele_term == pytest.approx(state.pb.free_energy)


def test_flow_log_and_checkpoint(tmp_path, line):
    plane = InterfaceShape.plane((1.0,), 0.0)
    phi0 = lift_profile(canonical_profile(0.2), plane, line)
    state = FlowRelaxer(SolvationModel(PARAMS), line, 0.2).minimize(phi0, tol=1e-12, max_steps=3)
    log_path = tmp_path / "flow_0.2.csv"
    write_flow_log(state, str(log_path), "cafe")
    frame = pl.read_csv(log_path)
    assert frame.columns == LOG_COLUMNS + ["config_hash"]
    assert frame.height == 4
    assert frame["step"].to_list() == [0, 1, 2, 3]

    bin_path = tmp_path / "fields" / "phi.bin"
    checkpoint(state, str(bin_path), "cafe")
    meta, values = read_binary(str(bin_path))
    assert meta["config_hash"] == "cafe"
    np.testing.assert_array_equal(values, state.phi.values)


# ── xi-continuation ────────────────────────────────────────────────────────

def test_schedule_validation():
    assert check_schedule([0.2, 0.1]) == (0.2, 0.1)
    with pytest.raises(ValueError, match="empty"):
        check_schedule([])
    with pytest.raises(ValueError, match="decreasing"):
        check_schedule([0.1, 0.2])
    with pytest.raises(ValueError):
        check_schedule([0.6, 0.1])


def test_continuation_refines_the_grid(capsys):
    grid = StructuredGrid((-1.0,), (1.0,), (64,))
    plane = InterfaceShape.plane((1.0,), 0.0)
    phi0 = lift_profile(canonical_profile(0.4), plane, grid)
    states = xi_continuation(SolvationModel(PARAMS), grid, [0.4, 0.2], phi0, tol=1e-12, max_steps=2)
    assert [s.xi for s in states] == [0.4, 0.2]
    assert states[0].phi.grid.cells == (64,)
    assert states[1].phi.grid.h <= 0.2 / 8
    out = capsys.readouterr().out
    assert "refined grid" in out
    assert "✓ xi=0.2" in out
