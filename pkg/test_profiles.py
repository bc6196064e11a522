import math

import numpy as np
import polars as pl
import pytest

from grid import InterfaceShape, StructuredGrid, gradient, laplacian
from profiles import (
    ProfileConstructionError, ProfileSpec, ShapeTooSmallError, beta_limit, canonical_profile,
    clamped_profile, gk_profile, l1_distance, lift_profile, make_profile, recovery_phase_field,
)
from grid import ScalarField


# ── Canonical profile ──────────────────────────────────────────────────────

def test_canonical_profile_solves_equipartition_ode():
    profile = canonical_profile(0.1)
    s = np.linspace(-0.5, 0.5, 2001)
    assert np.max(np.abs(profile.ode_residual(s))) <= 1e-12


def test_canonical_profile_shape():
    profile = canonical_profile(0.05)
    s = np.linspace(-0.3, 0.3, 101)
    g = profile.value(s)
    assert profile.value(0.0) == pytest.approx(0.5)
    assert np.all(np.diff(g) > 0)
    np.testing.assert_allclose(g + profile.value(-s), 1.0, atol=1e-15)


def test_canonical_line_energy_is_one():
    assert canonical_profile(0.2).line_energy() == pytest.approx(1.0, abs=1e-12)


def test_canonical_second_derivative_matches_differences():
    profile = canonical_profile(0.1)
    s = np.linspace(-0.2, 0.2, 9)
    h = 1e-6
    fd = (profile.derivative(s + h) - profile.derivative(s - h)) / (2 * h)
    np.testing.assert_allclose(profile.second_derivative(s), fd, rtol=1e-5, atol=1e-5)


# ── Rescaled-well profiles ─────────────────────────────────────────────────

def test_beta_limit():
    assert beta_limit(1.0) == 1.0
    assert beta_limit(4.0) == pytest.approx(1.25)
    assert beta_limit(0.25) == pytest.approx(beta_limit(4.0))
    with pytest.raises(ValueError):
        beta_limit(0.0)


@pytest.mark.parametrize("a", [1.0, 4.0])
def test_gk_profile_is_a_monotone_transition(a):
    xi = 0.01
    profile = gk_profile(xi, a)
    assert 0.0 < profile.width < math.sqrt(xi / 2)
    assert np.all(np.diff(profile.q_nodes) > 0)
    s = np.linspace(-0.01, profile.width + 0.01, 400)
    g = profile.value(s)
    assert np.all(np.diff(g) >= -1e-12)
    assert profile.value(-1e-9) == 0.0
    assert profile.value(profile.width) == 1.0


def test_gk_slope_follows_its_ode():
    xi, a = 0.02, 4.0
    profile = gk_profile(xi, a)
    s = np.linspace(0.1, 0.9, 5) * profile.width
    g = profile.value(s)
    h = 1e-7
    fd = (profile.value(s + h) - profile.value(s - h)) / (2 * h)
    expected = np.sqrt(2.0 * (18 * g**2 * (1 - g) ** 2 / a + xi)) / xi
    np.testing.assert_allclose(fd, expected, rtol=1e-3)


@pytest.mark.parametrize("a", [1.0, 4.0])
def test_gk_line_energy_tends_to_beta(a):
    assert gk_profile(1e-4, a).line_energy() == pytest.approx(beta_limit(a), abs=2e-3)


def test_gk_q_is_only_for_gk():
    with pytest.raises(ValueError):
        canonical_profile(0.1).q(0.5)
    profile = gk_profile(0.05)
    assert profile.q(1.0) == pytest.approx(profile.width)


def test_profile_spec_validation():
    with pytest.raises(ValueError):
        ProfileSpec(0.0)
    with pytest.raises(ValueError):
        ProfileSpec(0.6)
    with pytest.raises(ValueError):
        ProfileSpec(0.1, well_scale=-1.0)
    with pytest.raises(ValueError):
        make_profile("sigmoid", 0.1)


def test_construction_error_is_a_runtime_error():
    assert issubclass(ProfileConstructionError, RuntimeError)


# ── Clamped collar profile ─────────────────────────────────────────────────

def test_clamped_profile_is_supported_on_the_collar():
    xi = 0.04
    profile = clamped_profile(xi)
    assert profile.width == pytest.approx(0.2)
    assert profile.value(-0.01) == 0.0
    assert profile.value(0.0) == pytest.approx(0.0, abs=1e-14)
    assert profile.value(profile.width) == 1.0
    assert profile.value(0.5 * profile.width) == pytest.approx(0.5)
    assert profile.line_energy() == pytest.approx(1.0, rel=1e-3)


# ── Lifts ──────────────────────────────────────────────────────────────────

def test_lift_hints_match_finite_differences():
    grid = StructuredGrid((-1.0,), (1.0,), (1600,))
    plane = InterfaceShape.plane((1.0,), 0.1)
    phi = lift_profile(canonical_profile(0.1), plane, grid)
    assert not phi.underresolved
    inner = slice(2, -2)
    fd_grad = gradient(phi.strip()).values[inner, 0]
    fd_lap = laplacian(phi.strip()).values[inner]
    scale = np.max(np.abs(phi.lap_hint))
    np.testing.assert_allclose(phi.grad_hint[inner, 0], fd_grad, atol=1e-3 * np.max(np.abs(fd_grad)))
    np.testing.assert_allclose(phi.lap_hint[inner], fd_lap, atol=1e-3 * scale)
    # G = {x < 0.1}: phi falls off to the right
    assert phi.values[0] == pytest.approx(1.0) and phi.values[-1] == pytest.approx(0.0)


def test_coarse_lift_is_flagged(capsys):
    grid = StructuredGrid((-1.0,), (1.0,), (16,))
    phi = lift_profile(canonical_profile(0.1), InterfaceShape.plane((1.0,), 0.0), grid)
    assert phi.underresolved
    assert "does not resolve" in capsys.readouterr().out


def test_recovery_field_needs_room_for_the_collar():
    grid = StructuredGrid((-1.0, -1.0), (1.0, 1.0), (64, 64))
    with pytest.raises(ShapeTooSmallError):
        recovery_phase_field(InterfaceShape.ball((0.0, 0.0), 0.1), 0.04, grid)
    with pytest.raises(ShapeTooSmallError):
        recovery_phase_field(InterfaceShape.slab((1.0, 0.0), -0.1, 0.1), 0.04, grid)


def test_recovery_field_is_one_deep_inside_and_zero_outside():
    grid = StructuredGrid((0.0,), (3.0,), (300,), radial=True)
    ball = InterfaceShape.ball((0.0, 0.0, 0.0), 1.0)
    phi = recovery_phase_field(ball, 0.04, grid)
    r = grid.radius
    assert np.all(phi.values[r <= 0.8 - 1e-9] == 1.0)
    assert np.all(phi.values[r >= 1.0] == 0.0)


# ── Distances to the indicator ─────────────────────────────────────────────

def test_l1_distance_of_constant_fields_is_exact():
    grid = StructuredGrid((0.0,), (2.0,), (64,), radial=True)
    ball = InterfaceShape.ball((0.0, 0.0, 0.0), 0.777)
    zero = ScalarField(grid, np.zeros(grid.shape))
    one = ScalarField(grid, np.ones(grid.shape))
    volume = 4 * math.pi / 3 * 0.777**3
    assert l1_distance(zero, ball) == pytest.approx(volume, rel=1e-12)
    assert l1_distance(one, ball) == pytest.approx(4 * math.pi / 3 * 8.0 - volume, rel=1e-12)


def test_l1_distance_of_canonical_lift_is_order_xi():
    xi = 0.05
    grid = StructuredGrid((-1.0,), (1.0,), (2048,))
    plane = InterfaceShape.plane((1.0,), 0.0)
    phi = lift_profile(canonical_profile(xi), plane, grid)
    assert l1_distance(phi, plane) == pytest.approx(xi * math.log(2.0) / 3.0, rel=2e-2)


def test_export_csv(tmp_path):
    path = tmp_path / "profile.csv"
    canonical_profile(0.1).export_csv(str(path), n=33)
    frame = pl.read_csv(path)
    assert frame.columns == ["s", "g"]
    assert frame.height == 33

    canonical_profile(0.1).export_csv(str(path), n=5, config_hash="beef")
    frame = pl.read_csv(path)
    assert frame.columns == ["s", "g", "config_hash"]
    assert set(frame["config_hash"].to_list()) == {"beef"}
