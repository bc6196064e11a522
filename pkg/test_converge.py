import json
import math

import numpy as np
import pytest

from converge import (
    ConvergenceReport, HypothesisUnmetError, StudySetup, assess, ch_force_study, counterexample_study,
    decrease_check, default_support, energy_component_study, equipartition_study, rel_error,
    relaxed_interface, richardson_fit, sequence_member, solvation_force_study,
)
from grid import InterfaceShape, ScalarField, StructuredGrid
from model import SolvationModel, SolvationParams

PARAMS = SolvationParams(P0=0.01, gamma0=0.1, rho0=0.03, eps_p=1.0, eps_w=80.0)


@pytest.fixture
def line_setup():
    grid = StructuredGrid((-1.0,), (1.0,), (16,))
    return StudySetup(SolvationModel(PARAMS), grid, InterfaceShape.plane((1.0,), 0.0), h_over_xi=1 / 16)


@pytest.fixture
def ball_setup():
    grid = StructuredGrid((0.0,), (3.0,), (16,), radial=True)
    return StudySetup(SolvationModel(PARAMS), grid, InterfaceShape.ball((0.0, 0.0, 0.0), 1.0))


# ── Fits and errors ────────────────────────────────────────────────────────

def test_rel_error():
    assert rel_error(1.1, 1.0) == pytest.approx(0.1)
    assert rel_error(1e-13, 0.0) == pytest.approx(0.1)
    assert math.isnan(rel_error(1.0, math.inf))
    assert math.isnan(rel_error(math.nan, 1.0))


def test_richardson_fit_recovers_a_power_law():
    xis = [0.4, 0.2, 0.1]
    limit, p = richardson_fit(xis, [2.0 + 3.0 * x**1.5 for x in xis])
    assert limit == pytest.approx(2.0, abs=1e-9)
    assert p == pytest.approx(1.5, abs=1e-9)


def test_richardson_fit_uses_the_last_three_points():
    xis = [0.8, 0.4, 0.2, 0.1]
    values = [100.0] + [1.0 - 0.5 * x for x in xis[1:]]
    limit, p = richardson_fit(xis, values)
    assert limit == pytest.approx(1.0, abs=1e-9)
    assert p == pytest.approx(1.0, abs=1e-9)


def test_richardson_fit_without_a_fit():
    limit, p = richardson_fit([0.2, 0.1], [1.0, 2.0])
    assert limit == 2.0 and math.isnan(p)
    limit, p = richardson_fit([0.4, 0.2, 0.1], [1.0, 2.0, 2.0])
    assert limit == 2.0 and math.isnan(p)
    # oscillating data admit no monotone power law
    limit, p = richardson_fit([0.4, 0.2, 0.1], [1.0, 2.0, 1.0])
    assert limit == 1.0 and math.isnan(p)


def series_report(values, xis=(0.4, 0.2, 0.1)):
    report = ConvergenceReport("energy-study", {}, list(xis))
    for xi, value in zip(xis, values):
        report.add("surface", xi, value, 1.0)
    return report


def test_exact_fit_does_not_excuse_the_final_error():
    report = series_report([1.4, 1.2, 1.1])
    check = assess(report, "surface", 0.02, fit_tol=0.01)
    assert check["measure"] == "final+fit"
    assert check["fit_exponent"] == pytest.approx(1.0)
    assert check["fit_rel_error"] == pytest.approx(0.0, abs=1e-9)
    assert check["final_rel_error"] == pytest.approx(0.1)
    assert check["monotone"] and not check["passed"]

    check = assess(report, "surface", 0.02, rule="fit")
    assert check["measure"] == "fit" and check["passed"]


def test_assess_needs_both_measures():
    check = assess(series_report([1.04, 1.02, 1.01]), "surface", 0.02, fit_tol=0.01)
    assert check["final_rel_error"] == pytest.approx(0.01)
    assert check["passed"]

    # final error fine, extrapolated limit 1% off
    check = assess(series_report([1.05, 1.03, 1.02]), "surface", 0.025, fit_tol=0.005)
    assert check["fit_rel_error"] == pytest.approx(0.01)
    assert not check["passed"]

    check = assess(series_report([1.05, 1.03, 1.02]), "surface", 0.025, rule="final")
    assert check["measure"] == "final" and check["passed"]
    with pytest.raises(ValueError):
        assess(series_report([1.0, 1.0, 1.0]), "surface", 0.02, rule="best")


def test_decrease_check():
    assert decrease_check([4.0, 2.0, 0.3])["passed"]
    bump = decrease_check([4.0, 0.2, 0.3])
    assert not bump["monotone"] and not bump["passed"]
    slow = decrease_check([4.0, 3.0, 2.0])
    assert slow["monotone"] and not slow["passed"]
    assert slow["tolerance"] == pytest.approx(0.4)


# ── Report serialization ───────────────────────────────────────────────────

def test_report_json_keeps_non_finite_values():
    report = ConvergenceReport("solvation-force", {"kind": "ball"}, [0.2, 0.1])
    report.add("vdw_radial", 0.2, math.nan, 1.0)
    report.add("identity_radial", "sharp", 1.01, 1.0)
    report.checks["x"] = {"quantity": "x", "value": math.inf, "passed": False}
    report.finalize()
    data = json.loads(report.to_json())
    assert data["rows"][0]["value"] == "nan"
    assert data["status"] == "fail"
    back = ConvergenceReport.from_dict(data)
    assert math.isnan(back.rows[0]["value"])
    assert back.checks["x"]["value"] == math.inf
    assert back.rows[1]["xi"] == "sharp"
    assert back.series("identity_radial")[0] == []


def test_rows_frame_mixes_sharp_and_numeric_xi():
    report = ConvergenceReport("solvation-force", {}, [0.2])
    report.add("ele_radial", 0.2, 1.0, 1.1)
    report.add("identity_radial", "sharp", 2.0, 2.0)
    report.add("surface", 0.2, 1.0, 1.0, well_scale=4.0)
    frame = report.rows_frame()
    assert frame.height == 3
    assert frame["xi"].to_list() == ["0.2", "sharp", "0.2"]
    assert frame["well_scale"].to_list() == [None, None, 4.0]
    assert ConvergenceReport("x", {}, []).rows_frame().height == 0


# ── Setup ──────────────────────────────────────────────────────────────────

def test_setup_rejects_shapes_outside_the_box():
    grid = StructuredGrid((0.0,), (1.0,), (16,), radial=True)
    with pytest.raises(ValueError):
        StudySetup(SolvationModel(PARAMS), grid, InterfaceShape.ball((0.0, 0.0, 0.0), 2.0))


def test_threaded_sweep_keeps_schedule_order(ball_setup):
    ball_setup.threads = 3
    assert ball_setup.sweep(lambda xi: 2 * xi, [0.3, 0.2, 0.1, 0.05], "test") == [0.6, 0.4, 0.2, 0.1]


def test_default_support_encloses_the_ball(ball_setup):
    support = default_support(ball_setup, annular=False)
    assert support["outer"] == pytest.approx(1.8)
    assert support["plateau"] == pytest.approx(1.4)
    annular = default_support(ball_setup, annular=True)
    assert annular["inner"] == pytest.approx(0.3) and annular["inner_plateau"] == pytest.approx(0.6)


def test_unknown_sequence(ball_setup):
    with pytest.raises(ValueError):
        sequence_member(ball_setup, 0.1, "random")


# ── Studies ────────────────────────────────────────────────────────────────

def test_energy_study_of_a_neutral_ball(ball_setup):
    # volume error ~ xi / 2R: the schedule must end below 0.02 for 1%
    report = energy_component_study(ball_setup, [0.04, 0.02, 0.01])
    assert report.quantities() == ["volume", "surface", "total"]
    assert len(report.rows) == 9
    volume, surface = report.checks["volume"], report.checks["surface"]
    assert volume["tolerance"] == pytest.approx(0.01)
    assert surface["tolerance"] == pytest.approx(0.02)
    assert surface["fit_tolerance"] == pytest.approx(0.01)
    assert volume["final_rel_error"] == pytest.approx(0.005, abs=1.5e-3)
    assert volume["passed"] and surface["passed"]
    assert "component_equivalence" in report.checks
    assert report.passed
    assert report.targets["xi"] == "sharp"
    assert report.targets["interface"] == ball_setup.shape.describe()


def test_volume_misses_one_percent_on_coarse_schedules(ball_setup):
    report = energy_component_study(ball_setup, [0.2, 0.1, 0.05])
    assert report.checks["volume"]["final_rel_error"] > 0.01
    assert not report.checks["volume"]["passed"]
    assert not report.passed


def test_relaxed_interface_of_lifted_fields(ball_setup, line_setup):
    phi = sequence_member(ball_setup, 0.05, "recovery-lift")
    ball = relaxed_interface(ball_setup.shape, phi)
    assert ball.kind == "ball"
    assert ball.radius == pytest.approx(1.0, abs=2e-3)

    phi = sequence_member(line_setup, 0.05, "recovery-lift")
    plane = relaxed_interface(line_setup.shape, phi)
    assert plane.kind == "plane"
    assert plane.offset == pytest.approx(0.0, abs=1e-3)

    empty = ScalarField(phi.grid, np.zeros(phi.grid.shape))
    with pytest.raises(ValueError, match="no solute"):
        relaxed_interface(line_setup.shape, empty)


def test_energy_study_of_relaxed_minimizers(ball_setup):
    report = energy_component_study(ball_setup, [0.2, 0.1], sequence="relaxed", max_steps=3)
    interface = report.targets["interface"]
    assert interface["kind"] == "ball"
    assert 0.5 < interface["radius"] < 1.0
    volume = 0.01 * 4.0 * math.pi / 3.0 * interface["radius"] ** 3
    assert report.checks["volume"]["target"] == pytest.approx(volume)
    assert report.quantities() == ["volume", "surface", "total"]
    assert report.provenance["sequence"] == "relaxed"
    assert report.status in ("pass", "fail")


def test_equipartition_of_canonical_and_rescaled_lifts(line_setup):
    canonical = equipartition_study(line_setup, [0.1, 0.05, 0.025])
    assert canonical.checks["discrepancy_vanishes"]["passed"]
    assert canonical.checks["cauchy_schwarz"]["passed"]
    rescaled = equipartition_study(line_setup, [0.1, 0.05, 0.025], sequence="gk", well_scale=4.0)
    assert rescaled.checks["discrepancy_plateau"]["passed"]


def test_equipartition_of_relaxed_minimizers(ball_setup):
    report = equipartition_study(ball_setup, [0.2, 0.1], sequence="relaxed", max_steps=3)
    check = report.checks["discrepancy_vanishes"]
    _, values, _ = report.series("discrepancy_L1")
    assert len(values) == 2
    assert check["rule"] == "monotone decrease, final <= 0.1 x first"
    assert check["value"] == pytest.approx(values[-1])
    assert check["tolerance"] == pytest.approx(0.1 * values[0])
    assert check["passed"] == (values[1] <= 0.1 * values[0])
    assert report.provenance["sequence"] == "relaxed"


def test_counterexample_reaches_beta(line_setup):
    report = counterexample_study(line_setup, [0.02, 0.01, 0.005], a=4.0)
    assert report.targets["beta"] == pytest.approx(1.25)
    assert report.checks["surface"]["target"] == pytest.approx(1.25)
    assert report.checks["surface_control"]["target"] == pytest.approx(1.0)
    assert report.checks["surface"]["passed"]
    assert report.checks["surface_control"]["passed"]
    assert report.checks["l1_distance"]["passed"]
    assert report.passed
    _, l1, _ = report.series("l1_distance")
    assert l1[-1] < l1[0]


def test_ch_force_refuses_rescaled_wells(line_setup, capsys):
    with pytest.raises(HypothesisUnmetError) as info:
        ch_force_study(line_setup, [0.02, 0.01, 0.005], sequence="gk", well_scale=4.0)
    report = info.value.report
    assert report.status == "hypothesis unmet"
    assert not report.checks["hypothesis"]["passed"]
    assert report.checks["hypothesis"]["value"] == pytest.approx(1.25, rel=0.02)
    assert "hypothesis unmet" in capsys.readouterr().out


def test_solvation_force_needs_energy_convergence(ball_setup, capsys):
    schedule = [0.2, 0.1, 0.05]
    energy = series_report([1.4, 1.2, 1.1], schedule)
    energy.checks["surface"] = {"quantity": "surface", "passed": False}
    energy.finalize()
    with pytest.raises(HypothesisUnmetError) as info:
        solvation_force_study(ball_setup, schedule, energy_report=energy)
    report = info.value.report
    assert report.status == "hypothesis unmet"
    assert report.checks["hypothesis"]["failed"] == ["surface"]
    assert report.rows == []
    assert "hypothesis unmet" in capsys.readouterr().out

    with pytest.raises(ValueError):
        solvation_force_study(ball_setup, [0.2, 0.1], energy_report=energy)
    with pytest.raises(ValueError):
        solvation_force_study(ball_setup, schedule, sequence="relaxed")


def test_solvation_force_of_a_neutral_ball(ball_setup):
    schedule = [0.04, 0.02, 0.01]
    report = solvation_force_study(ball_setup, schedule)
    assert report.checks["hypothesis"]["passed"]
    assert report.checks["hypothesis"]["value"] == "pass"
    assert set(report.quantities()) == {
        f"{term}_{kind}" for term in ("vol", "sur", "total") for kind in ("radial", "polynomial")
    }
    # outward radial field: both boundary forces push inward
    assert report.checks["vol_radial"]["target"] < 0
    assert report.checks["sur_radial"]["target"] < 0
    assert report.checks["sur_radial"]["final_rel_error"] <= 0.03
    assert report.checks["vol_radial"]["final_rel_error"] <= 0.03
    assert report.passed
    assert not any(q.startswith("identity") for q in report.quantities())
